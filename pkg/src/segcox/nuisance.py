"""Moment estimation of the measurement-error parameters.

phi = (mu_x, sigma2_x, sigma2_u) solves a per-record system of estimating
equations; the system is triangular, so the solution is closed form for both
record families (true-x pairs and repeated surrogate measures).  Cov(phi_hat)
comes from the usual M-estimation sandwich m^-1 A^-1 B A^-T with A the mean
Jacobian of the summands and B their mean outer product, both at phi_hat.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EstimationError
from .datagen import RM_DESIGNS, ValidationSample
from .model import NuisanceParams

__all__ = ["NuisanceEstimate", "psi_x", "psi_rm", "solve_nuisance"]

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class NuisanceEstimate:
    """Solved nuisance parameters with their sandwich covariance.

    ``per_subject_psi`` holds the estimating-function summands at phi_hat,
    one row per validation record (their column sums vanish at the solution);
    ``jacobian_A`` is the mean analytic Jacobian of those summands;
    ``indices`` mirrors the validation sample's cohort overlap (None for
    external designs) so downstream covariance corrections can align rows.
    """

    phi: NuisanceParams
    cov_phi: np.ndarray
    per_subject_psi: np.ndarray
    jacobian_A: np.ndarray
    design: str
    m: int
    indices: Optional[np.ndarray] = None
    cond_A: float = np.nan


def psi_x(record, phi: NuisanceParams, m: int) -> np.ndarray:
    """Estimating-function summand for one (x, w) validation record.

    Rows: centered x; squared deviation minus sigma2_x*(m-1)/m; squared
    measurement error (w - x)^2 minus sigma2_u*(m-1)/m.
    """
    x, w = record
    u = w - x
    c = (m - 1) / m
    return np.array(
        [
            x - phi.mu_x,
            (x - phi.mu_x) ** 2 - phi.sigma2_x * c,
            u * u - phi.sigma2_u * c,
        ]
    )


def psi_rm(record, phi: NuisanceParams, m: int, sum_k: int) -> np.ndarray:
    """Estimating-function summand for one repeated-measures record.

    ``record`` is the vector of k >= 2 surrogate values for one subject.
    Rows: k*(mean - mu_x); k*(mean - mu_x)^2 centered by sigma2_u*(m-1)/m and
    by (k - k^2/sum_k)*sigma2_x; within-subject sum of squares minus
    (k-1)*sigma2_u.
    """
    w = np.asarray(record, dtype=float)
    k = w.size
    if k < 2:
        raise ValueError("repeated-measures record needs k >= 2 values")
    wbar = w.mean()
    c = (m - 1) / m
    ck = k - k * k / sum_k
    return np.array(
        [
            k * (wbar - phi.mu_x),
            k * (wbar - phi.mu_x) ** 2 - phi.sigma2_u * c - ck * phi.sigma2_x,
            np.sum((w - wbar) ** 2) - (k - 1) * phi.sigma2_u,
        ]
    )


def _solve_x_family(x: np.ndarray, w: np.ndarray):
    m = x.size
    u = w - x
    mu = float(x.mean())
    s2x = float(np.sum((x - mu) ** 2) / (m - 1))
    s2u = float(np.sum(u * u) / (m - 1))
    if s2x <= 0:
        raise EstimationError("estimated sigma2_x is not positive")
    phi = NuisanceParams(mu, s2x, s2u)
    c = (m - 1) / m
    psi = np.column_stack([x - mu, (x - mu) ** 2 - s2x * c, u * u - s2u * c])
    jac = np.array(
        [
            [-1.0, 0.0, 0.0],
            [float(np.mean(-2.0 * (x - mu))), -c, 0.0],
            [0.0, 0.0, -c],
        ]
    )
    return phi, psi, jac


def _solve_rm_family(w_rep):
    m = len(w_rep)
    k = np.array([r.size for r in w_rep], dtype=float)
    wbar = np.array([r.mean() for r in w_rep])
    ss = np.array([float(np.sum((r - r.mean()) ** 2)) for r in w_rep])
    sum_k = k.sum()
    mu = float((k * wbar).sum() / sum_k)
    s2u = float(ss.sum() / (k - 1).sum())
    ck = k - k * k / sum_k
    s2x = float((np.sum(k * (wbar - mu) ** 2) - (m - 1) * s2u) / ck.sum())
    if s2x <= 0:
        raise EstimationError("estimated sigma2_x is not positive")
    phi = NuisanceParams(mu, s2x, s2u)
    c = (m - 1) / m
    psi = np.column_stack(
        [
            k * (wbar - mu),
            k * (wbar - mu) ** 2 - s2u * c - ck * s2x,
            ss - (k - 1) * s2u,
        ]
    )
    jac = np.array(
        [
            [-k.mean(), 0.0, 0.0],
            [float(np.mean(-2.0 * k * (wbar - mu))), -ck.mean(), -c],
            [0.0, 0.0, -(k - 1).mean()],
        ]
    )
    return phi, psi, jac


def solve_nuisance(sample: ValidationSample) -> NuisanceEstimate:
    """Solve the estimating equations for phi on one validation sample.

    Both record families are triangular: mu_x first, then the remaining two
    variance components, each in closed form.  Raises EstimationError when
    sigma2_x_hat is not positive (possible in small/noisy repeated-measures
    samples) or when the mean Jacobian is numerically singular; the harness
    counts either as a non-converged replicate.
    """
    if sample.design in RM_DESIGNS:
        phi, psi, jac = _solve_rm_family(sample.w_rep)
    else:
        phi, psi, jac = _solve_x_family(sample.x_true, sample.w)
    m = sample.m
    resid = np.abs(psi.sum(axis=0)).max()
    if resid > 1e-8 * m:
        raise EstimationError(f"estimating equations not solved: |sum psi| = {resid:g}")
    cond = float(np.linalg.cond(jac))
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise EstimationError(f"singular nuisance Jacobian (condition {cond:g})")
    a_inv = np.linalg.inv(jac)
    b = psi.T @ psi / m
    cov = a_inv @ b @ a_inv.T / m
    cov = 0.5 * (cov + cov.T)
    return NuisanceEstimate(
        phi=phi,
        cov_phi=cov,
        per_subject_psi=psi,
        jacobian_A=jac,
        design=sample.design,
        m=m,
        indices=sample.indices,
        cond_A=cond,
    )
