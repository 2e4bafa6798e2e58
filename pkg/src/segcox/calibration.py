"""Conditional-moment calibration of the mismeasured covariate.

Under joint normality, x given a surrogate mean is normal with closed-form
moments.  The bias-correction methods substitute different functionals of
that conditional law into the hazard:

* RC1 replaces x by its conditional mean and forms the hinge of that mean.
* RC2 additionally replaces the hinge term by its conditional expectation.
* RR1/RR2 replace the whole relative risk by its conditional expectation,
  which stays available in closed form together with its log-gradient and
  log-Hessian in (beta, omega).

Everything is evaluated in log space with erfc-based normal CDFs, so large
linear predictors do not overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import log_ndtr, ndtr

from .errors import SegcoxError
from .datagen import DESIGNS, METHODS, ValidationSample
from .model import Cohort, NuisanceParams, ThetaParams, hinge, relative_risk

__all__ = [
    "PosteriorMoments",
    "AnalysisDataset",
    "posterior_moments",
    "expected_hinge",
    "induced_rr",
    "induced_rr_loggrad",
    "build_analysis_dataset",
]

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PosteriorMoments:
    """Conditional mean and variance of x given a surrogate mean."""

    m: float
    v: float

    def __post_init__(self):
        if self.v < 0:
            raise ValueError("conditional variance must be nonnegative")


def _posterior_arrays(w_bar, k, phi: NuisanceParams):
    """Vectorized conditional moments; k may be scalar or array."""
    noise = phi.sigma2_u / np.asarray(k, dtype=float)
    denom = phi.sigma2_x + noise
    shrink = phi.sigma2_x / denom
    m = phi.mu_x + shrink * (np.asarray(w_bar, dtype=float) - phi.mu_x)
    v = phi.sigma2_x * noise / denom
    return m, v


def posterior_moments(w_bar: float, k: int, phi: NuisanceParams) -> PosteriorMoments:
    """Moments of x given the mean of k surrogate measurements.

    The mean shrinks w_bar toward mu_x by sigma2_x / (sigma2_x + sigma2_u/k);
    the variance is sigma2_x * (sigma2_u/k) / (sigma2_x + sigma2_u/k), which
    lies in [0, sigma2_x].
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    m, v = _posterior_arrays(w_bar, k, phi)
    return PosteriorMoments(m=float(m), v=float(v))


def _expected_hinge_arrays(m, v, tau):
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    out = hinge(m, tau)
    pos = v > 0
    if np.any(pos):
        s = np.sqrt(v[pos])
        d = (m[pos] - tau) / s
        phi_d = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
        out = np.array(out, dtype=float)
        out[pos] = (m[pos] - tau) * ndtr(d) + s * phi_d
    return out


def expected_hinge(pm: PosteriorMoments, tau: float) -> float:
    """E[(x - tau)_+] for x normal with moments pm; hinge(m, tau) when v = 0."""
    return float(_expected_hinge_arrays(np.array([pm.m]), np.array([pm.v]), tau)[0])


def _normal_hazard(d):
    """phi(d) / Phi(d), stable for very negative d."""
    return np.exp(-0.5 * d * d - _LOG_SQRT_2PI - log_ndtr(d))


def _induced_risk_parts(beta, omega, tau, m, v, need_hessian=True):
    """Log induced risk and its derivatives in (beta, omega), vectorized.

    For x ~ N(m, v), E[exp(beta*x + omega*(x-tau)_+)] splits at the
    changepoint into two lognormal-truncation pieces; each is accumulated in
    log space.  Returns (L, g_beta, g_omega, H_bb, H_bo, H_oo); the Hessian
    triple is None when not requested.  Requires v > 0 elementwise.
    """
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    s = np.sqrt(v)
    bo = beta + omega
    a1 = beta * m + 0.5 * beta * beta * v
    d1 = (tau - m - beta * v) / s
    a2 = -omega * tau + bo * m + 0.5 * bo * bo * v
    d2 = (m + bo * v - tau) / s
    t1 = a1 + log_ndtr(d1)
    t2 = a2 + log_ndtr(d2)
    L = np.logaddexp(t1, t2)
    w1 = np.exp(t1 - L)
    w2 = np.exp(t2 - L)
    h1 = _normal_hazard(d1)
    h2 = _normal_hazard(d2)
    g1b = m + beta * v - s * h1
    g2b = m + bo * v + s * h2
    g2o = g2b - tau
    gb = w1 * g1b + w2 * g2b
    go = w2 * g2o
    if not need_hessian:
        return L, gb, go, None, None, None
    hp1 = -d1 * h1 - h1 * h1
    hp2 = -d2 * h2 - h2 * h2
    t1bb = v * (1.0 + hp1)
    t2bb = v * (1.0 + hp2)
    h_bb = w1 * (t1bb + g1b * g1b) + w2 * (t2bb + g2b * g2b) - gb * gb
    h_bo = w2 * (t2bb + g2b * g2o) - gb * go
    h_oo = w2 * (t2bb + g2o * g2o) - go * go
    return L, gb, go, h_bb, h_bo, h_oo


def induced_rr(theta: ThetaParams, pm: PosteriorMoments, z=()) -> float:
    """Conditional expectation of the relative risk given the surrogate.

    Equals exp(gamma'z) * E[exp(beta*x + omega*(x-tau)_+)] with x normal with
    moments pm; reduces to relative_risk(theta, pm.m, z) when pm.v = 0.
    Strictly positive.
    """
    if pm.v <= 0:
        return relative_risk(theta, pm.m, z)
    z = np.atleast_1d(np.asarray(z, dtype=float)) if np.size(z) else np.empty(0)
    if z.size != theta.gamma.size:
        raise ValueError("z length must match gamma length")
    L = _induced_risk_parts(
        theta.beta, theta.omega, theta.tau, np.array([pm.m]), np.array([pm.v]), need_hessian=False
    )[0][0]
    return float(np.exp(float(theta.gamma @ z) + L))


def induced_rr_loggrad(theta: ThetaParams, pm: PosteriorMoments, z=()) -> np.ndarray:
    """Gradient of log induced_rr over (gamma..., beta, omega).

    The gamma block equals z; at v = 0 the remainder reduces to the linear
    predictor gradient (m, hinge(m, tau)).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float)) if np.size(z) else np.empty(0)
    if z.size != theta.gamma.size:
        raise ValueError("z length must match gamma length")
    if pm.v <= 0:
        return np.concatenate([z, [pm.m, hinge(pm.m, theta.tau)]])
    _, gb, go, *_ = _induced_risk_parts(
        theta.beta, theta.omega, theta.tau, np.array([pm.m]), np.array([pm.v]), need_hessian=False
    )
    return np.concatenate([z, [float(gb[0]), float(go[0])]])


@dataclass(frozen=True)
class AnalysisDataset:
    """Per-subject inputs to the partial-likelihood solver for one method.

    RC methods carry two substituted covariate columns in ``lin`` (appended
    after z); RR methods carry the conditional moments ``pm_mean``/``pm_var``
    so the theta-dependent risk can be evaluated at solve time.  Both are
    kept populated for the RC methods (the moments feed diagnostics).
    Subjects revealed by an internal design have pm_var = 0 and use their
    true covariate value.
    """

    method: str
    design: str
    tau: float
    times: np.ndarray
    events: np.ndarray
    z: np.ndarray
    pm_mean: np.ndarray
    pm_var: np.ndarray
    lin: Optional[np.ndarray]

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def n_params(self) -> int:
        return self.z.shape[1] + 2


def build_analysis_dataset(
    cohort: Cohort,
    validation: Optional[ValidationSample],
    phi: NuisanceParams,
    theta_context: ThetaParams,
    method: str,
    design: str,
) -> AnalysisDataset:
    """Apply the method's covariate substitution to every cohort subject.

    Internal designs bypass calibration for validation-overlap subjects:
    IV_X reveals x_true (zero conditional variance); IV_RM conditions each
    overlap subject on the mean of all its replicates with its personal k.
    Only the fixed changepoint inside ``theta_context`` is consulted: the
    substitutions are free of the estimable coefficients (RR risks are
    evaluated at solve time from the stored moments), so one dataset is
    reused across solver iterations.
    """
    tau = theta_context.tau
    if method not in METHODS:
        raise SegcoxError(f"unknown method {method!r}")
    if design not in DESIGNS:
        raise SegcoxError(f"unknown design {design!r}")
    if cohort.n_z > 0 and phi.sigma2_u > 0:
        raise SegcoxError(
            "z covariates are not supported together with measurement-error "
            "correction: calibration conditions on w alone"
        )
    if validation is not None and validation.design != design:
        raise SegcoxError(
            f"validation sample is for design {validation.design!r}, not {design!r}"
        )

    w_bar = cohort.w.astype(float).copy()
    k = np.ones(cohort.n)
    if design in ("IV_X", "IV_RM"):
        if validation is None:
            raise SegcoxError("internal designs require the validation sample")
        idx = validation.indices
        if np.any(idx < 0) or np.any(idx >= cohort.n):
            raise SegcoxError("internal-design index out of range")
        if design == "IV_RM":
            w_bar[idx] = [r.mean() for r in validation.w_rep]
            k[idx] = validation.k

    mm, vv = _posterior_arrays(w_bar, k, phi)
    vv = np.broadcast_to(np.asarray(vv, dtype=float), mm.shape).copy()
    if design == "IV_X":
        idx = validation.indices
        mm[idx] = validation.x_true
        vv[idx] = 0.0

    if method == "RC1":
        lin = np.column_stack([mm, hinge(mm, tau)])
    elif method == "RC2":
        lin = np.column_stack([mm, _expected_hinge_arrays(mm, vv, tau)])
    else:
        lin = None
    return AnalysisDataset(
        method=method,
        design=design,
        tau=tau,
        times=cohort.event_time,
        events=cohort.event,
        z=cohort.z,
        pm_mean=mm,
        pm_var=vv,
        lin=lin,
    )
