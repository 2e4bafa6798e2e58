"""Partial-likelihood solver and corrected covariance matrices.

The score is the usual Cox partial-likelihood score with the method's
substituted risk: linear covariate columns for the RC methods, the induced
(conditional-expectation) risk for the RR methods.  Ties share one risk-set
denominator (Breslow).  Solving is damped Newton with step halving, a hard
iteration cap, and the |theta| <= 4.9 divergence guard applied at
termination.

The covariance corrected for nuisance estimation error is
I^-1 (sum H H' + Udot Cov(phi_hat) Udot') I^-1 with H the per-subject score
residuals and Udot the derivative of the score in the nuisance parameters;
when the nuisance sample overlaps the main cohort through repeated measures,
the cross term built from score residuals and estimating-function summands
is additionally removed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EstimationError, SegcoxError
from .calibration import AnalysisDataset, _induced_risk_parts, build_analysis_dataset
from .datagen import ValidationSample
from .model import Cohort, NuisanceParams, ThetaParams
from .nuisance import NuisanceEstimate

__all__ = [
    "FitResult",
    "score_and_info",
    "solve_score",
    "score_residuals",
    "u_phi_jacobian",
    "naive_covariance",
    "corrected_covariance",
    "rr2_fit",
]

MAX_ITER = 100
MAX_HALVINGS = 30
SCORE_TOL = 1e-8
THETA_BOX = 4.9
COND_LIMIT = 1e12


@dataclass
class FitResult:
    """Solved parameters and (once completed) their covariance matrices.

    ``omega_corr`` estimates Cov(theta_hat) accounting for nuisance
    estimation error; ``omega_naive`` ignores it.  ``score_residuals`` holds
    one p-vector per subject, in cohort order, summing to the score at
    theta_hat.  ``theta_rr1`` is only set by the bootstrap-corrected method
    and records the uncorrected point the covariance refers to.
    """

    theta_hat: ThetaParams
    converged: bool
    iterations: int
    info: np.ndarray
    score_norm: float
    omega_corr: Optional[np.ndarray] = None
    omega_naive: Optional[np.ndarray] = None
    score_residuals: Optional[np.ndarray] = None
    u_phi_jacobian: Optional[np.ndarray] = None
    theta_rr1: Optional[ThetaParams] = None


class _PartialLikelihood:
    """Sorted risk-set machinery for one analysis dataset.

    Subjects are ordered by decreasing follow-up time once; risk-set sums at
    each event time are then cumulative sums ending at the last row of the
    tied-time block, so tied events share one denominator.
    """

    def __init__(self, analysis: AnalysisDataset):
        self.analysis = analysis
        times = analysis.times
        n = times.size
        self.order = np.argsort(-times, kind="stable")
        t_sorted = times[self.order]
        # boundary of each tied-time block: last sorted row with the same time
        uniq, inverse = np.unique(-t_sorted, return_inverse=True)
        block_last = np.zeros(uniq.size, dtype=np.intp)
        np.maximum.at(block_last, inverse, np.arange(n))
        self.risk_boundary = block_last[inverse]
        self.events_sorted = analysis.events[self.order]
        self.event_rows = np.flatnonzero(self.events_sorted)
        if self.event_rows.size == 0:
            raise EstimationError("no events: partial likelihood is degenerate")
        self.t_sorted = t_sorted
        self.z_sorted = analysis.z[self.order]
        self.linear = analysis.method in ("RC1", "RC2")
        if self.linear:
            self.x_sorted = np.column_stack([self.z_sorted, analysis.lin[self.order]])
        else:
            self.pm_mean = analysis.pm_mean[self.order]
            self.pm_var = analysis.pm_var[self.order]
        self.n = n
        self.p = analysis.n_params

    def _risk_parts(self, theta_vec, need_hessian):
        """Per-subject (log risk, gradient rows, optional Hessian blocks)."""
        q = self.p - 2
        if self.linear:
            log_r = self.x_sorted @ theta_vec
            return log_r, self.x_sorted, None
        beta, omega = theta_vec[-2], theta_vec[-1]
        tau = self.analysis.tau
        grads = np.empty((self.n, self.p))
        grads[:, :q] = self.z_sorted
        log_r = np.empty(self.n)
        hess = np.zeros((self.n, 2, 2)) if need_hessian else None
        exact = self.pm_var <= 0
        if np.any(exact):
            mm = self.pm_mean[exact]
            hv = np.maximum(mm - tau, 0.0)
            log_r[exact] = beta * mm + omega * hv
            grads[exact, q] = mm
            grads[exact, q + 1] = hv
        rest = ~exact
        if np.any(rest):
            L, gb, go, hbb, hbo, hoo = _induced_risk_parts(
                beta, omega, tau, self.pm_mean[rest], self.pm_var[rest], need_hessian
            )
            log_r[rest] = L
            grads[rest, q] = gb
            grads[rest, q + 1] = go
            if need_hessian:
                hess[rest, 0, 0] = hbb
                hess[rest, 0, 1] = hbo
                hess[rest, 1, 0] = hbo
                hess[rest, 1, 1] = hoo
        if q:
            log_r += self.z_sorted @ theta_vec[:q]
        return log_r, grads, hess

    def evaluate(self, theta_vec, weights=None, need_info=True, need_event_stats=False):
        """Score and observed information at theta, with optional subject weights.

        Returns (U, I, stats); stats is (S0, Ebar) per event in sorted order
        when requested.  Any non-finite risk yields (None, None, None) so the
        caller can shrink its step.
        """
        log_r, grads, hess = self._risk_parts(theta_vec, need_info and not self.linear)
        with np.errstate(over="ignore"):
            r = np.exp(log_r)
        if weights is not None:
            r = r * weights
        if not np.all(np.isfinite(r)):
            return None, None, None
        ev = self.event_rows
        bound = self.risk_boundary[ev]
        q = self.p - 2
        c0 = np.cumsum(r)
        c1 = np.cumsum(r[:, None] * grads, axis=0)
        s0 = c0[bound]
        s1 = c1[bound]
        if np.any(s0 <= 0):
            return None, None, None
        ebar = s1 / s0[:, None]
        wev = weights[ev] if weights is not None else None
        resid = grads[ev] - ebar
        if wev is not None:
            u = (wev[:, None] * resid).sum(axis=0)
        else:
            u = resid.sum(axis=0)
        info = None
        if need_info:
            outer = grads[:, :, None] * grads[:, None, :]
            if hess is not None:
                outer[:, q:, q:] += hess
            c2 = np.cumsum(r[:, None, None] * outer, axis=0)
            s2 = c2[bound]
            terms = s2 / s0[:, None, None] - ebar[:, :, None] * ebar[:, None, :]
            if hess is not None:
                terms[:, q:, q:] -= hess[ev]
            if wev is not None:
                info = (wev[:, None, None] * terms).sum(axis=0)
            else:
                info = terms.sum(axis=0)
        stats = None
        if need_event_stats:
            stats = (s0, ebar, r, grads)
        return u, info, stats


def score_and_info(theta: ThetaParams, analysis: AnalysisDataset, method: Optional[str] = None):
    """Score vector and observed information at theta for one dataset.

    ``method`` defaults to the dataset's own method and must match it when
    given.  Parameter order is (gamma..., beta, omega).
    """
    if method is not None and method != analysis.method:
        raise SegcoxError(f"dataset was built for {analysis.method!r}, not {method!r}")
    pl = _PartialLikelihood(analysis)
    u, info, _ = pl.evaluate(theta.as_array())
    if u is None:
        raise EstimationError("non-finite risk at the requested parameters")
    return u, info


def _solve(pl: _PartialLikelihood, init_vec: np.ndarray, weights=None):
    """Damped Newton iteration on one prepared likelihood."""
    theta = init_vec.astype(float).copy()
    u, info, _ = pl.evaluate(theta, weights)
    iterations = 0
    converged = False
    for iterations in range(1, MAX_ITER + 1):
        if u is None:
            break
        sup = np.abs(u).max()
        if sup <= SCORE_TOL:
            converged = True
            iterations -= 1
            break
        if not np.all(np.isfinite(info)) or np.linalg.cond(info) > COND_LIMIT:
            break
        step = np.linalg.solve(info, u)
        norm0 = float(np.linalg.norm(u))
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + scale * step
            u_new, info_new, _ = pl.evaluate(cand, weights)
            if u_new is not None and float(np.linalg.norm(u_new)) < norm0:
                theta, u, info = cand, u_new, info_new
                break
            scale *= 0.5
        else:
            break
    if converged and np.abs(theta).max() > THETA_BOX:
        converged = False
    if u is None:
        u, info, _ = pl.evaluate(init_vec, weights)
        theta = init_vec
    return theta, converged, iterations, u, info


def solve_score(
    init: ThetaParams, analysis: AnalysisDataset, method: Optional[str] = None
) -> FitResult:
    """Solve the score equation from ``init``; covariance fields stay unset.

    Divergence (iteration cap, singular information, or a terminal estimate
    outside the |theta| <= 4.9 box) is reported through ``converged`` rather
    than raised, so simulation harnesses can count it.
    """
    if method is not None and method != analysis.method:
        raise SegcoxError(f"dataset was built for {analysis.method!r}, not {method!r}")
    pl = _PartialLikelihood(analysis)
    theta, converged, iterations, u, info = _solve(pl, init.as_array())
    return FitResult(
        theta_hat=ThetaParams.from_array(theta, analysis.tau),
        converged=converged,
        iterations=iterations,
        info=info if info is not None else np.full((pl.p, pl.p), np.nan),
        score_norm=float(np.abs(u).max()) if u is not None else np.inf,
    )


def score_residuals(
    theta_hat: ThetaParams, analysis: AnalysisDataset, method: Optional[str] = None
) -> np.ndarray:
    """Per-subject score residuals H_i at theta_hat, in cohort order.

    Each H_i depends only on subject i's data and risk-set aggregates; the
    rows sum to the score, which vanishes at a converged solution.
    """
    if method is not None and method != analysis.method:
        raise SegcoxError(f"dataset was built for {analysis.method!r}, not {method!r}")
    pl = _PartialLikelihood(analysis)
    vec = theta_hat.as_array()
    u, _, stats = pl.evaluate(vec, need_info=False, need_event_stats=True)
    if u is None:
        raise EstimationError("non-finite risk at theta_hat")
    s0, ebar, r, grads = stats
    t_event = pl.t_sorted[pl.event_rows]
    # ascending event order for prefix sums over event times <= T_i
    asc = np.argsort(t_event, kind="stable")
    te_asc = t_event[asc]
    inv_s0 = 1.0 / s0[asc]
    cum_a = np.cumsum(inv_s0)
    cum_b = np.cumsum(ebar[asc] * inv_s0[:, None], axis=0)
    pos = np.searchsorted(te_asc, pl.t_sorted, side="right")
    h = np.zeros((pl.n, pl.p))
    at_risk = pos > 0
    idx = pos[at_risk] - 1
    h[at_risk] = -r[at_risk, None] * (
        grads[at_risk] * cum_a[idx][:, None] - cum_b[idx]
    )
    h[pl.event_rows] += grads[pl.event_rows] - ebar
    out = np.empty_like(h)
    out[pl.order] = h
    return out


def u_phi_jacobian(
    theta_hat: ThetaParams,
    cohort: Cohort,
    validation: Optional[ValidationSample],
    phi: NuisanceParams,
    method: str,
    design: str,
) -> np.ndarray:
    """Derivative of the score in the nuisance parameters, p x 3.

    Central finite differences with relative step 1e-5, rebuilding the
    analysis dataset at each perturbation (the calibration depends on phi).
    A perturbation that would leave the admissible region (sigma2_x <= 0 or
    sigma2_u < 0) falls back to a one-sided difference.
    """
    vec = theta_hat.as_array()
    base = phi.as_array()

    def score_at(phi_vec):
        p = NuisanceParams(*phi_vec)
        ds = build_analysis_dataset(cohort, validation, p, theta_hat, method, design)
        u, _, _ = _PartialLikelihood(ds).evaluate(vec, need_info=False)
        if u is None:
            raise EstimationError("non-finite risk while differentiating over phi")
        return u

    def admissible(phi_vec):
        return phi_vec[1] > 0 and phi_vec[2] >= 0

    cols = []
    for j in range(3):
        h = 1e-5 * max(abs(base[j]), 0.1)
        while True:
            up = base.copy()
            up[j] += h
            down = base.copy()
            down[j] -= h
            if admissible(down):
                cols.append((score_at(up) - score_at(down)) / (2.0 * h))
                break
            if h > 1e-12 * max(abs(base[j]), 0.1) and admissible(up) and base[j] - h / 2 > 0:
                h *= 0.5
                continue
            cols.append((score_at(up) - score_at(base)) / h)
            break
    return np.column_stack(cols)


def naive_covariance(fit: FitResult) -> np.ndarray:
    """Sandwich I^-1 (sum H H') I^-1 ignoring nuisance estimation error."""
    if fit.score_residuals is None:
        raise SegcoxError("score residuals must be attached first")
    bread = np.linalg.inv(fit.info)
    meat = fit.score_residuals.T @ fit.score_residuals
    cov = bread @ meat @ bread
    return 0.5 * (cov + cov.T)


def corrected_covariance(
    fit: FitResult, nuisance: NuisanceEstimate, design: str
) -> np.ndarray:
    """Covariance of theta_hat corrected for the estimated nuisance.

    Adds Udot Cov(phi_hat) Udot' to the raw score-residual meat; for the
    internal repeated-measures design the cross term
    C = Phi_hat A_m^-1 Udot' (with Phi_hat the mean over overlap subjects of
    H_i psi_i') and its transpose are removed, since the nuisance sample then
    shares data with the main-study score.  The result is symmetrized; an
    asymmetry above 1e-10 triggers a warning and a negative diagonal raises
    EstimationError.
    """
    if fit.score_residuals is None or fit.u_phi_jacobian is None:
        raise SegcoxError("residuals and the phi Jacobian must be attached first")
    if nuisance.design != design:
        raise SegcoxError(
            f"nuisance estimate is for design {nuisance.design!r}, not {design!r}"
        )
    h = fit.score_residuals
    udot = fit.u_phi_jacobian
    a_corr = h.T @ h + udot @ nuisance.cov_phi @ udot.T
    if design == "IV_RM":
        if nuisance.indices is None:
            raise SegcoxError("internal repeated-measures design requires overlap indices")
        h_overlap = h[nuisance.indices]
        phi_hat = h_overlap.T @ nuisance.per_subject_psi / nuisance.m
        cross = phi_hat @ np.linalg.solve(nuisance.jacobian_A, udot.T)
        a_corr = a_corr - cross - cross.T
    bread = np.linalg.inv(fit.info)
    cov = bread @ a_corr @ bread
    asym = np.abs(cov - cov.T).max()
    if asym > 1e-10 * max(1.0, np.abs(cov).max()):
        warnings.warn(f"corrected covariance asymmetric by {asym:g}; symmetrizing")
    cov = 0.5 * (cov + cov.T)
    if np.any(np.diag(cov) < 0):
        raise EstimationError("corrected covariance has a negative diagonal entry")
    return cov


def rr2_fit(
    cohort: Cohort,
    validation: Optional[ValidationSample],
    phi: NuisanceParams,
    theta_init: ThetaParams,
    B: int,
    rng: np.random.Generator,
) -> FitResult:
    """Bootstrap bias-corrected induced-risk fit.

    Fits the induced-risk score, then refits it B times with i.i.d. unit-mean
    exponential subject weights (each draw on its own pre-split stream); the
    mean bootstrap shift estimates the bias, which is subtracted from the
    point estimate.  More than 20% failed refits raises EstimationError.
    The information and residual machinery of the uncorrected fit is kept so
    its covariance can be reused; ``theta_rr1`` records that uncorrected
    point.
    """
    if B < 50:
        raise SegcoxError("at least 50 bootstrap draws are required")
    design = validation.design if validation is not None else "EV_X"
    analysis = build_analysis_dataset(cohort, validation, phi, theta_init, "RR2", design)
    pl = _PartialLikelihood(analysis)
    theta, converged, iterations, u, info = _solve(pl, theta_init.as_array())
    if not converged:
        return FitResult(
            theta_hat=ThetaParams.from_array(theta, analysis.tau),
            converged=False,
            iterations=iterations,
            info=info if info is not None else np.full((pl.p, pl.p), np.nan),
            score_norm=float(np.abs(u).max()) if u is not None else np.inf,
        )
    streams = rng.spawn(B)
    draws = []
    failures = 0
    for stream in streams:
        weights = stream.exponential(1.0, pl.n)
        t_b, ok, _, _, _ = _solve(pl, theta, weights=weights[pl.order])
        if ok:
            draws.append(t_b)
        else:
            failures += 1
    if failures > 0.2 * B:
        raise EstimationError(
            f"{failures}/{B} bootstrap refits diverged; bias correction unreliable"
        )
    bias = np.mean(draws, axis=0) - theta
    theta_corr = theta - bias
    converged = bool(np.abs(theta_corr).max() <= THETA_BOX)
    return FitResult(
        theta_hat=ThetaParams.from_array(theta_corr, analysis.tau),
        converged=converged,
        iterations=iterations,
        info=info,
        score_norm=float(np.abs(u).max()),
        theta_rr1=ThetaParams.from_array(theta, analysis.tau),
    )
