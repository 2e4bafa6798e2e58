"""Core hazard model: segmented relative risk and the basic data records.

The hazard is lambda0(t) * exp(gamma'z + beta*x + omega*(x - tau)_+), i.e. the
log-hazard slope in x changes from beta to beta + omega at a known changepoint
tau.  Everything in this module is immutable and side-effect free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ThetaParams",
    "NuisanceParams",
    "SubjectRecord",
    "Cohort",
    "hinge",
    "relative_risk",
]


def hinge(x, tau):
    """Positive part of (x - tau); accepts scalars or arrays."""
    return np.maximum(x - tau, 0.0)


@dataclass(frozen=True, eq=False)
class ThetaParams:
    """Regression parameters (gamma, beta, omega) plus the fixed changepoint.

    Parameters
    ----------
    gamma : array_like
        Coefficients of the error-free covariates z (may be empty).
    beta : float
        Log-hazard slope in x below the changepoint.
    omega : float
        Additional slope above the changepoint.
    tau : float
        Changepoint on the x scale.  Held fixed; never updated by solvers.
    """

    gamma: np.ndarray
    beta: float
    omega: float
    tau: float

    def __eq__(self, other):
        if not isinstance(other, ThetaParams):
            return NotImplemented
        return (
            np.array_equal(self.gamma, other.gamma)
            and self.beta == other.beta
            and self.omega == other.omega
            and self.tau == other.tau
        )

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "gamma", g)
        vals = np.concatenate([g, [self.beta, self.omega, self.tau]])
        if not np.all(np.isfinite(vals)):
            raise ValueError("all parameter entries must be finite")

    @property
    def dim(self) -> int:
        """Length of the estimable parameter vector (gamma, beta, omega)."""
        return self.gamma.size + 2

    def as_array(self) -> np.ndarray:
        """Estimable parameters as a flat vector ordered (gamma..., beta, omega)."""
        return np.concatenate([self.gamma, [self.beta, self.omega]])

    @classmethod
    def from_array(cls, vec: np.ndarray, tau: float) -> "ThetaParams":
        vec = np.asarray(vec, dtype=float)
        return cls(gamma=vec[:-2], beta=float(vec[-2]), omega=float(vec[-1]), tau=tau)


@dataclass(frozen=True)
class NuisanceParams:
    """Measurement-error model parameters (mu_x, sigma2_x, sigma2_u).

    x is normal with mean mu_x and variance sigma2_x; the surrogate is
    w = x + u with u normal, mean zero, variance sigma2_u, independent of x.
    """

    mu_x: float
    sigma2_x: float
    sigma2_u: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.mu_x, self.sigma2_x, self.sigma2_u])):
            raise ValueError("nuisance parameters must be finite")
        if self.sigma2_x <= 0:
            raise ValueError("sigma2_x must be positive")
        if self.sigma2_u < 0:
            raise ValueError("sigma2_u must be nonnegative")

    @property
    def reliability(self) -> float:
        """Ratio sigma2_x / (sigma2_x + sigma2_u), in (0, 1]."""
        return self.sigma2_x / (self.sigma2_x + self.sigma2_u)

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_x, self.sigma2_x, self.sigma2_u])


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's survival record.

    ``event_time`` is the end of follow-up (event or censoring, whichever
    came first); ``event`` is True when it was an event.  ``x_true`` is only
    known for validation-overlap subjects.  Entry times are fixed at zero:
    follow-up starts at 0 for everyone and ends by administrative censoring.
    """

    event_time: float
    event: bool
    w: float
    x_true: Optional[float] = None
    z: Sequence[float] = field(default_factory=tuple)
    entry_time: float = 0.0


@dataclass(frozen=True)
class Cohort:
    """Array-backed collection of subject records for the main study.

    Attributes
    ----------
    event_time, event, w : ndarray
        Follow-up time, event indicator and observed surrogate, one entry
        per subject, in a fixed subject order.
    x_true : ndarray or None
        Latent covariate, retained by the generator for oracle checks only;
        estimators must not read it except through validation samples.
    z : ndarray, shape (n, q)
        Error-free covariates (q may be 0).
    t_star : float
        Maximum follow-up time (administrative censoring point).
    """

    event_time: np.ndarray
    event: np.ndarray
    w: np.ndarray
    x_true: Optional[np.ndarray]
    z: np.ndarray
    t_star: float

    def __post_init__(self):
        et = np.asarray(self.event_time, dtype=float)
        ev = np.asarray(self.event, dtype=bool)
        w = np.asarray(self.w, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(len(et), -1) if z.size else np.empty((len(et), 0))
        xt = None if self.x_true is None else np.asarray(self.x_true, dtype=float)
        object.__setattr__(self, "event_time", et)
        object.__setattr__(self, "event", ev)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x_true", xt)
        object.__setattr__(self, "z", z)
        if et.size == 0:
            raise ValueError("cohort must be nonempty")
        if not ev.any():
            raise ValueError("cohort must contain at least one event")
        if np.any(et < 0) or np.any(et > self.t_star):
            raise ValueError("event times must lie in [0, t_star]")
        if np.any(ev & (et >= self.t_star)):
            raise ValueError(
                "follow-up reaching t_star is administratively censored; "
                "event=True at t_star is invalid"
            )
        if len({len(et), len(ev), len(w), len(z)} | ({len(xt)} if xt is not None else set())) != 1:
            raise ValueError("all per-subject arrays must share one length")

    @property
    def n(self) -> int:
        return self.event_time.size

    @property
    def n_z(self) -> int:
        return self.z.shape[1]

    def subject(self, i: int) -> SubjectRecord:
        """Materialize subject i as a record (mainly for inspection/tests)."""
        return SubjectRecord(
            event_time=float(self.event_time[i]),
            event=bool(self.event[i]),
            w=float(self.w[i]),
            x_true=None if self.x_true is None else float(self.x_true[i]),
            z=tuple(self.z[i]),
        )

    @classmethod
    def from_records(cls, records: Sequence[SubjectRecord], t_star: float) -> "Cohort":
        n = len(records)
        q = len(records[0].z) if n else 0
        xt = None
        if n and all(r.x_true is not None for r in records):
            xt = np.array([r.x_true for r in records], dtype=float)
        return cls(
            event_time=np.array([r.event_time for r in records], dtype=float),
            event=np.array([r.event for r in records], dtype=bool),
            w=np.array([r.w for r in records], dtype=float),
            x_true=xt,
            z=np.array([r.z for r in records], dtype=float).reshape(n, q),
            t_star=t_star,
        )


def relative_risk(theta: ThetaParams, x: float, z: Sequence[float] = ()) -> float:
    """Relative risk exp(gamma'z + beta*x + omega*(x - tau)_+).

    Raises
    ------
    ValueError
        If len(z) does not match len(gamma).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float)) if np.size(z) else np.empty(0)
    if z.size != theta.gamma.size:
        raise ValueError(
            f"z has length {z.size} but gamma has length {theta.gamma.size}"
        )
    lp = float(theta.gamma @ z) + theta.beta * x + theta.omega * hinge(x, theta.tau)
    return float(np.exp(lp))
