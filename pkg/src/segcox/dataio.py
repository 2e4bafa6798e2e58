"""CSV and JSON input/output for cohorts, validation samples and fits.

Cohort CSV columns: id, event_time, event, w[, x_true][, z0, z1, ...].
Validation CSV columns: id, design[, x_true], w_1[, w_2, ...]; unused cells
stay empty.  Internal designs store the main-cohort row id.  All floats are
written with 17 significant digits, which round-trips float64 exactly; the
decimal separator is always a dot and rows end with a newline.
"""

from __future__ import annotations

import csv
import json
from typing import Optional

import numpy as np

from .errors import SchemaError
from .datagen import DESIGNS, RM_DESIGNS, ValidationSample
from .model import Cohort

__all__ = [
    "cohort_to_csv",
    "cohort_from_csv",
    "validation_to_csv",
    "validation_from_csv",
    "fit_report",
    "write_fit_json",
]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def cohort_to_csv(cohort: Cohort, path) -> None:
    """Write a cohort, including x_true and z columns when present."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["id", "event_time", "event", "w"]
        if cohort.x_true is not None:
            header.append("x_true")
        header += [f"z{j}" for j in range(cohort.n_z)]
        writer.writerow(header)
        for i in range(cohort.n):
            row = [i, _fmt(cohort.event_time[i]), int(cohort.event[i]), _fmt(cohort.w[i])]
            if cohort.x_true is not None:
                row.append(_fmt(cohort.x_true[i]))
            row += [_fmt(v) for v in cohort.z[i]]
            writer.writerow(row)


def cohort_from_csv(path, t_star: Optional[float] = None) -> Cohort:
    """Read a cohort; t_star defaults to the maximum observed time."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        cols = reader.fieldnames
        for required in ("id", "event_time", "event", "w"):
            if required not in cols:
                raise SchemaError(f"{path}: missing required column {required!r}")
        z_cols = sorted((c for c in cols if c.startswith("z")), key=lambda c: int(c[1:] or 0))
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    try:
        event_time = np.array([float(r["event_time"]) for r in rows])
        event = np.array([int(r["event"]) for r in rows], dtype=bool)
        w = np.array([float(r["w"]) for r in rows])
        x_true = None
        if "x_true" in cols and all(r["x_true"] not in ("", None) for r in rows):
            x_true = np.array([float(r["x_true"]) for r in rows])
        z = np.array([[float(r[c]) for c in z_cols] for r in rows]).reshape(len(rows), len(z_cols))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed numeric cell ({exc})") from exc
    ts = float(event_time.max()) if t_star is None else t_star
    try:
        return Cohort(event_time=event_time, event=event, w=w, x_true=x_true, z=z, t_star=ts)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def validation_to_csv(sample: ValidationSample, path) -> None:
    """Write a validation sample in the documented layout."""
    k_max = int(sample.k.max())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["id", "design", "x_true"] + [f"w_{j + 1}" for j in range(k_max)]
        writer.writerow(header)
        ids = sample.indices if sample.indices is not None else np.arange(sample.m)
        for i in range(sample.m):
            if sample.design in RM_DESIGNS:
                reps = [_fmt(v) for v in sample.w_rep[i]]
                row = [int(ids[i]), sample.design, ""] + reps + [""] * (k_max - len(reps))
            else:
                row = [int(ids[i]), sample.design, _fmt(sample.x_true[i]), _fmt(sample.w[i])]
            writer.writerow(row)


def validation_from_csv(path, design: Optional[str] = None) -> ValidationSample:
    """Read a validation sample, checking the design-specific schema.

    X designs require a populated x_true column; repeated-measures designs
    require at least two w_j values per row.  A ``design`` argument must
    match the file's design tag.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        cols = reader.fieldnames
        for required in ("id", "design"):
            if required not in cols:
                raise SchemaError(f"{path}: missing required column {required!r}")
        w_cols = sorted((c for c in cols if c.startswith("w_")), key=lambda c: int(c[2:]))
        if not w_cols:
            raise SchemaError(f"{path}: no w_j columns")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    tags = {r["design"] for r in rows}
    if len(tags) != 1:
        raise SchemaError(f"{path}: mixed design tags {sorted(tags)}")
    file_design = tags.pop()
    if file_design not in DESIGNS:
        raise SchemaError(f"{path}: unknown design {file_design!r}")
    if design is not None and design != file_design:
        raise SchemaError(f"{path}: file is {file_design}, requested {design}")
    ids = np.array([int(r["id"]) for r in rows])
    internal = file_design in ("IV_X", "IV_RM")
    try:
        if file_design in RM_DESIGNS:
            reps = []
            for r in rows:
                vals = [float(r[c]) for c in w_cols if r[c] not in ("", None)]
                reps.append(np.array(vals))
            return ValidationSample(
                design=file_design, w_rep=reps, indices=ids if internal else None
            )
        if "x_true" not in cols or any(r["x_true"] in ("", None) for r in rows):
            raise SchemaError(f"{path}: design {file_design} requires an x_true column")
        x_true = np.array([float(r["x_true"]) for r in rows])
        w = np.array([float(r[w_cols[0]]) for r in rows])
        return ValidationSample(
            design=file_design, x_true=x_true, w=w, indices=ids if internal else None
        )
    except SchemaError:
        raise
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def fit_report(fit, nuisance, method: str, design: str, tau: float) -> dict:
    """JSON-ready summary of a completed fit."""
    theta = fit.theta_hat
    se = np.sqrt(np.diag(fit.omega_corr)) if fit.omega_corr is not None else None
    vec = theta.as_array()
    report = {
        "method": method,
        "design": design,
        "tau": tau,
        "theta_hat": {
            "gamma": list(theta.gamma),
            "beta": theta.beta,
            "omega": theta.omega,
        },
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "score_sup_norm": float(fit.score_norm),
        "phi_hat": {
            "mu_x": nuisance.phi.mu_x,
            "sigma2_x": nuisance.phi.sigma2_x,
            "sigma2_u": nuisance.phi.sigma2_u,
        },
        "cov_phi": nuisance.cov_phi.tolist(),
        "omega_corr": None if fit.omega_corr is None else fit.omega_corr.tolist(),
        "omega_naive": None if fit.omega_naive is None else fit.omega_naive.tolist(),
    }
    if se is not None:
        names = [f"gamma{j}" for j in range(theta.gamma.size)] + ["beta", "omega"]
        report["se"] = dict(zip(names, se.tolist()))
        report["ci95"] = {
            name: [float(vec[j] - 1.96 * se[j]), float(vec[j] + 1.96 * se[j])]
            for j, name in enumerate(names)
        }
    return report


def write_fit_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
