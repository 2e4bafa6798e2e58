"""Scenario-grid reporting: the summary table and companion figures.

The summary CSV has one row per scenario with 4-significant-digit metric
columns; raw replication dumps keep 17 digits.  Figures are rendered next to
the table: per (disease, rho) group, one panel pair per metric with the
changepoint quantile on the x axis, one line per method, one line style per
validation design.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .datagen import DESIGNS, METHODS, ScenarioConfig
from .harness import GridEntry, ReplicationResult

__all__ = ["SUMMARY_COLUMNS", "summary_rows", "write_summary_csv", "write_replication_csv", "render_figures"]

SUMMARY_COLUMNS = [
    "disease",
    "rho",
    "tau_quantile",
    "method",
    "design",
    "rel_bias_beta",
    "rel_bias_omega",
    "mse_beta",
    "mse_omega",
    "cov_beta",
    "cov_omega",
    "pctgud",
    "n_reps",
    "n_converged",
]

_METHOD_COLOR = dict(zip(METHODS, ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728")))
_DESIGN_STYLE = dict(zip(DESIGNS, ("-", "--", "-.", ":")))


def _g4(x: float) -> str:
    return format(float(x), ".4g")


def summary_rows(entries: Sequence[GridEntry]) -> List[dict]:
    """Flatten grid entries (skipping failed scenarios) into table rows."""
    rows = []
    for entry in entries:
        if entry.summary is None:
            continue
        sc, s = entry.scenario, entry.summary
        rows.append(
            {
                "disease": sc.disease,
                "rho": _g4(sc.rho_xw),
                "tau_quantile": _g4(sc.tau_quantile),
                "method": sc.method,
                "design": sc.design,
                "rel_bias_beta": _g4(s.rel_bias_beta),
                "rel_bias_omega": _g4(s.rel_bias_omega),
                "mse_beta": _g4(s.mse_beta),
                "mse_omega": _g4(s.mse_omega),
                "cov_beta": _g4(s.coverage_beta),
                "cov_omega": _g4(s.coverage_omega),
                "pctgud": _g4(s.pctgud),
                "n_reps": s.n_total,
                "n_converged": s.n_converged,
            }
        )
    return rows


def write_summary_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_replication_csv(scenario: ScenarioConfig, results: Sequence[ReplicationResult], path) -> None:
    """Raw per-replicate dump at full precision (for audits and refolds)."""

    def f17(x):
        return format(float(x), ".17g")

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["rep_index", "converged", "beta_hat", "omega_hat", "se_beta", "se_omega", "ci_hit_beta", "ci_hit_omega"]
        )
        for r in sorted(results, key=lambda r: r.seed_tag):
            if r.converged:
                writer.writerow(
                    [
                        r.seed_tag,
                        1,
                        f17(r.theta_hat.beta),
                        f17(r.theta_hat.omega),
                        f17(r.se_beta),
                        f17(r.se_omega),
                        int(r.ci_hits[0]),
                        int(r.ci_hits[1]),
                    ]
                )
            else:
                writer.writerow([r.seed_tag, 0, "", "", "", "", "", ""])


_FIG_METRICS = (
    ("rel_bias", ("rel_bias_beta", "rel_bias_omega"), "median relative bias"),
    ("mse", ("mse_beta", "mse_omega"), "mean squared error"),
    ("coverage", ("cov_beta", "cov_omega"), "95% CI coverage"),
)


def render_figures(rows: Sequence[dict], fig_dir) -> List[Path]:
    """Render one figure per (disease, rho, metric) plus a convergence figure.

    Returns the written paths.  Groups with no rows are skipped.
    """
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    groups = sorted({(r["disease"], r["rho"]) for r in rows})
    for disease, rho in groups:
        sub = [r for r in rows if r["disease"] == disease and r["rho"] == rho]
        combos = sorted({(r["method"], r["design"]) for r in sub})
        for name, (col_b, col_o), label in _FIG_METRICS:
            fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.6), sharex=True)
            for method, design in combos:
                pts = sorted(
                    (float(r["tau_quantile"]), float(r[col_b]), float(r[col_o]))
                    for r in sub
                    if r["method"] == method and r["design"] == design
                )
                if not pts:
                    continue
                xs = [p[0] for p in pts]
                axes[0].plot(xs, [p[1] for p in pts], label=f"{method}/{design}",
                             color=_METHOD_COLOR[method], linestyle=_DESIGN_STYLE[design], marker="o", ms=3)
                axes[1].plot(xs, [p[2] for p in pts],
                             color=_METHOD_COLOR[method], linestyle=_DESIGN_STYLE[design], marker="o", ms=3)
            for ax, sym in zip(axes, ("slope below changepoint", "added slope above")):
                ax.set_xlabel("changepoint quantile")
                ax.set_title(sym, fontsize=10)
                ax.grid(True, alpha=0.3)
            axes[0].set_ylabel(label)
            if name == "coverage":
                for ax in axes:
                    ax.axhline(0.95, color="gray", lw=0.8, ls=":")
            fig.suptitle(f"{disease}, corr={rho}", fontsize=11)
            fig.legend(loc="center right", fontsize=7)
            fig.tight_layout(rect=(0, 0, 0.86, 1))
            out = fig_dir / f"{disease}_rho{rho}_{name}.png"
            fig.savefig(out, dpi=120)
            plt.close(fig)
            written.append(out)
        fig, ax = plt.subplots(figsize=(5.4, 3.6))
        for method, design in combos:
            pts = sorted(
                (float(r["tau_quantile"]), float(r["pctgud"]))
                for r in sub
                if r["method"] == method and r["design"] == design
            )
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"{method}/{design}",
                        color=_METHOD_COLOR[method], linestyle=_DESIGN_STYLE[design], marker="o", ms=3)
        ax.set_xlabel("changepoint quantile")
        ax.set_ylabel("converged fraction")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=7)
        fig.suptitle(f"{disease}, corr={rho}", fontsize=11)
        fig.tight_layout()
        out = fig_dir / f"{disease}_rho{rho}_pctgud.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    return written
