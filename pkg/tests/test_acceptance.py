"""End-to-end acceptance gate.

Each test prints one PASS/FAIL line.  Reference values come from the
replication study this package reproduces; desk scale is 200 replications
(1000 in the original), so the stated Monte Carlo tolerances apply.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from segcox import (
    NuisanceParams,
    PosteriorMoments,
    ScenarioConfig,
    ThetaParams,
    build_analysis_dataset,
    calibrate_baseline_hazard,
    expected_hinge,
    generate_cohort,
    generate_validation,
    induced_rr,
    induced_rr_loggrad,
    posterior_moments,
    run_grid,
    score_and_info,
    solve_nuisance,
    substream,
)
from segcox.cli import cmd_simulate

from conftest import BETA, OMEGA, make_scenario

pytestmark = pytest.mark.acceptance

ROOT_SEED = 20260810
REPS = 200
WORKERS = 2


def _report(num: str, ok: bool, detail: str) -> bool:
    print(f"\n[AC{num}] {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


def _cell(method, design, rho, tau_q, **kw):
    return make_scenario(
        method=method,
        design=design,
        rho_xw=rho,
        tau_quantile=tau_q,
        replications=REPS,
        seed=ROOT_SEED,
        **kw,
    )


@pytest.fixture(scope="module")
def paper_cells():
    """Summaries for the common-disease reference cells, computed once."""
    specs = {
        "rc1_ev": _cell("RC1", "EV_X", 0.8, 0.5),
        "rc2_ev": _cell("RC2", "EV_X", 0.8, 0.5),
        "rr1_ev": _cell("RR1", "EV_X", 0.8, 0.5),
        "rc1_iv": _cell("RC1", "IV_X", 0.8, 0.5),
        "rc1_ev_rho04_tq01": _cell("RC1", "EV_X", 0.4, 0.1),
        "rc1_ev_rho08_tq01": _cell("RC1", "EV_X", 0.8, 0.1),
    }
    t0 = time.time()
    entries = run_grid(specs.values(), workers=WORKERS)
    elapsed = time.time() - t0
    out = {}
    for name, entry in zip(specs, entries):
        assert entry.error is None, f"{name} failed: {entry.error}"
        out[name] = entry.summary
    out["elapsed"] = elapsed
    return out


def test_ac1_bias_reproduction(paper_cells):
    s = paper_cells["rc1_ev"]
    ok_b = abs(s.rel_bias_beta - 0.275) <= 0.06
    ok_o = abs(s.rel_bias_omega - (-0.453)) <= 0.06
    ok = ok_b and ok_o
    assert _report(
        "1",
        ok,
        f"RC1/EV_X rel bias beta={s.rel_bias_beta:.3f} (ref 0.275+-0.06), "
        f"omega={s.rel_bias_omega:.3f} (ref -0.453+-0.06); "
        f"6-cell grid ran in {paper_cells['elapsed']:.0f}s on {WORKERS} workers",
    )


def test_ac2_method_ordering(paper_cells):
    b_rc1 = paper_cells["rc1_ev"].rel_bias_beta
    b_rc2 = paper_cells["rc2_ev"].rel_bias_beta
    b_rr1 = paper_cells["rr1_ev"].rel_bias_beta
    ordered = abs(b_rr1) < abs(b_rc2) < abs(b_rc1)
    rr1_close = abs(b_rr1 - (-0.054)) <= 0.05
    ok = ordered and rr1_close
    assert _report(
        "2",
        ok,
        f"|beta bias| RR1={abs(b_rr1):.3f} < RC2={abs(b_rc2):.3f} < RC1={abs(b_rc1):.3f} "
        f"(refs 0.054, 0.113, 0.275); RR1 within +-0.05 of -0.054: {rr1_close}",
    )


def test_ac3_design_effect_on_mse(paper_cells):
    mse_ev = paper_cells["rc1_ev"].mse_beta
    mse_iv = paper_cells["rc1_iv"].mse_beta
    ineq = mse_iv <= mse_ev
    ok = (
        ineq
        and abs(mse_iv - 0.015) <= 0.4 * 0.015
        and abs(mse_ev - 0.019) <= 0.4 * 0.019
    )
    assert _report(
        "3",
        ok,
        f"RC1 beta MSE: IV_X={mse_iv:.4f} <= EV_X={mse_ev:.4f} "
        f"(refs 0.015 vs 0.019, +-40% each)",
    )


def test_ac4_coverage(paper_cells):
    cov_rc2 = paper_cells["rc2_ev"].coverage_beta
    cov_rr1 = paper_cells["rr1_ev"].coverage_beta
    ok = abs(cov_rc2 - 0.918) <= 0.05 and abs(cov_rr1 - 0.948) <= 0.05
    assert _report(
        "4",
        ok,
        f"beta coverage RC2/EV_X={cov_rc2:.3f} (ref 0.918+-0.05), "
        f"RR1/EV_X={cov_rr1:.3f} (ref 0.948+-0.05)",
    )


def test_ac5_convergence_degradation(paper_cells):
    bad = paper_cells["rc1_ev_rho04_tq01"].pctgud
    good = paper_cells["rc1_ev_rho08_tq01"].pctgud
    ok = bad < 0.5 and good > 0.95
    assert _report(
        "5",
        ok,
        f"pctgud rho=0.4,tq=0.1: {bad:.3f} (<0.5 required, ref 0.146); "
        f"rho=0.8 analogue: {good:.3f} (>0.95 required)",
    )


def test_ac6_calibration_monte_carlo_oracles():
    rng = np.random.default_rng(606)
    n_draw = 10**7
    worst = {"pm": 0.0, "hinge": 0.0, "rr": 0.0}
    for _ in range(12):
        mu = rng.normal(0.0, 0.5)
        s2x = rng.uniform(0.5, 2.0)
        s2u = rng.uniform(0.1, 2.0)
        k = int(rng.integers(1, 4))
        phi = NuisanceParams(mu, s2x, s2u)
        w0 = rng.normal(mu, 1.2)

        # conditional moments against a simulated-pairs regression
        x = mu + np.sqrt(s2x) * rng.standard_normal(n_draw)
        wbar = x + rng.normal(0.0, np.sqrt(s2u / k), n_draw)
        slope, intercept = np.polyfit(wbar, x, 1)
        resid = x - (intercept + slope * wbar)
        s2 = resid.var()
        sxx = np.sum((wbar - wbar.mean()) ** 2)
        pred_se = np.sqrt(s2 * (1.0 / n_draw + (w0 - wbar.mean()) ** 2 / sxx))
        v_se = s2 * np.sqrt(2.0 / n_draw)
        pm = posterior_moments(w0, k, phi)
        worst["pm"] = max(
            worst["pm"],
            abs(pm.m - (intercept + slope * w0)) / (3 * pred_se),
            abs(pm.v - s2) / (3 * v_se),
        )

        # hinge expectation and induced risk against direct draws
        m0 = rng.normal(0.0, 1.0)
        v0 = rng.uniform(0.05, 1.5)
        tau = rng.normal(0.0, 1.0)
        beta = rng.normal(0.0, 0.7)
        omega = rng.normal(0.0, 0.7)
        draws = m0 + np.sqrt(v0) * rng.standard_normal(n_draw)
        hv = np.maximum(draws - tau, 0.0)
        mc, se = hv.mean(), hv.std(ddof=1) / np.sqrt(n_draw)
        worst["hinge"] = max(
            worst["hinge"], abs(expected_hinge(PosteriorMoments(m0, v0), tau) - mc) / (3 * se)
        )
        rr = np.exp(beta * draws + omega * hv)
        mc, se = rr.mean(), rr.std(ddof=1) / np.sqrt(n_draw)
        theta = ThetaParams(np.empty(0), beta, omega, tau)
        worst["rr"] = max(
            worst["rr"], abs(induced_rr(theta, PosteriorMoments(m0, v0)) - mc) / (3 * se)
        )
    ok = all(v <= 1.0 for v in worst.values())
    assert _report(
        "6",
        ok,
        "12 random points, 1e7-draw oracles; worst |err|/(3se): "
        f"moments={worst['pm']:.2f}, hinge={worst['hinge']:.2f}, risk={worst['rr']:.2f}",
    )


def test_ac7_derivative_checks():
    sc = make_scenario(n=300, m_valid=150)
    lam0 = calibrate_baseline_hazard(sc)
    cohort = generate_cohort(sc, lam0, substream(sc.seed, 60, 0))
    validation = generate_validation(sc, cohort, substream(sc.seed, 60, 1))
    phi = solve_nuisance(validation).phi
    theta0 = ThetaParams(np.empty(0), 0.0, 0.0, sc.tau)
    rng = np.random.default_rng(707)
    worst_info = 0.0
    for method in ("RC1", "RC2", "RR1"):
        ds = build_analysis_dataset(cohort, validation, phi, theta0, method, "EV_X")
        for _ in range(10):
            vec = rng.normal(0.0, 0.4, 2)
            _, info = score_and_info(ThetaParams.from_array(vec, sc.tau), ds)
            h = 1e-6
            fd = np.zeros((2, 2))
            for j in range(2):
                up, dn = vec.copy(), vec.copy()
                up[j] += h
                dn[j] -= h
                u_up, _ = score_and_info(ThetaParams.from_array(up, sc.tau), ds)
                u_dn, _ = score_and_info(ThetaParams.from_array(dn, sc.tau), ds)
                fd[:, j] = -(u_up - u_dn) / (2 * h)
            worst_info = max(worst_info, np.abs(info - fd).max() / max(1.0, np.abs(info).max()))

    worst_grad = 0.0
    for _ in range(12):
        theta = ThetaParams(np.empty(0), rng.normal(0, 0.7), rng.normal(0, 0.7), rng.normal())
        pm = PosteriorMoments(rng.normal(0, 1), rng.uniform(0.05, 1.5))
        grad = induced_rr_loggrad(theta, pm)
        h = 1e-6
        for j, (db, do) in enumerate(((h, 0.0), (0.0, h))):
            up = ThetaParams(np.empty(0), theta.beta + db, theta.omega + do, theta.tau)
            dn = ThetaParams(np.empty(0), theta.beta - db, theta.omega - do, theta.tau)
            fd = (np.log(induced_rr(up, pm)) - np.log(induced_rr(dn, pm))) / (2 * h)
            denom = max(1.0, abs(fd))
            worst_grad = max(worst_grad, abs(grad[j] - fd) / denom)
    ok = worst_info <= 1e-5 and worst_grad <= 1e-6
    assert _report(
        "7",
        ok,
        f"info vs score FD rel err {worst_info:.2e} (<=1e-5); "
        f"induced-risk log-gradient rel err {worst_grad:.2e} (<=1e-6)",
    )


def test_ac8_sandwich_validity_error_free():
    sc = make_scenario(n=100000, rho_xw=1.0, replications=300, seed=ROOT_SEED + 8)
    entries = run_grid([sc], workers=WORKERS)
    assert entries[0].error is None
    reps = [r for r in entries[0].replications if r.converged]
    est = np.array([r.theta_hat.as_array() for r in reps])
    emp = est.var(axis=0, ddof=1)
    mean_omega = np.array([[r.se_beta**2, r.se_omega**2] for r in reps]).mean(axis=0)
    rel = np.abs(mean_omega / emp - 1.0)
    ok = len(reps) >= 295 and np.all(rel <= 0.15)
    assert _report(
        "8",
        ok,
        f"n=1e5, {len(reps)}/300 converged; |mean(Omega)/empirical var - 1| = "
        f"(beta {rel[0]:.3f}, omega {rel[1]:.3f}) <= 0.15",
    )


def test_ac9_nuisance_consistency_and_sandwich():
    designs = ("EV_X", "IV_X", "EV_RM", "IV_RM")
    sizes = (500, 2000, 8000)
    truth = np.array([0.0, 1.0, 0.5625])
    scaling_ok, lines = True, []
    for d_idx, design in enumerate(designs):
        mae = {}
        for m in sizes:
            sc = make_scenario(design=design, method="RC1", n=8000, m_valid=m, seed=909)
            lam0 = 0.05  # nuisance estimation never touches the hazard scale
            errors = []
            for i in range(500):
                cohort = generate_cohort(sc, lam0, substream(909, d_idx, m, i, 0))
                sample = generate_validation(sc, cohort, substream(909, d_idx, m, i, 1))
                est = solve_nuisance(sample)
                errors.append(np.abs(est.phi.as_array() - truth))
            mae[m] = np.median(errors, axis=0)
        decreasing = np.all(mae[500] > mae[2000]) and np.all(mae[2000] > mae[8000])
        ideal = mae[500] / 4.0
        within = np.all(mae[8000] >= ideal / 2.0) and np.all(mae[8000] <= ideal * 2.0)
        scaling_ok = scaling_ok and decreasing and within
        lines.append(f"{design} ratio {np.max(mae[500] / mae[8000]):.1f}x over 16x m")

    cov_ok = True
    for design in designs:
        sc = make_scenario(design=design, method="RC1", n=2000, m_valid=500, seed=911)
        lam0 = 0.05
        ests, diags = [], []
        for i in range(1000):
            cohort = generate_cohort(sc, lam0, substream(911, i, 0))
            sample = generate_validation(sc, cohort, substream(911, i, 1))
            est = solve_nuisance(sample)
            ests.append(est.phi.as_array())
            diags.append(np.diag(est.cov_phi))
        emp = np.var(ests, axis=0, ddof=1)
        rel = np.abs(np.mean(diags, axis=0) / emp - 1.0)
        cov_ok = cov_ok and np.all(rel <= 0.15)
        lines.append(f"{design} cov rel err {rel.max():.3f}")
    ok = scaling_ok and cov_ok
    assert _report("9", ok, "m^-1/2 scaling and sandwich diagonals: " + "; ".join(lines))


def test_ac10_byte_determinism(tmp_path):
    doc = {
        "seed": 4242,
        "scenarios": [
            {
                "disease": "common",
                "n": 600,
                "incidence": 0.5,
                "beta": BETA,
                "omega": OMEGA,
                "rho": 0.8,
                "tau_quantile": [0.25, 0.5],
                "method": ["RC1", "RC2"],
                "design": "EV_X",
                "m_valid": 200,
                "replications": 10,
            }
        ],
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    digests = []
    for run, workers in (("a", 1), ("b", 2), ("c", 2)):
        out = tmp_path / run
        assert cmd_simulate(cfg, out, workers=workers, figures=True, dump_reps=True) == 0
        payload = b""
        for path in sorted(out.rglob("*")):
            if path.is_file() and path.name != "manifest.json":
                payload += path.relative_to(out).as_posix().encode() + path.read_bytes()
        digests.append(payload)
    ok = digests[0] == digests[1] == digests[2]
    assert _report(
        "10",
        ok,
        "summary, dumps, resolved config and figures byte-identical across "
        "worker counts 1/2/2 (manifest carries timestamps by design)",
    )


def test_error_free_coverage_band():
    # supporting invariant: nominal coverage for a correctly specified fit
    sc = make_scenario(rho_xw=1.0, replications=500, seed=ROOT_SEED + 5)
    entries = run_grid([sc], workers=WORKERS)
    assert entries[0].error is None
    s = entries[0].summary
    ok = 0.92 <= s.coverage_beta <= 0.975 and 0.92 <= s.coverage_omega <= 0.975
    assert _report(
        "-coverage-band",
        ok,
        f"error-free 95% CI coverage over 500 reps: beta={s.coverage_beta:.3f}, "
        f"omega={s.coverage_omega:.3f} in [0.92, 0.975]",
    )
