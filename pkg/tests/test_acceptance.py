"""Acceptance criteria 1-8.

Each test prints (and records for the terminal summary) one line
``CRITERION k: PASS|FAIL`` listing every sub-check, then asserts all of them.
Large-n single-replicate checks use the package's default base seed (1);
Monte Carlo experiments use seed = experiment id.
"""

import os
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE_LINES, small_dataset
from proxmed.bridges import eval_h0, eval_h1, eval_q0, eval_q1, grad_params
from proxmed.estimators import (
    METHODS,
    RCTNuisance,
    fit_bridges,
    fit_dr_bridges,
    fit_eta0,
    fit_q1_rct,
    mr_combine,
    propensity_control,
    psi_summand,
    rct_summand,
)
from proxmed.inference import BootstrapConfig, bootstrap_se, sandwich_se, theta_pipeline
from proxmed.oracle import psi_from_counterfactuals, random_law, solve_bridges_discrete
from proxmed.simulation import DgpConfig, ExperimentSpec, closed_form_truth, generate, run_experiment
from proxmed.solvers import Designs, SolverError, gamma0_system, gamma1_system

SEED = 1
THREADS = os.cpu_count() or 1


def verdict(k, checks):
    """checks: list of (label, ok). Records and prints the criterion line, returns failures."""
    bad = [label for label, ok in checks if not ok]
    status = "PASS" if not bad else "FAIL"
    line = f"CRITERION {k}: {status}  " + "; ".join(f"{label} [{'ok' if ok else 'FAIL'}]" for label, ok in checks)
    ACCEPTANCE_LINES.append(line)
    print(line)
    return bad


def within(v, lo, hi):
    return lo <= v <= hi


# --- 1 ------------------------------------------------------------------------


def test_criterion_1_discrete_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(200):
        law = random_law(SEED * 1_000_003 + k)
        res = solve_bridges_discrete(law)
        worst = max(worst, res.max_error, abs(psi_from_counterfactuals(law) - res.psi_true))
    elapsed = time.perf_counter() - t0
    bad = verdict(1, [(f"200 laws, worst |error| {worst:.2e} <= 1e-10", worst <= 1e-10),
                      (f"runtime {elapsed:.1f}s < 10s", elapsed < 10)])
    assert not bad


# --- 2 ------------------------------------------------------------------------


def _moments(fb):
    ds, p = fb.designs, fb.params
    a = ds.a
    h1 = ds.h1(p.beta1)
    out = {
        "h1": ds.c1.T @ (a * (ds.y - h1)) / ds.n,
        "h0": ds.c0.T @ ((1 - a) * (h1 - ds.h0(p.beta0))) / ds.n,
        "q0": gamma0_system(ds).residual(p.gamma0),
        "q1": gamma1_system(ds, p.gamma0).residual(p.gamma1),
    }
    return {k: float(np.max(np.abs(v))) for k, v in out.items()}


def _gradient_worst():
    rng = np.random.default_rng(SEED)
    dims = {"h1": 5, "h0": 4, "q0": 4, "q1": 5}
    worst = 0.0
    for _ in range(100):
        pt = {"w": rng.normal(size=1), "z": rng.normal(size=1), "m": float(rng.normal()), "x": rng.normal(size=2)}
        for tag, d in dims.items():
            params, g0 = rng.normal(scale=0.7, size=d), rng.normal(scale=0.7, size=4)

            def f(b):
                if tag == "h1":
                    return eval_h1(b, pt["w"], pt["m"], pt["x"])
                if tag == "h0":
                    return eval_h0(b, pt["w"], pt["x"])
                if tag == "q0":
                    return eval_q0(b, pt["z"], pt["x"])
                return eval_q1(b, g0, pt["z"], pt["m"], pt["x"])

            ana = np.ravel(grad_params(tag, params, pt, gamma0=g0))
            eye = np.eye(d) * 1e-6
            num = np.array([(f(params + e) - f(params - e)) / 2e-6 for e in eye]).ravel()
            worst = max(worst, np.max(np.abs(ana - num)) / max(1.0, np.max(np.abs(ana))))
    return worst


def test_criterion_2_moment_residuals():
    t0 = time.perf_counter()
    worst, fitted, failed = 0.0, 0, 0
    for s in range(20):
        data, _ = generate(DgpConfig(), 2000, s)
        try:
            fb = fit_bridges(data)
        except SolverError:
            failed += 1
            continue
        fitted += 1
        worst = max(worst, *_moments(fb).values())
    grad = _gradient_worst()
    elapsed = time.perf_counter() - t0
    bad = verdict(2, [(f"{fitted} converged fits ({failed} failed), moment sup-norm {worst:.1e} <= 1e-8",
                       worst <= 1e-8 and fitted > 0),
                      (f"gradient rel. error {grad:.1e} <= 1e-5 on 100 points", grad <= 1e-5),
                      (f"runtime {elapsed:.1f}s < 30s", elapsed < 30)])
    assert not bad


# --- 3 ------------------------------------------------------------------------


def test_criterion_3_large_n(big):
    t0 = time.perf_counter()
    fb = fit_bridges(big)
    d0 = float(fit_dr_bridges(big, 0).summand().mean())
    checks = []
    for meth in METHODS:
        psi = float(psi_summand(meth, fb).mean())
        checks.append((f"{meth} psi {psi:.4f}", abs(psi - 4.05) <= 0.05))
    checks.append((f"delta(0) {d0:.4f}", abs(d0 - 2.05) <= 0.05))
    nde = float(psi_summand("P-MR", fb).mean()) - d0
    checks.append((f"P-MR NDE(0) {nde:.4f}", abs(nde - 2.0) <= 0.05))
    elapsed = time.perf_counter() - t0
    checks.append((f"runtime {elapsed:.1f}s < 60s", elapsed < 60))
    assert not verdict(3, checks)


# --- 4 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def table1():
    t0 = time.perf_counter()
    reports = {i: run_experiment(ExperimentSpec.for_id(i, n=2000, reps=500, seed=i, threads=THREADS))
               for i in (1, 2, 3, 4)}
    return reports, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_4_table1(table1):
    reports, elapsed = table1
    r1, r2, r3, r4 = (reports[i] for i in (1, 2, 3, 4))
    checks = []
    for meth in METHODS:
        row = r1.row(meth)
        checks.append((f"E1 {meth} bias {row.bias:+.3f}", abs(row.bias) <= 0.03))
        checks.append((f"E1 {meth} cov {row.coverage:.3f}", within(row.coverage, 0.92, 0.97)))
    mr1 = r1.row("P-MR")
    checks.append((f"E1 P-MR length {mr1.mean_length:.3f}", within(mr1.mean_length, 0.45, 0.55)))
    ipw2, mr2 = r2.row("P-IPW"), r2.row("P-MR")
    checks += [(f"E2 P-IPW bias {ipw2.bias:+.3f}", within(ipw2.bias, 0.13, 0.25)),
               (f"E2 P-IPW cov {ipw2.coverage:.3f}", ipw2.coverage <= 0.78),
               (f"E2 P-MR bias {mr2.bias:+.3f}", abs(mr2.bias) <= 0.03),
               (f"E2 P-MR cov {mr2.coverage:.3f}", within(mr2.coverage, 0.92, 0.97))]
    or3, mr3 = r3.row("P-OR"), r3.row("P-MR")
    checks += [(f"E3 P-OR bias {or3.bias:+.3f}", within(or3.bias, -0.22, -0.09)),
               (f"E3 P-OR cov {or3.coverage:.3f}", or3.coverage <= 0.88),
               (f"E3 P-MR bias {mr3.bias:+.3f}", abs(mr3.bias) <= 0.03)]
    hy4, mr4 = r4.row("P-hybrid"), r4.row("P-MR")
    checks += [(f"E4 P-hybrid bias {hy4.bias:+.3f}", within(hy4.bias, 0.13, 0.26)),
               (f"E4 P-MR bias {mr4.bias:+.3f}", abs(mr4.bias) <= 0.03)]
    ols = r1.row("OLS")
    checks += [(f"OLS bias {ols.bias:+.3f}", within(ols.bias, 0.45, 0.55)),
               (f"OLS cov {ols.coverage:.3f}", ols.coverage <= 0.40)]
    failed = sum(r.n_failed for r in reports.values())
    checks.append((f"{failed} failed reps of 2000, runtime {elapsed:.0f}s on {THREADS} core(s)", True))
    assert not verdict(4, checks)


# --- 5 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def table2():
    return {i: run_experiment(ExperimentSpec.for_id(i, n=2000, reps=300, seed=i, threads=THREADS))
            for i in (5, 6, 8, 9)}


@pytest.mark.slow
def test_criterion_5_table2(table2):
    r5, r6 = table2[5], table2[6]
    checks = []
    ols5 = r5.row("OLS")
    for meth in METHODS:
        row = r5.row(meth)
        checks.append((f"E5 {meth} bias {row.bias:+.3f}", abs(row.bias) <= 0.03))
        checks.append((f"E5 {meth} length {row.mean_length:.3f} > OLS {ols5.mean_length:.3f}",
                       row.mean_length > ols5.mean_length))
    checks.append((f"E5 OLS bias {ols5.bias:+.3f}", abs(ols5.bias) <= 0.03))
    for meth in METHODS:
        row = r6.row(meth)
        checks.append((f"E6 {meth} bias {row.bias:+.3f}", within(row.bias, 0.35, 0.45)))
        checks.append((f"E6 {meth} cov {row.coverage:.3f}", row.coverage <= 0.10))
    for i in (8, 9):
        rep = table2[i]
        mr, ipw, hy = rep.row("P-MR"), rep.row("P-IPW"), rep.row("P-hybrid")
        # with the default instruments P-MR and P-IPW coincide at the exact moment
        # root; differences at the solver tolerance do not count as "strictly smaller"
        checks += [(f"E{i} MSE MR {mr.mse:.3f} < IPW {ipw.mse:.3f} (diff {mr.mse - ipw.mse:.1e})",
                    mr.mse < ipw.mse * (1 - 1e-6)),
                   (f"E{i} MSE MR {mr.mse:.3f} < hybrid {hy.mse:.3f}", mr.mse < hy.mse),
                   (f"E{i} weak-proxy reps {rep.n_weak}/{rep.spec.reps}", rep.n_weak >= 0.5 * rep.spec.reps),
                   (f"E{i} P-MR median bias {mr.median_bias:+.3f}", abs(mr.median_bias) <= 0.08)]
    assert not verdict(5, checks)


# --- 6 ------------------------------------------------------------------------


_collapse_worst = {"mr_or": 0.0, "telescope": 0.0}


@settings(max_examples=30)
@given(st.integers(0, 100_000))
def test_criterion_6_collapse_property(seed):
    data = small_dataset(seed, n=400)
    try:
        fb = fit_bridges(data)
        dr0, dr1 = fit_dr_bridges(data, 0), fit_dr_bridges(data, 1)
    except SolverError:
        return
    ds, p = fb.designs, fb.params
    h1, h0 = ds.h1(p.beta1), ds.h0(p.beta0)
    zero = np.zeros(data.n)
    collapsed = mr_combine(ds.a, ds.y, h1, h0, zero, zero).mean()
    assert collapsed == psi_summand("P-OR", fb).mean()
    d0, d1 = dr0.summand().mean(), dr1.summand().mean()
    for meth in METHODS:
        psi = psi_summand(meth, fb).mean()
        gap = abs(((psi - d0) + (d1 - psi)) - (d1 - d0))
        _collapse_worst["telescope"] = max(_collapse_worst["telescope"], gap)
        assert gap <= 1e-12


def test_criterion_6_collapse(sim7):
    fb = fit_bridges(sim7)
    ds, p = fb.designs, fb.params
    zero = np.zeros(sim7.n)
    mr0 = mr_combine(ds.a, ds.y, ds.h1(p.beta1), ds.h0(p.beta0), zero, zero).mean()
    por = psi_summand("P-OR", fb).mean()
    d0, d1 = fit_dr_bridges(sim7, 0).summand().mean(), fit_dr_bridges(sim7, 1).summand().mean()
    gaps = [abs(((psi_summand(m, fb).mean() - d0) + (d1 - psi_summand(m, fb).mean())) - (d1 - d0)) for m in METHODS]
    worst = max(max(gaps), _collapse_worst["telescope"])
    assert not verdict(6, [(f"P-MR with q zeroed == P-OR (diff {abs(mr0 - por):.1e})", mr0 == por),
                           (f"NDE(0)+NIE(1) == total, worst gap {worst:.1e}", worst <= 1e-12)])


# --- 7 ------------------------------------------------------------------------


def test_criterion_7_rct_double_robustness():
    t0 = time.perf_counter()
    cfg = DgpConfig().randomized()
    data, _ = generate(cfg, 100_000, SEED)
    truth = closed_form_truth(cfg).psi
    fb = fit_bridges(data, bridges=("h1",))
    beta1, eta0, gamma1 = fb.params.beta1, fit_eta0(data, fb), fit_q1_rct(data, fb.spec)[0]
    p0 = propensity_control(data, 0.5)
    bad_q = RCTNuisance(beta1, eta0, gamma1 + 0.5, p0)
    bad_h = RCTNuisance(beta1 + 0.5, eta0 + 0.5, gamma1, p0)
    psi_a = float(rct_summand("MR", data, fb.spec, bad_q).mean())
    psi_b = float(rct_summand("MR", data, fb.spec, bad_h).mean())
    elapsed = time.perf_counter() - t0
    assert not verdict(7, [(f"(a) q1 corrupted: {psi_a:.4f} vs {truth:.2f}", abs(psi_a - truth) <= 0.05),
                           (f"(b) h1/eta0 corrupted: {psi_b:.4f} vs {truth:.2f}", abs(psi_b - truth) <= 0.05),
                           (f"runtime {elapsed:.1f}s < 120s", elapsed < 120)])


# --- 8 ------------------------------------------------------------------------


def test_criterion_8_inference_agreement():
    data, _ = generate(ExperimentSpec.for_id(1, reps=1).config(), 2000, SEED, 0)
    fb = fit_bridges(data)
    se_sw, _ = sandwich_se(data, fb, "P-MR", fit_dr_bridges(data, 0))
    pipe = theta_pipeline("P-MR")
    boot = bootstrap_se(data, pipe, BootstrapConfig(B=200, seed=SEED))
    again = bootstrap_se(data, pipe, BootstrapConfig(B=200, seed=SEED))
    par = bootstrap_se(data, pipe, BootstrapConfig(B=200, seed=SEED, threads=max(2, THREADS)))
    rel = abs(se_sw - boot.se) / boot.se
    same = np.array_equal(boot.replicates, again.replicates) and np.array_equal(boot.replicates, par.replicates)
    assert not verdict(8, [(f"sandwich {se_sw:.4f} vs bootstrap {boot.se:.4f} (rel {rel:.3f} <= 0.15)", rel <= 0.15),
                           ("bootstrap identical across reruns and thread counts", same)])
