import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proxmed.simulation import (
    ESTIMATORS,
    EXPERIMENTS,
    DgpConfig,
    ExperimentSpec,
    closed_form_truth,
    generate,
    oracle_truth,
    run_experiment,
)


def test_generate_is_deterministic():
    cfg = DgpConfig()
    a, ua = generate(cfg, 500, seed=4, rep=2)
    b, ub = generate(cfg, 500, seed=4, rep=2)
    c, _ = generate(cfg, 500, seed=4, rep=3)
    assert np.array_equal(a.y, b.y) and np.array_equal(ua, ub) and np.array_equal(a.z, b.z)
    assert not np.array_equal(a.y, c.y)
    assert a.n == 500 and a.z.shape == (500, 1) and a.x.shape == (500, 2)
    assert set(np.unique(a.a)) <= {0.0, 1.0}


def test_degenerate_config_gives_constants():
    cfg = replace(DgpConfig(), cov=((0.0,) * 3,) * 3, sigma_z=0.0, sigma_w=0.0, sigma_m=0.0, sigma_y=0.0)
    data, u = generate(cfg, 200, seed=0)
    ex = np.array(cfg.mean[:2])
    assert np.all(u == cfg.mean[2]) and np.all(data.x == ex)
    w = cfg.w_0 + ex @ np.array(cfg.w_x) + cfg.w_u * cfg.mean[2]
    assert np.allclose(data.w[:, 0], w)
    m = cfg.m_0 + cfg.m_a * data.a + ex @ np.array(cfg.m_x) + cfg.m_u * cfg.mean[2]
    assert np.allclose(data.m, m)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        DgpConfig(cov=((1.0, 2.0, 0.0), (2.0, 1.0, 0.0), (0.0, 0.0, 1.0)))
    with pytest.raises(ValueError):
        DgpConfig(sigma_y=-1.0)
    cfg = replace(DgpConfig(), y_z=-0.5)
    assert DgpConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_large_sample_moments():
    data, _ = generate(DgpConfig(), 1_000_000, seed=3)
    assert data.w.mean() == pytest.approx(0.4, abs=0.005)
    m0 = data.m - DgpConfig().m_a * data.a
    assert m0.mean() == pytest.approx(-0.25, abs=0.005)
    cf = oracle_truth(DgpConfig(), n_mc=200_000, seed=3)
    assert cf.psi == pytest.approx(4.05, abs=4 * cf.se["psi"])


def test_default_truths():
    t = closed_form_truth(DgpConfig())
    assert t.psi == pytest.approx(4.05, abs=1e-12)
    assert t.ey0 == pytest.approx(2.05, abs=1e-12)
    assert t.ey1 == pytest.approx(3.75, abs=1e-12)
    assert t.nde0 == pytest.approx(2.0, abs=1e-12)
    assert t.nie1 == pytest.approx(-0.3, abs=1e-12)


@pytest.mark.parametrize("exp_id", sorted(EXPERIMENTS))
def test_closed_form_matches_monte_carlo(exp_id):
    cfg = ExperimentSpec.for_id(exp_id, reps=1).config()
    cf = closed_form_truth(cfg)
    mc = oracle_truth(cfg, n_mc=300_000, seed=exp_id)
    for key in ("psi", "ey0", "ey1", "nde0", "nie1"):
        assert getattr(cf, key) == pytest.approx(getattr(mc, key), abs=4 * mc.se[key] + 1e-9), key


def test_exclusion_violation_truths():
    assert closed_form_truth(ExperimentSpec.for_id(6, reps=1).config()).nde0 == pytest.approx(2.0)
    assert closed_form_truth(ExperimentSpec.for_id(7, reps=1).config()).nde0 == pytest.approx(2.4)


def test_randomized_variant():
    rct = DgpConfig().randomized(0.3)
    data, _ = generate(rct, 200_000, seed=1)
    assert data.a.mean() == pytest.approx(0.3, abs=0.005)
    assert rct.z_a == 0.0 and rct.a_u == 0.0


def test_experiment_json_round_trip(tmp_path):
    spec = ExperimentSpec.for_id(3, n=100, reps=7, seed=9)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert ExperimentSpec.from_json(path) == spec
    assert spec.misspecified == ("q1", "h0")
    with pytest.raises(ValueError):
        ExperimentSpec.for_id(10)
    with pytest.raises(ValueError):
        ExperimentSpec.for_id(1, reps=0)


@pytest.fixture(scope="module")
def small_run():
    return run_experiment(ExperimentSpec.for_id(1, n=400, reps=6, seed=2))


def test_run_experiment_shape(small_run, tmp_path):
    rep = small_run
    assert [r.estimator for r in rep.rows] == list(ESTIMATORS)
    assert rep.truth == pytest.approx(2.0)
    for r in rep.rows:
        assert r.n_used == rep.spec.reps - rep.n_failed
        assert 0.0 <= r.coverage <= 1.0
        assert r.mse >= r.bias**2 - 1e-12
        assert r.mean_length > 0
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["truth_nde0"] == rep.truth and len(d["rows"]) == 5
    lines = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert len(lines) == 6 and lines[0].startswith("experiment,estimator")
    assert "P-MR" in rep.table()
    with pytest.raises(KeyError):
        rep.row("nope")


def test_run_experiment_thread_invariant(small_run):
    par = run_experiment(ExperimentSpec.for_id(1, n=400, reps=6, seed=2, threads=2))
    for name in ESTIMATORS:
        assert np.array_equal(par.points[name], small_run.points[name])


def test_flagging_counts_failures():
    rep = run_experiment(ExperimentSpec.for_id(9, n=300, reps=10, seed=9))
    assert rep.flagged == (rep.n_failed > 1)
    assert sum(rep.failures.values()) == rep.n_failed
    assert rep.n_weak == 10


@given(st.integers(0, 10_000), st.integers(1, 50))
def test_generate_sizes(seed, n):
    data, u = generate(DgpConfig(), n, seed)
    assert data.n == n and u.shape == (n,)
    assert np.all(np.isfinite(data.y))
