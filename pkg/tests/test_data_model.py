import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proxmed.data import (
    ColumnSchema,
    DataError,
    FeatureMap,
    MediationDataset,
    build_features,
    load_csv,
    validate,
    write_csv,
)
from proxmed.simulation import DgpConfig, generate


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_smallest_valid_file(tmp_path):
    f = _write(tmp_path / "d.csv", "y,a,m,x1,z1,w1\n1,0,2,3,4,5\n2,1,3,4,5,6\n3,0,1,1,1,1\n4,1,0,0,0,0\n")
    d = load_csv(f)
    assert d.n == 4 and d.p_x == d.p_z == d.p_w == 1
    assert d.a.tolist() == [0, 1, 0, 1]


def test_columns_normalized_to_role_order(tmp_path):
    f = _write(tmp_path / "d.csv", "w1,z1,x1,m,a,y\n5,4,3,2,0,1\n6,5,4,3,1,2\n")
    d = load_csv(f)
    assert d.columns == ["y", "a", "m", "x1", "z1", "w1"]
    assert d.matrix()[0].tolist() == [1, 0, 2, 3, 4, 5]


def test_non_binary_treatment(tmp_path):
    f = _write(tmp_path / "d.csv", "y,a,m,x1,z1,w1\n1,2,2,3,4,5\n2,1,3,4,5,6\n")
    with pytest.raises(DataError, match="treatment not binary"):
        load_csv(f)


def test_missing_column(tmp_path):
    f = _write(tmp_path / "d.csv", "y,a,m,z1,w1\n1,0,2,4,5\n")
    schema = ColumnSchema({"y": "outcome", "a": "treatment", "m": "mediator", "x1": "covariate",
                           "z1": "treatment_proxy", "w1": "outcome_proxy"})
    with pytest.raises(DataError, match="missing column"):
        load_csv(f, schema)


def test_non_numeric_cell(tmp_path):
    f = _write(tmp_path / "d.csv", "y,a,m,x1,z1,w1\n1,0,abc,3,4,5\n")
    with pytest.raises(DataError, match="non-numeric cell in column 'm'"):
        load_csv(f)


def test_empty_file(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_csv(_write(tmp_path / "d.csv", ""))
    with pytest.raises(DataError, match="no data rows"):
        load_csv(_write(tmp_path / "e.csv", "y,a,m,x1,z1,w1\n"))


def test_schema_sidecar_and_custom_names(tmp_path):
    f = _write(tmp_path / "d.csv", "out,trt,med,age,neg_exp,neg_out\n1,0,2,3,4,5\n2,1,3,4,5,6\n")
    schema = ColumnSchema({"out": "outcome", "trt": "treatment", "med": "mediator", "age": "covariate",
                           "neg_exp": "treatment_proxy", "neg_out": "outcome_proxy"})
    schema.to_json(tmp_path / "s.json")
    d = load_csv(f, ColumnSchema.from_json(tmp_path / "s.json"))
    assert d.y_name == "out" and d.z_names == ("neg_exp",)
    with pytest.raises(DataError, match="cannot infer"):
        load_csv(f)


def test_schema_invariants():
    with pytest.raises(DataError, match="exactly one mediator"):
        ColumnSchema({"y": "outcome", "a": "treatment", "m1": "mediator", "m2": "mediator",
                      "z": "treatment_proxy", "w": "outcome_proxy"})
    with pytest.raises(DataError, match="treatment_proxy"):
        ColumnSchema({"y": "outcome", "a": "treatment", "m": "mediator", "w": "outcome_proxy"})
    with pytest.raises(DataError, match="unknown role"):
        ColumnSchema({"y": "instrument"})


def test_round_trip_bit_identical(tmp_path):
    data, _ = generate(DgpConfig(), 100, 1)
    write_csv(data, tmp_path / "sim.csv")
    back = load_csv(tmp_path / "sim.csv")
    assert np.array_equal(back.matrix(), data.matrix())
    assert back.columns == data.columns


def _toy(n=40, seed=0):
    g = np.random.default_rng(seed)
    a = np.tile([0.0, 1.0], n // 2)
    return MediationDataset(g.normal(size=n), a, g.normal(size=n), g.normal(size=(n, 2)),
                            g.normal(size=(n, 1)), g.normal(size=(n, 1)))


def test_validate_control_arm_absent():
    d = _toy()
    d = MediationDataset(d.y, np.ones(d.n), d.m, d.x, d.z, d.w)
    rep = validate(d)
    assert not rep.ok and "control arm absent" in rep.failures
    assert rep.n_control == 0


def test_validate_non_finite():
    d = _toy()
    w = d.w.copy()
    w[3, 0] = np.nan
    rep = validate(MediationDataset(d.y, d.a, d.m, d.x, d.z, w))
    assert "non-finite entry" in rep.failures
    with pytest.raises(DataError):
        rep.raise_if_failed()


def test_validate_small_arm():
    d = _toy(n=20)
    rep = validate(d)
    assert any("need at least" in f for f in rep.failures)


def test_validate_simulated_passes(sim7):
    rep = validate(sim7)
    assert rep.ok and all(rep.checks.values())
    assert rep.n_treated + rep.n_control == 2000


def test_dataset_is_read_only(sim7):
    with pytest.raises(ValueError):
        sim7.y[0] = 1.0


def test_row_count_mismatch():
    with pytest.raises(DataError, match="rows"):
        MediationDataset(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((3, 1)))


def test_feature_map_examples():
    fm = FeatureMap.sqrt_abs(2)
    assert fm.apply(np.array([-4.0, 9.0])).tolist() == [2.0, 3.0]
    assert fm.apply(np.array([0.0, -0.0])).tolist() == [0.0, 0.0]
    with pytest.raises(DataError):
        FeatureMap(("log",))
    with pytest.raises(DataError, match="covers"):
        fm.apply(np.zeros((3, 1)))


def test_identity_features_exact():
    d = _toy()
    out = build_features(d, FeatureMap.identity(2))
    assert np.array_equal(out.matrix(), d.matrix())


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2), st.integers(0, 2**31))
def test_build_features_properties(x_row, seed):
    d = _toy(seed=seed)
    x = d.x.copy()
    x[0] = x_row
    d = MediationDataset(d.y, d.a, d.m, x, d.z, d.w)
    perm = np.random.default_rng(seed).permutation(d.n)
    for fm in (FeatureMap.identity(2), FeatureMap(("sqrt_abs", "identity"))):
        out = build_features(d, fm)
        assert out.x.shape == d.x.shape
        # y, a, m, z, w untouched
        assert np.array_equal(out.matrix()[:, [0, 1, 2, 5, 6]], d.matrix()[:, [0, 1, 2, 5, 6]])
        # commutes with row permutation
        assert np.array_equal(build_features(d.take(perm), fm).x, out.x[perm])
    ident = build_features(build_features(d, FeatureMap.identity(2)), FeatureMap.identity(2))
    assert np.array_equal(ident.x, d.x)


@given(st.integers(0, 2**31), st.integers(2, 30))
def test_csv_round_trip_property(seed, n):
    import tempfile
    from pathlib import Path

    g = np.random.default_rng(seed)
    a = np.r_[0.0, 1.0, g.integers(0, 2, n - 2).astype(float)]
    d = MediationDataset(g.normal(size=n) * 1e3, a, g.standard_cauchy(n), g.normal(size=(n, 2)),
                         g.normal(size=(n, 1)), g.normal(size=(n, 1)) * 1e-9)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.csv"
        write_csv(d, path)
        assert np.array_equal(load_csv(path).matrix(), d.matrix())
