import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drselect.core import (
    Dataset,
    RunConfig,
    derive_seed,
    load_dataset,
    make_splits,
    truncate_propensity,
)
from drselect.errors import (
    ConfigError,
    ContractError,
    DataValidationError,
    ParseError,
    SchemaError,
    SizingError,
)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_minimal_csv(tmp_path):
    d = load_dataset(write(tmp_path, "y,a,x1\n1.0,1,0.2\n0.5,0,0.9\n"))
    assert (d.n, d.d) == (2, 1)
    np.testing.assert_array_equal(d.y, [1.0, 0.5])
    np.testing.assert_array_equal(d.a, [1.0, 0.0])
    np.testing.assert_array_equal(d.x[:, 0], [0.2, 0.9])
    assert d.x_names == ("x1",)


def test_bad_indicator_cites_row(tmp_path):
    p = write(tmp_path, "y,a,x1\n1,1,0\n2,0,0\n3,2,0\n")
    with pytest.raises(DataValidationError, match="row 3"):
        load_dataset(p)


def test_missing_column_is_named(tmp_path):
    with pytest.raises(SchemaError, match="'a'"):
        load_dataset(write(tmp_path, "y,treat,x1\n1,1,0\n2,0,1\n"))


def test_non_numeric_cell(tmp_path):
    with pytest.raises(ParseError, match=r"row 2, column 'x1'"):
        load_dataset(write(tmp_path, "y,a,x1\n1,1,0\n2,0,abc\n"))


def test_missing_outcome_becomes_nan(tmp_path):
    d = load_dataset(write(tmp_path, "y,a,x1\n1,1,0\nNA,0,1\n,0,2\n"))
    assert np.isnan(d.y[1]) and np.isnan(d.y[2])


def test_wide_csv_shape(tmp_path):
    # same shape as a 72-covariate registry extract
    rng = np.random.default_rng(0)
    n, d = 5735, 72
    x = rng.normal(size=(n, d))
    a = rng.integers(0, 2, n)
    y = rng.normal(size=n)
    header = "y,a," + ",".join(f"x{j + 1}" for j in range(d))
    rows = [f"{float(y[i])!r},{a[i]}," + ",".join(repr(float(v)) for v in x[i]) for i in range(n)]
    ds = load_dataset(write(tmp_path, header + "\n" + "\n".join(rows) + "\n"))
    assert (ds.n, ds.d) == (5735, 72)
    np.testing.assert_array_equal(ds.x, x)


def test_custom_schema(tmp_path):
    d = load_dataset(write(tmp_path, "out,t,cov_a,cov_b,other\n1,1,0,3,9\n2,0,1,4,9\n"),
                     y_col="out", a_col="t", x_prefix="cov_")
    assert d.x_names == ("cov_a", "cov_b")


def test_dataset_invariants():
    with pytest.raises(DataValidationError):
        Dataset(np.zeros((1, 1)), [1], [0])
    with pytest.raises(DataValidationError):
        Dataset(np.array([[0.0], [np.inf]]), [1, 0], [0, 0])
    with pytest.raises(DataValidationError):
        Dataset(np.zeros((2, 1)), [1, 0.5], [0, 0])
    d = Dataset(np.zeros((2, 1)), [1, 0], [0, 0])
    with pytest.raises(ValueError):
        d.y[0] = 3.0


def test_vfold_partition():
    sc = make_splits(6, 3, "vfold", seed=1)
    vals = [set(sc.validation(s)) for s in range(3)]
    assert all(len(v) == 2 for v in vals)
    assert set().union(*vals) == set(range(6))
    assert sum(len(v) for v in vals) == 6


def test_split_determinism():
    a = make_splits(6, 3, "vfold", seed=1)
    b = make_splits(6, 3, "vfold", seed=1)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    c = make_splits(6, 3, "vfold", seed=2)
    assert a.assignments.shape == c.assignments.shape


def test_repeated_half_balance():
    sc = make_splits(4, 1, "repeated_half", seed=7)
    assert sc.assignments.sum() == 2
    sc = make_splits(9, 5, "repeated_half", seed=7)
    assert np.all(sc.assignments.sum(axis=1) == 4)


def test_split_sizing_errors():
    with pytest.raises(SizingError):
        make_splits(5, 3, "vfold", seed=0)
    with pytest.raises(SizingError):
        make_splits(10, 0, "vfold", seed=0)
    with pytest.raises(ContractError):
        make_splits(10, 2, "bogus", seed=0)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(4, 200), S=st.integers(2, 6), seed=st.integers(0, 2**63 - 1))
def test_vfold_coverage_property(n, S, seed):
    if n < 2 * S:
        return
    sc = make_splits(n, S, "vfold", seed)
    counts = sc.assignments.sum(axis=0)
    assert np.all(counts == 1)
    sizes = sc.assignments.sum(axis=1)
    assert sizes.max() - sizes.min() <= 1


def test_truncation_examples():
    assert truncate_propensity(0.001, 0.01) == 0.01
    assert truncate_propensity(0.5, 0.01) == 0.5
    assert truncate_propensity(0.999, 0.01) == 0.99
    with pytest.raises(ContractError):
        truncate_propensity(0.5, 0.5)


@given(p=st.floats(-10, 10, allow_nan=False), m1=st.floats(1e-6, 0.499))
def test_truncation_idempotent(p, m1):
    once = truncate_propensity(p, m1)
    assert truncate_propensity(once, m1) == once
    assert m1 <= once <= 1 - m1


def test_derive_seed_is_pure_and_path_sensitive():
    assert derive_seed(5, "fit", 1, "p") == derive_seed(5, "fit", 1, "p")
    seen = {derive_seed(5, "fit", s, r) for s in range(5) for r in ("p", "b")}
    assert len(seen) == 10
    assert derive_seed(5, "ab") != derive_seed(5, "a", "b")


def test_run_config_validation():
    RunConfig()
    for bad in (dict(M1=0.5), dict(M1=0.0), dict(tau=1.0, epsilon=1.0), dict(tau=-1.0),
                dict(criterion="x"), dict(split_kind="x"), dict(bootstrap_reps=1), dict(level=1.0)):
        with pytest.raises(ConfigError):
            RunConfig(**bad)
    cfg = RunConfig(tau=2.0).with_overrides(epsilon=0.1)
    assert cfg.tau is None and cfg.epsilon == 0.1
    assert RunConfig(criterion="both").criteria == ("minimax", "mixed_minimax")
