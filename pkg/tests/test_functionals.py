import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drselect.core import Dataset
from drselect.errors import ContractError, EvaluationError, RootFindingError
from drselect.functionals import (
    MixedBiasPlugin,
    ate,
    counterfactual_mean,
    estimate_psi,
    expected_cond_cov,
    expected_product,
    get_functional,
    h_transform,
    h_values,
    mar_mean,
    mnar_mean,
    solve_mixed_bias,
)

from oracles import ToyLaw, exact_expectation, truth_and_nuisances


def test_worked_h_values():
    assert h_transform(mar_mean(), 0.5, 0.0, a=1, y=1) == 2.0
    assert h_transform(expected_cond_cov(), 0.5, 1.0, a=1, y=2) == 0.5
    rng = np.random.default_rng(0)
    for a, y in zip(rng.integers(0, 2, 5), rng.normal(size=5)):
        assert h_transform(expected_product(), 0.0, 0.0, a=a, y=y) == 0.0


def test_two_row_mean():
    d = Dataset(np.zeros((2, 1)), [1, 0], [1.0, 5.0])
    assert estimate_psi(mar_mean(), np.full(2, 0.5), {"arm1": np.zeros(2)}, d) == 1.0


def test_empty_validation_rejected():
    # Dataset itself refuses fewer than two rows; the guard covers array-like stand-ins
    empty = SimpleNamespace(n=0, a=np.zeros(0), y=np.zeros(0))
    with pytest.raises(ContractError):
        estimate_psi(mar_mean(), np.zeros(0), {"arm1": np.zeros(0)}, empty)


def test_nonfinite_term_is_named():
    with pytest.raises(EvaluationError, match="b\\*p\\*h1"):
        h_transform(mar_mean(), 0.0, 1.0, a=1, y=1)


def test_missing_outcomes_only_matter_where_read():
    d = Dataset(np.zeros((3, 1)), [1, 0, 1], [1.0, np.nan, 2.0])
    mar_mean().check_data(d)
    with pytest.raises(EvaluationError, match="row 2"):
        ate().check_data(d)
    # a missing Y on a control row contributes nothing to the MAR mean
    b = {"arm1": np.array([0.3, 0.7, 0.1])}
    h = h_values(mar_mean(), np.full(3, 0.4), b, d.a, d.y)
    assert np.all(np.isfinite(h))
    np.testing.assert_allclose(h[1], 0.7)


def test_ate_is_difference_of_counterfactual_means():
    rng = np.random.default_rng(1)
    n = 50
    a = rng.integers(0, 2, n).astype(float)
    y = rng.normal(size=n)
    pi = rng.uniform(0.1, 0.9, n)
    b = {"arm1": rng.normal(size=n), "arm0": rng.normal(size=n)}
    diff = h_values(counterfactual_mean(1), pi, b, a, y) - h_values(counterfactual_mean(0), pi, b, a, y)
    np.testing.assert_allclose(h_values(ate(), pi, b, a, y), diff, rtol=0, atol=1e-12)


def test_mnar_at_zero_tilt_is_mar():
    rng = np.random.default_rng(2)
    n = 40
    a = rng.integers(0, 2, n).astype(float)
    y = rng.normal(size=n)
    pi = rng.uniform(0.1, 0.9, n)
    b = rng.normal(size=n)
    got = h_values(mnar_mean(0.0), pi, {"mnar": b}, a, y, aux={"tilt": np.ones(n)})
    want = h_values(mar_mean(), pi, {"arm1": b}, a, y)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_catalog_lookup():
    assert get_functional("ate").name == "ate"
    assert get_functional("counterfactual_mean", arm=0).name == "counterfactual_mean_0"
    with pytest.raises(ContractError):
        get_functional("mnar_mean")
    with pytest.raises(ContractError):
        get_functional("median")


# -- exact double robustness on a discrete law ------------------------------------


@pytest.mark.parametrize("name", ["mar_mean", "expected_cond_cov", "expected_product"])
def test_double_robustness_identity_exact(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    fdef = get_functional(name)
    for _ in range(20):
        law = ToyLaw(rng)
        psi, b_true = truth_and_nuisances(law, name)
        pi_bad = rng.uniform(0.05, 0.95, 4)
        b_bad = {k: rng.normal(scale=3.0, size=4) for k in b_true}
        assert abs(exact_expectation(law, fdef, pi_bad, b_true) - psi) < 1e-12
        assert abs(exact_expectation(law, fdef, law.pi, b_bad) - psi) < 1e-12
        assert abs(exact_expectation(law, fdef, law.pi, b_true) - psi) < 1e-12


def test_conditional_covariance_vanishes_under_independence():
    law = ToyLaw(np.random.default_rng(3), independent=True)
    psi = exact_expectation(law, expected_cond_cov(), law.pi, {"all": law.ey_all()})
    assert abs(psi) < 1e-12


@pytest.mark.parametrize("alpha", [-0.7, 0.4])
def test_mnar_double_robustness_exact(alpha):
    rng = np.random.default_rng(4)
    fdef = mnar_mean(alpha)
    for _ in range(10):
        law = ToyLaw(rng)
        tilt = law.ey(1, lambda y: math.exp(-alpha * y))
        tilted = law.ey(1, lambda y: y * math.exp(-alpha * y)) / tilt
        psi = law.mean(law.a * law.y) + float(np.dot(law.px, (1 - law.pi) * tilted))
        aux = {"tilt": tilt}
        assert abs(exact_expectation(law, fdef, rng.uniform(0.1, 0.9, 4), {"mnar": tilted}, aux) - psi) < 1e-12
        assert abs(exact_expectation(law, fdef, law.pi, {"mnar": rng.normal(size=4)}, aux) - psi) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=4, max_size=4),
       st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_product_bias_is_bilinear(pi_bad, b_bad):
    # E[H(p, b)] - psi = -E[(p - p*)(b - b*)] for the expected product
    law = ToyLaw(np.random.default_rng(5))
    psi, b_true = truth_and_nuisances(law, "expected_product")
    pi_bad, b_bad = np.array(pi_bad), np.array(b_bad)
    bias = exact_expectation(law, expected_product(), pi_bad, {"all": b_bad}) - psi
    expected = -float(np.dot(law.px, (pi_bad - law.pi) * (b_bad - b_true["all"])))
    assert abs(bias - expected) < 1e-9


# -- mixed-bias plugins ---------------------------------------------------------


def _toy_data(n=5):
    rng = np.random.default_rng(6)
    return Dataset(rng.random((n, 2)), [1, 0, 1, 1, 0][:n], rng.normal(size=n))


def test_affine_root_by_bracketing():
    plug = MixedBiasPlugin(lambda c, d, data, psi: np.full(data.n, 3.0 - psi))
    assert abs(solve_mixed_bias(plug, None, None, _toy_data()) - 3.0) < 1e-10


def test_exponential_root():
    plug = MixedBiasPlugin(lambda c, d, data, psi: np.full(data.n, math.exp(-psi) - 0.5))
    assert abs(solve_mixed_bias(plug, None, None, _toy_data()) - math.log(2)) < 1e-10


def test_plugin_replicating_mar_mean():
    data = _toy_data()
    fdef = mar_mean()
    pi = np.array([0.3, 0.5, 0.6, 0.8, 0.4])
    b = {"arm1": np.array([0.1, -0.2, 0.5, 1.0, 0.0])}

    def if_eval(c, d, dd, psi):
        return h_values(fdef, c, d, dd.a, dd.y) - psi

    for slope in (-1.0, None):
        plug = MixedBiasPlugin(if_eval, psi_slope=slope, d_target=fdef.outcome_targets[0])
        assert abs(plug.psi(pi, b, data) - estimate_psi(fdef, pi, b, data)) < 1e-10


def test_no_root_raises():
    plug = MixedBiasPlugin(lambda c, d, data, psi: np.full(data.n, 1.0 + psi * psi))
    with pytest.raises(RootFindingError):
        solve_mixed_bias(plug, None, None, _toy_data())
