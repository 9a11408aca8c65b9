import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import drselect.selector as selector_mod
from drselect.core import Dataset, make_splits
from drselect.functionals import get_functional, h_values, mar_mean
from drselect.learners import CandidateLibrary, LearnerSpec
from drselect.selector import (
    PsiGrid,
    final_estimate,
    fit_grid,
    minimax_surface,
    mixed_minimax_surface,
    n_tied,
    oracle_select,
    perturbation_hat,
    perturbation_tensor,
    psi_cells,
    pseudo_risk_surface,
    select,
)
from drselect.simulation import conditional_sample, draw

from oracles import bf_b1, bf_b2

grids = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)).flatmap(
    lambda shape: arrays(np.float64, shape, elements=st.floats(-5, 5, allow_nan=False)))


# -- worked examples --------------------------------------------------------------


def test_perturbation_examples():
    v = np.zeros((2, 2, 2))
    v[:, 0, 0] = (1.0, 0.8)
    v[:, 1, 1] = (0.6, 1.0)
    assert perturbation_hat(v, 0, 0, 1, 1) == pytest.approx(0.10, abs=1e-15)
    assert perturbation_hat(v, 1, 1, 1, 1) == 0.0


def test_two_by_two_surfaces():
    v = np.array([[[0.0, 1.0], [2.0, 0.0]]])
    surf = pseudo_risk_surface(PsiGrid(v))
    np.testing.assert_array_equal(surf.b1, [[4, 1], [4, 4]])
    np.testing.assert_array_equal(surf.row_term, [1, 4])
    np.testing.assert_array_equal(surf.col_term, [4, 1])
    np.testing.assert_array_equal(surf.b2, [[5, 2], [8, 5]])
    assert select(surf, "mixed_minimax") == (0, 1)
    assert select(surf, "minimax") == (0, 1)


def test_single_cell_and_degenerate_library():
    d = Dataset(np.zeros((2, 1)), [1, 0], [1.0, 5.0])
    cells = psi_cells(mar_mean(), [np.full(2, 0.5)], [{"arm1": np.zeros(2)}], d)
    grid = PsiGrid(cells[None])
    np.testing.assert_array_equal(grid.values, [[[1.0]]])
    surf = pseudo_risk_surface(grid)
    np.testing.assert_array_equal(surf.b1, [[0.0]])
    np.testing.assert_array_equal(surf.b2, [[0.0]])
    assert select(surf, "minimax") == (0, 0)


def test_ties_go_to_first_pair():
    assert select(np.zeros((3, 3))) == (0, 0)
    m = np.array([[3.0, 1.0], [1.0, 2.0]])
    assert select(m) == (0, 1)
    assert n_tied(m, "minimax") == 2


def test_final_estimate_is_split_mean():
    v = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
    assert final_estimate(PsiGrid(v), 0, 0) == 2.0
    assert final_estimate(PsiGrid(v[:1]), 0, 0) == 1.0


def test_grid_rejects_nonfinite():
    from drselect.errors import EstimationError

    with pytest.raises(EstimationError, match="split 0"):
        PsiGrid(np.array([[[np.nan]]]))


# -- properties ---------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(grids)
def test_brute_force_equivalence(v):
    surf = pseudo_risk_surface(PsiGrid(v))
    np.testing.assert_allclose(surf.b1, bf_b1(v), rtol=0, atol=1e-12)
    np.testing.assert_allclose(surf.b2, bf_b2(v), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(grids)
def test_surface_invariants(v):
    grid = PsiGrid(v)
    per = perturbation_tensor(grid)
    K, L = grid.K, grid.L
    for k, l in itertools.product(range(K), range(L)):
        assert per[k, l, k, l] == 0.0
    np.testing.assert_array_equal(per, per.transpose(2, 3, 0, 1))
    surf = pseudo_risk_surface(grid)
    assert np.all(surf.b1 >= 0) and np.all(surf.b2 >= 0)
    assert np.all(surf.b1 <= surf.b2 + 1e-12)
    np.testing.assert_array_equal(surf.b2, surf.row_term[:, None] + surf.col_term[None, :])
    # separable argmin; compared through values since row + col can round distinct terms into ties
    k, l = select(surf, "mixed_minimax")
    assert surf.b2[k, l] == surf.row_term.min() + surf.col_term.min()
    kk, ll = int(np.argmin(surf.row_term)), int(np.argmin(surf.col_term))
    assert surf.b2[kk, ll] == surf.b2.min()
    for crit in ("minimax", "mixed_minimax"):
        k, l = select(surf, crit)
        est = final_estimate(grid, k, l)
        assert v[:, k, l].min() - 1e-12 <= est <= v[:, k, l].max() + 1e-12


@settings(max_examples=40, deadline=None)
@given(grids, st.randoms(use_true_random=False))
def test_relabeling_equivariance(v, rnd):
    K, L = v.shape[1:]
    pk = list(range(K))
    pl = list(range(L))
    rnd.shuffle(pk)
    rnd.shuffle(pl)
    perm = v[:, pk][:, :, pl]
    s0, s1 = pseudo_risk_surface(PsiGrid(v)), pseudo_risk_surface(PsiGrid(perm))
    for crit in ("minimax", "mixed_minimax"):
        m0, m1 = s0.matrix(crit), s1.matrix(crit)
        np.testing.assert_array_equal(m1, m0[pk][:, pl])
        k1, l1 = select(s1, crit)
        k0, l0 = pk[k1], pl[l1]
        # the mapped pair attains the minimum of the original surface
        assert m0[k0, l0] == m0.min()


def test_surfaces_are_standalone_functions():
    v = np.random.default_rng(0).normal(size=(3, 4, 3))
    b2, row, col = mixed_minimax_surface(v)
    np.testing.assert_array_equal(minimax_surface(v), minimax_surface(PsiGrid(v)))
    np.testing.assert_allclose(b2, bf_b2(v), atol=1e-12)
    np.testing.assert_allclose(row[:, None] + col[None, :], b2, atol=0)


# -- population forms on a discrete law ---------------------------------------------


def test_population_perturbation_closed_form():
    # X takes 4 values; mar_mean with p = 1/pi
    rng = np.random.default_rng(1)
    px = rng.dirichlet(np.ones(4))
    pi_true = rng.uniform(0.2, 0.8, 4)
    mu1 = rng.normal(size=4)
    pis = [rng.uniform(0.1, 0.9, 4) for _ in range(3)]
    bs = [rng.normal(size=4) for _ in range(3)]
    # enumerate (x, a) with y = E[Y | A = 1, x]; only means of Y enter linearly
    xs = np.repeat(np.arange(4), 2)
    a = np.tile([0.0, 1.0], 4)
    w = px[xs] * np.where(a == 1, pi_true[xs], 1 - pi_true[xs])
    y = np.where(a == 1, mu1[xs], 0.0)
    fdef = mar_mean()
    v = np.empty((1, 3, 3))
    for k, l in itertools.product(range(3), range(3)):
        v[0, k, l] = np.dot(w, h_values(fdef, pis[k][xs], {"arm1": bs[l][xs]}, a, y))
    per = perturbation_tensor(v)
    for k0, l, l0 in itertools.product(range(3), repeat=3):
        closed = np.dot(px, (pi_true / pis[k0] - 1) * (bs[l0] - bs[l])) ** 2
        assert abs(per[k0, l, k0, l0] - closed) < 1e-12


# -- grid fitting --------------------------------------------------------------------


def constant_library(k=2, l=2):
    return CandidateLibrary(
        tuple(LearnerSpec.make("constant", "propensity", label=f"c{i}", offset=0.05 * i) for i in range(k)),
        tuple(LearnerSpec.make("constant", "outcome", label=f"c{i}", offset=0.5 * i) for i in range(l)),
    )


def test_fit_count_is_splits_times_learners(monkeypatch):
    calls = []
    real = selector_mod.fit

    def counting(spec, *args, **kw):
        calls.append(spec.label)
        return real(spec, *args, **kw)

    monkeypatch.setattr(selector_mod, "fit", counting)
    data = draw(120, 3)
    lib = constant_library(2, 3)
    fit_grid(data, lib, make_splits(120, 3, "vfold", 3), get_functional("mar_mean"), seed=3)
    assert len(calls) == 3 * (2 + 3)


def test_duplicate_outcome_learners_give_identical_columns():
    data = draw(300, 4)
    spec = LearnerSpec.make("l1_linear", "outcome")
    lib = CandidateLibrary((LearnerSpec.make("l1_logistic", "propensity"),),
                           (LearnerSpec.make("constant", "outcome"), spec, spec))
    grid = fit_grid(data, lib, make_splits(300, 3, "vfold", 1), get_functional("ate"), seed=1)
    np.testing.assert_array_equal(grid.values[:, :, 1], grid.values[:, :, 2])


def test_grid_cell_recomputed_by_hand():
    data = draw(600, 5)
    lib = CandidateLibrary((LearnerSpec.make("l1_logistic", "propensity"),
                            LearnerSpec.make("constant", "propensity")),
                           (LearnerSpec.make("l1_linear", "outcome"),))
    fdef = get_functional("ate")
    splits = make_splits(600, 3, "vfold", 2)
    grid = fit_grid(data, lib, splits, fdef, seed=2, keep_fits=True)
    assert grid.values.shape == (3, 2, 1)
    s = 1
    val = data.subset(splits.validation(s))
    sf = grid.fits[s]
    b = {name: f.predict(val.x) for name, f in sf.outcome[0].items()}
    h = h_values(fdef, sf.propensity[0].predict(val.x), b, val.a, val.y)
    assert grid.values[s, 0, 0] == pytest.approx(h.mean(), abs=1e-12)
    assert h.min() <= grid.values[s, 0, 0] <= h.max()


def test_oracle_surface_vanishes_for_identical_learners():
    data = draw(200, 6)
    spec_p, spec_b = LearnerSpec.make("constant", "propensity"), LearnerSpec.make("constant", "outcome")
    lib = CandidateLibrary((spec_p, spec_p), (spec_b, spec_b, spec_b))
    grid = fit_grid(data, lib, make_splits(200, 2, "vfold", 0), get_functional("ate"), 0, keep_fits=True)
    ev, w = conditional_sample(500, 9)
    orc = oracle_select(grid, ev, get_functional("ate"), w)
    assert np.all(orc.surface.b1 == 0) and np.all(orc.surface.b2 == 0)
    assert orc.selected == {"minimax": (0, 0), "mixed_minimax": (0, 0)}
