"""Cross-validated minimax and mixed-minimax selection over learner pairs."""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .core import Dataset, SplitScheme, derive_seed
from .errors import ContractError, DrSelectError, EstimationError, FitError
from .functionals import AUX_LEARNER
from .learners import CandidateLibrary, FittedNuisance, fit

CRITERION_NAMES = ("minimax", "mixed_minimax")


@dataclass(frozen=True, eq=False)
class SplitFits:
    """Nuisances fitted on the training part of one split."""

    propensity: tuple  # FittedNuisance per propensity learner
    outcome: tuple  # {target name: FittedNuisance} per outcome learner
    aux: Mapping  # {target name: FittedNuisance}


@dataclass(frozen=True, eq=False)
class PsiGrid:
    """Per-split estimates ``values[s, k, l]``."""

    values: np.ndarray
    p_labels: tuple = ()
    b_labels: tuple = ()
    splits: Optional[SplitScheme] = None
    fits: Optional[tuple] = None  # SplitFits per split when kept
    fallbacks: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ContractError("psi grid must be S x K x L")
        if not np.all(np.isfinite(v)):
            s, k, l = np.argwhere(~np.isfinite(v))[0]
            raise EstimationError(f"non-finite estimate at split {s}, pair ({k}, {l})")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if not self.p_labels:
            object.__setattr__(self, "p_labels", tuple(f"p{k}" for k in range(v.shape[1])))
        if not self.b_labels:
            object.__setattr__(self, "b_labels", tuple(f"b{l}" for l in range(v.shape[2])))

    @property
    def S(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    @property
    def L(self) -> int:
        return self.values.shape[2]

    def averaged(self) -> np.ndarray:
        """Split-averaged estimates, K x L."""
        return self.values.mean(axis=0)


# ---------------------------------------------------------------------------
# grid fitting


def _fit_seed(seed, s, role, key, target=""):
    return derive_seed(seed, "fit", s, role, target, key)


def _map_ordered(fn, tasks, threads):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


def fit_split_nuisances(data: Dataset, lib: CandidateLibrary, splits: SplitScheme, fdef, seed: int,
                        m1: float = 0.01, m2: Optional[float] = None, threads: int = 1,
                        tuning: Optional[Mapping] = None) -> tuple:
    """Fit every learner once per split; returns a ``SplitFits`` per split.

    ``tuning`` optionally fixes grid points, keyed ``("p", k)`` or
    ``("b", l, target_name)``; otherwise each fit tunes by inner CV.
    """
    if splits.n != data.n:
        raise ContractError(f"split scheme covers {splits.n} rows, data has {data.n}")
    tuning = tuning or {}
    tasks = []
    for s in range(splits.S):
        for k in range(lib.K):
            tasks.append((s, "p", k))
        for l in range(lib.L):
            tasks.append((s, "b", l))
        if fdef.aux_targets:
            tasks.append((s, "aux", 0))
    trains = [data.subset(splits.training(s)) for s in range(splits.S)]

    def run(task):
        s, role, j = task
        train = trains[s]
        try:
            if role == "p":
                spec = lib.propensity[j]
                return fit(spec, train, _fit_seed(seed, s, "p", spec.key()), m1=m1,
                           point=tuning.get(("p", j)), split=s)
            if role == "b":
                spec = lib.outcome[j]
                return {t.name: fit(spec, train, _fit_seed(seed, s, "b", spec.key(), t.name), target=t,
                                    m2=m2, point=tuning.get(("b", j, t.name)), split=s)
                        for t in fdef.outcome_targets}
            return {t.name: fit(AUX_LEARNER, train, _fit_seed(seed, s, "aux", AUX_LEARNER.key(), t.name),
                                target=t, split=s)
                    for t in fdef.aux_targets}
        except DrSelectError as exc:
            label = lib.propensity[j].label if role == "p" else (
                lib.outcome[j].label if role == "b" else AUX_LEARNER.label)
            raise FitError(f"split {s}, learner {label}: {exc}") from exc

    results = dict(zip(tasks, _map_ordered(run, tasks, threads)))
    out = []
    for s in range(splits.S):
        out.append(SplitFits(
            tuple(results[(s, "p", k)] for k in range(lib.K)),
            tuple(results[(s, "b", l)] for l in range(lib.L)),
            results.get((s, "aux", 0), {}),
        ))
    return tuple(out)


def _predict_all(fits: SplitFits, x):
    pis = [p.predict(x) for p in fits.propensity]
    bs = [{name: f.predict(x) for name, f in b.items()} for b in fits.outcome]
    aux = {name: f.predict(x) for name, f in fits.aux.items()} or None
    return pis, bs, aux


def psi_cells(fdef, pis, bs, data: Dataset, aux=None, weights=None) -> np.ndarray:
    """K x L estimates from prediction arrays evaluated on ``data``."""
    out = np.empty((len(pis), len(bs)))
    for k, pi in enumerate(pis):
        for l, b in enumerate(bs):
            try:
                out[k, l] = fdef.psi(pi, b, data, aux, weights)
            except DrSelectError as exc:
                raise type(exc)(f"pair ({k}, {l}): {exc}") from exc
    return out


def fit_grid(data: Dataset, lib: CandidateLibrary, splits: SplitScheme, fdef, seed: int,
             m1: float = 0.01, m2: Optional[float] = None, threads: int = 1,
             tuning: Optional[Mapping] = None, keep_fits: bool = False) -> PsiGrid:
    """Estimate the functional for every split and learner pair.

    Each learner is fit once per split (S x (K + L) fits) and its
    predictions reused across all pairs.
    """
    fdef.check_data(data)
    fits = fit_split_nuisances(data, lib, splits, fdef, seed, m1, m2, threads, tuning)
    values = np.empty((splits.S, lib.K, lib.L))
    fallbacks = []
    for s, sf in enumerate(fits):
        val = data.subset(splits.validation(s))
        pis, bs, aux = _predict_all(sf, val.x)
        values[s] = psi_cells(fdef, pis, bs, val, aux)
        for k, p in enumerate(sf.propensity):
            if p.provenance.fallback:
                fallbacks.append((s, "p", k))
        for l, b in enumerate(sf.outcome):
            if any(f.provenance.fallback for f in b.values()):
                fallbacks.append((s, "b", l))
    return PsiGrid(values, tuple(sp.label for sp in lib.propensity), tuple(sp.label for sp in lib.outcome),
                   splits, fits if keep_fits else None, tuple(fallbacks))


def frozen_tuning(fits: tuple) -> dict:
    """Most frequent grid point per learner across splits (first seen wins ties)."""
    votes = {}
    for sf in fits:
        for k, p in enumerate(sf.propensity):
            votes.setdefault(("p", k), []).append(p.provenance.tuning)
        for l, b in enumerate(sf.outcome):
            for name, f in b.items():
                votes.setdefault(("b", l, name), []).append(f.provenance.tuning)
    out = {}
    for key, pts in votes.items():
        pts = [p for p in pts if p]
        if not pts:
            continue
        counts = Counter(pts)
        best = max(counts.values())
        out[key] = dict(next(p for p in pts if counts[p] == best))
    return out


# ---------------------------------------------------------------------------
# perturbations and pseudo-risks


def _values(grid) -> np.ndarray:
    return grid.values if isinstance(grid, PsiGrid) else np.asarray(grid, dtype=np.float64)


def perturbation_tensor(grid) -> np.ndarray:
    """``per[k, l, k0, l0]`` = split mean of squared differences."""
    v = _values(grid)
    diff = v[:, :, :, None, None] - v[:, None, None, :, :]
    return np.mean(diff * diff, axis=0)


def perturbation_hat(grid, k: int, l: int, k0: int, l0: int) -> float:
    v = _values(grid)
    d = v[:, k, l] - v[:, k0, l0]
    return float(np.mean(d * d))


@dataclass(frozen=True, eq=False)
class PseudoRiskSurface:
    b1: np.ndarray
    b2: np.ndarray
    row_term: np.ndarray
    col_term: np.ndarray
    per: np.ndarray = field(repr=False, default=None)

    def matrix(self, criterion: str) -> np.ndarray:
        if criterion == "minimax":
            return self.b1
        if criterion == "mixed_minimax":
            return self.b2
        raise ContractError(f"unknown criterion {criterion!r}")


def minimax_surface(grid, per: Optional[np.ndarray] = None) -> np.ndarray:
    per = perturbation_tensor(grid) if per is None else per
    K, L = per.shape[:2]
    b1 = np.empty((K, L))
    for k0 in range(K):
        for l0 in range(L):
            b1[k0, l0] = max(per[k0, :, k0, l0].max(), per[:, l0, k0, l0].max())
    return b1


def mixed_terms(grid, per: Optional[np.ndarray] = None) -> tuple:
    per = perturbation_tensor(grid) if per is None else per
    K, L = per.shape[:2]
    row = np.array([per[k0, :, k0, :].max() for k0 in range(K)])
    col = np.array([per[:, l0, :, l0].max() for l0 in range(L)])
    return row, col


def mixed_minimax_surface(grid, per: Optional[np.ndarray] = None) -> tuple:
    """Returns ``(b2, row_term, col_term)``."""
    row, col = mixed_terms(grid, per)
    return row[:, None] + col[None, :], row, col


def pseudo_risk_surface(grid) -> PseudoRiskSurface:
    per = perturbation_tensor(grid)
    b2, row, col = mixed_minimax_surface(grid, per)
    return PseudoRiskSurface(minimax_surface(grid, per), b2, row, col, per)


def select(surface, criterion: str = "minimax") -> tuple:
    """Argmin pair; exact ties go to the smallest k, then the smallest l."""
    m = surface.matrix(criterion) if isinstance(surface, PseudoRiskSurface) else np.asarray(surface)
    flat = int(np.argmin(m))
    return divmod(flat, m.shape[1])


def n_tied(surface, criterion: str) -> int:
    m = surface.matrix(criterion) if isinstance(surface, PseudoRiskSurface) else np.asarray(surface)
    return int(np.sum(m == m.min()))


def final_estimate(grid, k: int, l: int) -> float:
    return float(np.mean(_values(grid)[:, k, l]))


# ---------------------------------------------------------------------------
# oracle selection (simulation only)


@dataclass(frozen=True, eq=False)
class OracleSelection:
    grid: PsiGrid  # estimates with validation means replaced by eval-sample means
    surface: PseudoRiskSurface
    selected: dict  # criterion -> (k, l)


def oracle_grid(grid: PsiGrid, eval_sample: Dataset, fdef, weights=None) -> PsiGrid:
    """Re-evaluate every split's nuisances on a large independent sample."""
    if grid.fits is None:
        raise ContractError("oracle selection needs a grid fitted with keep_fits=True")
    values = np.empty_like(grid.values)
    for s, sf in enumerate(grid.fits):
        pis, bs, aux = _predict_all(sf, eval_sample.x)
        values[s] = psi_cells(fdef, pis, bs, eval_sample, aux, weights)
    return PsiGrid(values, grid.p_labels, grid.b_labels, grid.splits)


def oracle_select(grid: PsiGrid, eval_sample: Dataset, fdef, weights=None) -> OracleSelection:
    og = oracle_grid(grid, eval_sample, fdef, weights)
    surf = pseudo_risk_surface(og)
    return OracleSelection(og, surf, {c: select(surf, c) for c in CRITERION_NAMES})
