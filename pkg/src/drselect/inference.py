"""Smooth-max post-selection estimator, bootstrap intervals and the estimate pipeline."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.special import logsumexp

from .core import Dataset, RunConfig, derive_seed, make_splits
from .errors import ContractError, EstimationError, InferenceError
from .learners import CandidateLibrary
from .selector import (
    CRITERION_NAMES,
    PsiGrid,
    PseudoRiskSurface,
    final_estimate,
    fit_grid,
    frozen_tuning,
    n_tied,
    perturbation_tensor,
    pseudo_risk_surface,
    select,
)

TAU_CAP = 1e8


def _check_tau(tau: float) -> float:
    if not tau > 0 or not math.isfinite(tau):
        raise ContractError(f"tau must be a positive finite number, got {tau}")
    return min(float(tau), TAU_CAP)


def _per(grid) -> np.ndarray:
    if isinstance(grid, PsiGrid):
        return perturbation_tensor(grid)
    return perturbation_tensor(np.asarray(grid, dtype=np.float64))


def _smax(z: np.ndarray, tau: float) -> float:
    return float(logsumexp(tau * np.ravel(z)) / tau)


def _minimax_terms(per, k0, l0):
    K = per.shape[0]
    others = [k for k in range(K) if k != k0]
    return np.concatenate([per[k0, :, k0, l0], per[others, l0, k0, l0]])


def gamma_matrix(grid, tau: float, criterion: str, per: Optional[np.ndarray] = None) -> np.ndarray:
    """Smooth-max pseudo-risk for every anchor pair."""
    tau = _check_tau(tau)
    per = _per(grid) if per is None else per
    K, L = per.shape[:2]
    if criterion == "minimax":
        return np.array([[_smax(_minimax_terms(per, k0, l0), tau) for l0 in range(L)] for k0 in range(K)])
    if criterion == "mixed_minimax":
        row = np.array([_smax(per[k0, :, k0, :], tau) for k0 in range(K)])
        col = np.array([_smax(per[:, l0, :, l0], tau) for l0 in range(L)])
        return row[:, None] + col[None, :]
    raise ContractError(f"unknown criterion {criterion!r}")


def gamma_smooth(grid, k0: int, l0: int, tau: float, criterion: str) -> float:
    return float(gamma_matrix(grid, tau, criterion)[k0, l0])


def term_count(K: int, L: int, criterion: str) -> int:
    """Number of exponentials behind one anchor's smooth max.

    For the mixed criterion the two sums bound jointly by log(K^2 L^2) / tau.
    """
    if criterion == "minimax":
        return K + L - 1
    if criterion == "mixed_minimax":
        return K * K * L * L
    raise ContractError(f"unknown criterion {criterion!r}")


def choose_tau(m: int, epsilon: float) -> float:
    """``log(m) / epsilon``; a single term needs no smoothing and gets tau = 1."""
    if m < 1:
        raise ContractError("term count must be >= 1")
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    if m == 1:
        return 1.0
    return min(math.log(m) / epsilon, TAU_CAP)


def default_tau(K: int, L: int) -> float:
    return math.log(K * L) if K * L > 1 else 1.0


def resolve_tau(cfg: RunConfig, K: int, L: int, criterion: str) -> tuple:
    """Returns ``(tau, source)``."""
    if cfg.tau is not None:
        return _check_tau(cfg.tau), "tau"
    if cfg.epsilon is not None:
        m = term_count(K, L, criterion)
        return choose_tau(m, cfg.epsilon), ("epsilon" if m > 1 else "epsilon (single term, tau = 1)")
    return default_tau(K, L), "default log(K*L)"


def smooth_weights(gamma: np.ndarray, tau: float) -> np.ndarray:
    """Softmin of ``gamma`` at temperature ``1 / tau``."""
    tau = _check_tau(tau)
    g = np.asarray(gamma, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ContractError("gamma must be finite")
    z = -tau * (g - g.min())
    w = np.exp(z - logsumexp(z))
    return w / w.sum()


def smooth_psi(weights: np.ndarray, grid) -> float:
    avg = grid.averaged() if isinstance(grid, PsiGrid) else np.asarray(grid, dtype=np.float64)
    return float(np.sum(np.asarray(weights) * avg))


@dataclass(frozen=True, eq=False)
class SmoothMaxResult:
    gamma: np.ndarray
    weights: np.ndarray
    psi_tau: float
    tau: float
    criterion: str


def smooth_max(grid, tau: float, criterion: str) -> SmoothMaxResult:
    gamma = gamma_matrix(grid, tau, criterion)
    w = smooth_weights(gamma, tau)
    return SmoothMaxResult(gamma, w, smooth_psi(w, grid), min(float(tau), TAU_CAP), criterion)


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    lo: float
    hi: float
    se: float
    point: float
    level: float
    reps: int
    dropped: int
    estimates: np.ndarray

    def astuple(self) -> tuple:
        return self.lo, self.hi, self.se, self.point


@dataclass(frozen=True, eq=False)
class CriterionReport:
    criterion: str
    selected: tuple
    ties: int
    estimate: float
    smooth: SmoothMaxResult
    tau_source: str
    ci: Optional[BootstrapResult] = None


@dataclass(frozen=True, eq=False)
class SelectionReport:
    grid: PsiGrid
    surface: PseudoRiskSurface
    criteria: dict  # name -> CriterionReport
    seed: int
    functional: str

    def to_dict(self) -> dict:
        g = self.grid
        out = {
            "functional": self.functional,
            "seed": self.seed,
            "n": g.splits.n if g.splits is not None else None,
            "S": g.S,
            "propensity_learners": list(g.p_labels),
            "outcome_learners": list(g.b_labels),
            "psi_grid": g.values.tolist(),
            "psi_pairs": g.averaged().tolist(),
            "b1": self.surface.b1.tolist(),
            "b2": self.surface.b2.tolist(),
            "row_term": self.surface.row_term.tolist(),
            "col_term": self.surface.col_term.tolist(),
            "fallbacks": [list(f) for f in g.fallbacks],
            "criteria": {},
        }
        for name, rep in self.criteria.items():
            k, l = rep.selected
            entry = {
                "selected": [k, l],
                "selected_labels": [g.p_labels[k], g.b_labels[l]],
                "ties": rep.ties,
                "psi_hat": rep.estimate,
                "tau": rep.smooth.tau,
                "tau_source": rep.tau_source,
                "psi_tau": rep.smooth.psi_tau,
                "gamma": rep.smooth.gamma.tolist(),
                "weights": rep.smooth.weights.tolist(),
            }
            if rep.ci is not None:
                entry["ci"] = {"lo": rep.ci.lo, "hi": rep.ci.hi, "se": rep.ci.se, "level": rep.ci.level,
                               "reps": rep.ci.reps, "dropped": rep.ci.dropped}
            out["criteria"][name] = entry
        return out


def run_grid(data: Dataset, lib: CandidateLibrary, fdef, cfg: RunConfig, seed: Optional[int] = None,
             threads: int = 1, tuning: Optional[Mapping] = None, keep_fits: bool = False) -> PsiGrid:
    seed = cfg.seed if seed is None else seed
    splits = make_splits(data.n, cfg.S, cfg.split_kind, seed)
    return fit_grid(data, lib, splits, fdef, seed, cfg.M1, cfg.M2, threads, tuning, keep_fits)


def _smooth_for(grid: PsiGrid, taus: Mapping) -> dict:
    return {c: smooth_max(grid, t, c).psi_tau for c, t in taus.items()}


def bootstrap_ci(data: Dataset, lib: CandidateLibrary, fdef, cfg: RunConfig, taus: Mapping,
                 reps: Optional[int] = None, level: Optional[float] = None, threads: int = 1,
                 tuning: Optional[Mapping] = None, points: Optional[Mapping] = None) -> dict:
    """Percentile intervals for the smooth-max estimate of each criterion in ``taus``.

    Every resample re-runs the whole pipeline (splits, nuisance fits, grid,
    smoothing) with seeds derived from the master seed and resample index.
    Failed resamples are dropped; more than 10% failures is an error.
    """
    reps = cfg.bootstrap_reps if reps is None else reps
    level = cfg.level if level is None else level
    if reps < 2:
        raise ContractError("bootstrap needs at least 2 resamples")
    if not 0.0 < level < 1.0:
        raise ContractError("level must lie in (0, 1)")
    if points is None:
        points = _smooth_for(run_grid(data, lib, fdef, cfg, threads=threads, tuning=tuning), taus)

    def one(r):
        rs = derive_seed(cfg.seed, "bootstrap", r)
        idx = np.random.default_rng(rs).integers(0, data.n, size=data.n)
        try:
            grid = run_grid(data.subset(idx), lib, fdef, cfg, seed=rs, tuning=tuning)
            return _smooth_for(grid, taus)
        except EstimationError:
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(reps)))
    else:
        results = [one(r) for r in range(reps)]
    kept = [r for r in results if r is not None]
    dropped = reps - len(kept)
    if dropped > 0.1 * reps:
        raise InferenceError(f"{dropped} of {reps} bootstrap resamples failed")
    out = {}
    alpha = (1.0 - level) / 2.0
    for c in taus:
        est = np.array([r[c] for r in kept])
        lo, hi = np.quantile(est, [alpha, 1.0 - alpha])
        out[c] = BootstrapResult(float(lo), float(hi), float(np.std(est, ddof=1)), float(points[c]),
                                 level, reps, dropped, est)
    return out


def estimate(data: Dataset, lib: CandidateLibrary, fdef, cfg: RunConfig, threads: int = 1,
             tuning: Optional[Mapping] = None) -> SelectionReport:
    """Grid, pseudo-risk surfaces, selections, smooth-max estimates and optional bootstrap."""
    want_boot = cfg.bootstrap_reps > 0
    grid = run_grid(data, lib, fdef, cfg, threads=threads, tuning=tuning,
                    keep_fits=want_boot and not cfg.bootstrap_retune and tuning is None)
    surface = pseudo_risk_surface(grid)
    taus, sources, smooth = {}, {}, {}
    for c in cfg.criteria:
        taus[c], sources[c] = resolve_tau(cfg, grid.K, grid.L, c)
        smooth[c] = smooth_max(grid, taus[c], c)
    cis = {}
    if want_boot:
        boot_tuning = tuning
        if boot_tuning is None and not cfg.bootstrap_retune:
            boot_tuning = frozen_tuning(grid.fits)
        cis = bootstrap_ci(data, lib, fdef, cfg, taus, threads=threads, tuning=boot_tuning,
                           points={c: smooth[c].psi_tau for c in taus})
    reports = {}
    for c in cfg.criteria:
        k, l = select(surface, c)
        reports[c] = CriterionReport(c, (k, l), n_tied(surface, c), final_estimate(grid, k, l), smooth[c],
                                     sources[c], cis.get(c))
    grid = PsiGrid(grid.values, grid.p_labels, grid.b_labels, grid.splits, None, grid.fallbacks)
    return SelectionReport(grid, surface, reports, cfg.seed, getattr(fdef, "name", "custom"))


__all__ = [
    "BootstrapResult", "CRITERION_NAMES", "SelectionReport", "SmoothMaxResult", "bootstrap_ci",
    "choose_tau", "estimate", "gamma_matrix", "gamma_smooth", "resolve_tau", "smooth_max", "smooth_psi",
    "smooth_weights", "term_count",
]
