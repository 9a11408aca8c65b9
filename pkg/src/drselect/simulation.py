"""Simulation design, ground truth, DDML comparators and experiment runners.

Design: X ~ Uniform(0,1)^5, f_j(x) = logistic(20 (x_j - 0.5)),
logit P(A = 1 | X) = (1, -1, 1, -1, 1) . f(X),
E[Y | A, X] = 2 (1 + 1.f(X) + 1.f(X) A + A), standard normal noise.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Dataset, RunConfig, derive_seed, make_splits
from .errors import ContractError, DrSelectError, EstimationError, ExperimentError
from .functionals import counterfactual_mean, get_functional
from .learners import CandidateLibrary, LearnerSpec
from .selector import (
    CRITERION_NAMES,
    final_estimate,
    oracle_select,
    psi_cells,
    pseudo_risk_surface,
    select,
)

PS_COEF = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
DIM = 5


def sigmoid_features(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    # logistic(20 t) written through tanh to avoid overflow warnings
    return 0.5 * (1.0 + np.tanh(10.0 * (x[:, :DIM] - 0.5)))


def true_propensity(x) -> np.ndarray:
    z = sigmoid_features(x) @ PS_COEF
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def true_outcome(x, a) -> np.ndarray:
    s = sigmoid_features(x).sum(axis=1)
    return 2.0 * (1.0 + s + s * a + a)


@dataclass(frozen=True)
class DgpSpec:
    n: int
    seed: int = 0
    x_law: str = "uniform01"
    ps_coef: tuple = tuple(PS_COEF)
    outcome_scale: float = 2.0
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ContractError("n must be >= 2")
        if self.x_law != "uniform01":
            raise ContractError(f"unsupported covariate law {self.x_law!r}")
        if tuple(self.ps_coef) != tuple(PS_COEF) or self.outcome_scale != 2.0:
            raise ContractError("only the reference design coefficients are supported")


def generate(spec: DgpSpec) -> Dataset:
    """Draw a dataset; deterministic given ``(n, seed)``."""
    rng = np.random.default_rng(derive_seed(spec.seed, "dgp", spec.n))
    x = rng.random((spec.n, DIM))
    a = (rng.random(spec.n) < true_propensity(x)).astype(np.float64)
    y = true_outcome(x, a) + spec.noise_sd * rng.standard_normal(spec.n)
    return Dataset(x, a, y)


def draw(n: int, seed: int) -> Dataset:
    return generate(DgpSpec(n, seed))


def conditional_sample(n_x: int, seed: int) -> tuple:
    """Evaluation law with A and Y integrated out exactly.

    Each covariate draw appears twice, once per arm, with ``y`` the
    conditional mean and weight ``P(A = a | X)``. Weighted means of any
    H-transform that is linear in Y equal their expectation given X.
    """
    rng = np.random.default_rng(derive_seed(seed, "eval-law", n_x))
    x = rng.random((n_x, DIM))
    pi = true_propensity(x)
    data = Dataset(np.vstack([x, x]), np.r_[np.ones(n_x), np.zeros(n_x)],
                   np.r_[true_outcome(x, 1.0), true_outcome(x, 0.0)])
    return data, np.r_[pi, 1.0 - pi]


# ---------------------------------------------------------------------------
# ground truth

TRUTH = {"ate": 7.0, ("counterfactual_mean", 1): 14.0, ("counterfactual_mean", 0): 7.0}


def true_psi(functional: str, arm: int = 1) -> float:
    """Population value; E f_j = 1/2 because the features are symmetric about 1/2."""
    if functional == "ate":
        return TRUTH["ate"]
    if functional.startswith("counterfactual_mean"):
        if functional.endswith("_0"):
            arm = 0
        elif functional.endswith("_1"):
            arm = 1
        return TRUTH[("counterfactual_mean", arm)]
    raise ContractError(f"no known truth for {functional!r}")


def monte_carlo_truth(quantity: str, draws: int = 10_000_000, seed: int = 2024, chunk: int = 1_000_000) -> tuple:
    """Monte Carlo mean and standard error of a population quantity.

    ``quantity`` is ``ate``, ``counterfactual_mean_1``, ``counterfactual_mean_0``
    or ``propensity`` (the marginal P(A = 1)).
    """
    fns = {
        "ate": lambda x: true_outcome(x, 1.0) - true_outcome(x, 0.0),
        "counterfactual_mean_1": lambda x: true_outcome(x, 1.0),
        "counterfactual_mean_0": lambda x: true_outcome(x, 0.0),
        "propensity": true_propensity,
    }
    if quantity not in fns:
        raise ContractError(f"unknown quantity {quantity!r}")
    rng = np.random.default_rng(derive_seed(seed, "mc-truth", quantity))
    s = ss = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        v = fns[quantity](rng.random((m, DIM)))
        s += v.sum()
        ss += np.dot(v, v)
        done += m
    mean = s / draws
    var = max(ss / draws - mean * mean, 0.0) * draws / (draws - 1)
    return mean, math.sqrt(var / draws)


# ---------------------------------------------------------------------------
# libraries and comparators


def ml_library(forest_trees: Optional[int] = None) -> CandidateLibrary:
    """l1 / forest / boosting on each side; ``forest_trees`` overrides the forest size."""
    extra = {} if forest_trees is None else {"n_trees": (int(forest_trees),)}
    return CandidateLibrary(
        (LearnerSpec.make("l1_logistic", "propensity"),
         LearnerSpec.make("random_forest_cls", "propensity", **extra),
         LearnerSpec.make("gbt_cls", "propensity")),
        (LearnerSpec.make("l1_linear", "outcome"),
         LearnerSpec.make("random_forest_reg", "outcome", **extra),
         LearnerSpec.make("gbt_reg", "outcome")),
    )


def oracle_library(p_offset: float = -0.25, b_offset: float = 3.0) -> CandidateLibrary:
    """The true nuisances next to two misspecified constants per side.

    The constants are the training mean and the training mean shifted by
    ``p_offset`` (propensity) or ``b_offset`` (outcome).
    """
    return CandidateLibrary(
        (LearnerSpec.make("oracle_sim", "propensity"),
         LearnerSpec.make("constant", "propensity", label="constant"),
         LearnerSpec.make("constant", "propensity", label="constant_shifted", offset=p_offset)),
        (LearnerSpec.make("oracle_sim", "outcome"),
         LearnerSpec.make("constant", "outcome", label="constant"),
         LearnerSpec.make("constant", "outcome", label="constant_shifted", offset=b_offset)),
    )


DDML_PAIRS = {
    "ddml_l1": ("poly_l1", "poly_l1"),
    "ddml_rf": ("random_forest_cls", "random_forest_reg"),
    "ddml_gbt": ("gbt_cls", "gbt_reg"),
}


def ddml_library(method: str, forest_trees: Optional[int] = None) -> CandidateLibrary:
    if method not in DDML_PAIRS:
        raise ContractError(f"unknown DDML method {method!r}")
    fp, fb = DDML_PAIRS[method]
    extra = {} if forest_trees is None or not fp.startswith("random_forest") else {"n_trees": (int(forest_trees),)}
    return CandidateLibrary((LearnerSpec.make(fp, "propensity", **extra),),
                            (LearnerSpec.make(fb, "outcome", **extra),))


def ddml_config(cfg: RunConfig) -> RunConfig:
    # two vfold splits are two complementary halves
    return replace(cfg, S=2, split_kind="vfold")


def ddml_crossfit(data: Dataset, p_spec: LearnerSpec, b_spec: LearnerSpec, fdef, seed: int,
                  m1: float = 0.01, m2: Optional[float] = None) -> float:
    """Average of the two half-sample estimates with training and validation swapped."""
    from .selector import fit_grid

    if data.n < 4:
        raise ContractError("cross-fitting needs n >= 4")
    splits = make_splits(data.n, 2, "vfold", seed)
    grid = fit_grid(data, CandidateLibrary((p_spec,), (b_spec,)), splits, fdef, seed, m1, m2)
    return final_estimate(grid, 0, 0)


# ---------------------------------------------------------------------------
# synthetic rate-controlled learners


@dataclass(frozen=True, eq=False)
class SyntheticLearnerFamily:
    """Truth plus ``amplitude * direction(x)`` for each member.

    Propensity families perturb the inverse weight 1/pi, so the error on
    the scale entering the estimating equation is exactly proportional to
    the amplitude; outcome families perturb E[Y | A = 1, X] additively.
    """

    role: str
    amplitudes: tuple
    direction: Callable

    def __post_init__(self):
        if self.role not in ("propensity", "outcome"):
            raise ContractError("role must be propensity or outcome")
        if not self.amplitudes:
            raise ContractError("family needs at least one member")

    def predictions(self, x) -> list:
        d = self.direction(x)
        if self.role == "propensity":
            inv = 1.0 / true_propensity(x)
            return [1.0 / (inv + nu * d) for nu in self.amplitudes]
        base = true_outcome(x, 1.0)
        return [{"arm1": base + om * d} for om in self.amplitudes]


def random_direction(rng: np.random.Generator, signed: bool) -> Callable:
    """Random convex combination of the sigmoid features (in [0, 1]; [-1, 1] if signed)."""
    w = rng.dirichlet(np.ones(DIM))
    if signed:
        return lambda x: 2.0 * (sigmoid_features(x) @ w) - 1.0
    return lambda x: sigmoid_features(x) @ w


def default_nu(n: int) -> tuple:
    return (n ** -0.5, 0.3)


def default_omega(n: int) -> tuple:
    return (n ** -0.25, 0.3)


def rate_experiment(n_grid: Sequence[int] = (500, 2000, 8000), reps: int = 200, seed: int = 0,
                    nu: Callable = default_nu, omega: Callable = default_omega, eval_nx: int = 20000,
                    S: int = 3, threads: int = 1) -> dict:
    """Bias of the oracle (and empirical) selectors over synthetic families.

    The functional is the treated-arm counterfactual mean. Per rep, fresh
    directions are drawn, the oracle selectors run on an exact evaluation
    law, and the empirical selectors on a sample of size n. Returns
    ``{n: {"oracle": {criterion: |bias| array}, "empirical": {...}}}``.
    """
    fdef = counterfactual_mean(1)
    out = {}
    for n in n_grid:
        def one(r, n=n):
            rs = derive_seed(seed, "rate", n, r)
            rng = np.random.default_rng(rs)
            fam_p = SyntheticLearnerFamily("propensity", tuple(nu(n)), random_direction(rng, False))
            fam_b = SyntheticLearnerFamily("outcome", tuple(omega(n)), random_direction(rng, True))
            ev, w = conditional_sample(eval_nx, rs)
            pis, bs = fam_p.predictions(ev.x), fam_b.predictions(ev.x)
            psi0 = fdef.psi(true_propensity(ev.x), {"arm1": true_outcome(ev.x, 1.0)}, ev, None, w)
            cells = psi_cells(fdef, pis, bs, ev, None, w)[None]
            surf = pseudo_risk_surface(cells)
            orc = {c: abs(cells[0][select(surf, c)] - psi0) for c in CRITERION_NAMES}
            data = draw(n, rs)
            splits = make_splits(n, S, "vfold", rs)
            vals = np.empty((S, len(pis), len(bs)))
            for s in range(S):
                val = data.subset(splits.validation(s))
                vals[s] = psi_cells(fdef, fam_p.predictions(val.x), fam_b.predictions(val.x), val)
            esurf = pseudo_risk_surface(vals)
            emp = {c: abs(final_estimate(vals, *select(esurf, c)) - true_psi("counterfactual_mean", 1))
                   for c in CRITERION_NAMES}
            return orc, emp

        rows = _map(one, range(reps), threads)
        out[n] = {
            "oracle": {c: np.array([r[0][c] for r in rows]) for c in CRITERION_NAMES},
            "empirical": {c: np.array([r[1][c] for r in rows]) for c in CRITERION_NAMES},
        }
    return out


def excess_risk_experiment(n: int = 1000, reps: int = 200, seed: int = 0, lib: Optional[CandidateLibrary] = None,
                           functional: str = "ate", S: int = 3, eval_nx: int = 5000, threads: int = 1,
                           m1: float = 0.01) -> dict:
    """Oracle pseudo-risk of the empirically selected pair relative to the oracle minimum.

    Returns ``{criterion: ratios}`` with ratio
    ``B*(k_hat, l_hat) / (min B* + 1e-8)`` per rep; failed reps are NaN.
    """
    from .selector import fit_grid

    lib = lib or ml_library()
    fdef = get_functional(functional)

    def one(r):
        rs = derive_seed(seed, "excess", n, r)
        data = draw(n, rs)
        try:
            grid = fit_grid(data, lib, make_splits(n, S, "vfold", rs), fdef, rs, m1, keep_fits=True)
        except EstimationError:
            return {c: math.nan for c in CRITERION_NAMES}
        surf = pseudo_risk_surface(grid)
        ev, w = conditional_sample(eval_nx, rs)
        orc = oracle_select(grid, ev, fdef, w)
        res = {}
        for c in CRITERION_NAMES:
            m = orc.surface.matrix(c)
            res[c] = float(m[select(surf, c)] / (m.min() + 1e-8))
        return res

    rows = _map(one, range(reps), threads)
    return {c: np.array([r[c] for r in rows]) for c in CRITERION_NAMES}


def _map(fn, items, threads):
    items = list(items)
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# experiment runner (table1.csv / table2.csv)

METHODS = ("minimax", "mixed_minimax", "ddml_l1", "ddml_rf", "ddml_gbt")


@dataclass(frozen=True)
class ExperimentPlan:
    n_values: tuple = (500,)
    reps: int = 200
    seed: int = 0
    methods: tuple = METHODS
    functional: str = "ate"
    S: int = 3
    M1: float = 0.01
    bootstrap_reps: int = 0
    tau: float = math.log(9.0)
    level: float = 0.95
    bootstrap_retune: bool = False
    forest_trees: Optional[int] = None
    threads: int = 1
    max_failure_rate: float = 0.05

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ContractError(f"unknown methods {sorted(unknown)}; choose from {', '.join(METHODS)}")
        if self.reps < 1:
            raise ContractError("reps must be >= 1")
        if self.functional not in ("ate", "counterfactual_mean"):
            raise ContractError("experiments support ate and counterfactual_mean")


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    truth: float
    # (method, n) -> list of per-rep dicts: {"psi", "lo", "hi"} or {"error"}
    runs: dict = field(default_factory=dict)

    def estimates(self, method: str, n: int) -> np.ndarray:
        return np.array([r["psi"] for r in self.runs[(method, n)] if "psi" in r])

    def failures(self, method: str, n: int) -> int:
        return sum(1 for r in self.runs[(method, n)] if "error" in r)

    def table1(self) -> list:
        rows = []
        for n in self.plan.n_values:
            base = None
            if "mixed_minimax" in self.plan.methods:
                base = float(np.mean(np.abs(self.estimates("mixed_minimax", n) - self.truth)))
            for m in self.plan.methods:
                est = self.estimates(m, n)
                bias = est - self.truth
                mab = float(np.mean(np.abs(bias))) if est.size else math.nan
                mb = float(np.mean(bias)) if est.size else math.nan
                rows.append({
                    "method": m, "n": n, "mean_bias": mb, "mean_abs_bias": mab,
                    "rel_abs_bias": mab / base if base else math.nan,
                    "median_abs_bias": float(np.median(np.abs(bias))) if est.size else math.nan,
                    "failures": self.failures(m, n),
                })
        return rows

    def table2(self) -> list:
        rows = []
        for n in self.plan.n_values:
            for m in self.plan.methods:
                runs = [r for r in self.runs[(m, n)] if "lo" in r]
                if not runs:
                    continue
                lo = np.array([r["lo"] for r in runs])
                hi = np.array([r["hi"] for r in runs])
                left = float(np.mean(self.truth < lo))
                right = float(np.mean(self.truth > hi))
                rows.append({"method": m, "n": n, "L": left, "U": right, "W": float(np.mean(hi - lo)),
                             "C": 1.0 - left - right, "reps": len(runs)})
        return rows


def _method_cfg(plan: ExperimentPlan, seed: int) -> RunConfig:
    return RunConfig(functional=plan.functional, S=plan.S, seed=seed, M1=plan.M1, tau=plan.tau,
                     bootstrap_reps=plan.bootstrap_reps, level=plan.level,
                     bootstrap_retune=plan.bootstrap_retune)


def run_rep(plan: ExperimentPlan, n: int, r: int) -> dict:
    """All methods on one simulated dataset; returns ``{method: record}``."""
    from .inference import estimate

    rs = derive_seed(plan.seed, "experiment", n, r)
    data = draw(n, rs)
    fdef = get_functional(plan.functional)
    cfg = _method_cfg(plan, rs)
    out = {}
    sel = [m for m in plan.methods if m in CRITERION_NAMES]
    if sel:
        cfg_sel = replace(cfg, criterion="both")
        try:
            rep = estimate(data, ml_library(plan.forest_trees), fdef, cfg_sel)
            for m in sel:
                cr = rep.criteria[m]
                rec = {"psi": cr.estimate, "psi_tau": cr.smooth.psi_tau, "pair": list(cr.selected)}
                if cr.ci is not None:
                    rec.update(lo=cr.ci.lo, hi=cr.ci.hi)
                out[m] = rec
        except EstimationError as exc:
            for m in sel:
                out[m] = {"error": str(exc)}
    for m in plan.methods:
        if m in CRITERION_NAMES:
            continue
        try:
            rep = estimate(data, ddml_library(m, plan.forest_trees), fdef,
                           replace(ddml_config(cfg), criterion="minimax"))
            cr = rep.criteria["minimax"]
            rec = {"psi": cr.estimate}
            if cr.ci is not None:
                rec.update(lo=cr.ci.lo, hi=cr.ci.hi)
            out[m] = rec
        except EstimationError as exc:
            out[m] = {"error": str(exc)}
    return out


def run_experiment(plan: ExperimentPlan, out_dir: Optional[str] = None) -> ExperimentResult:
    """Run every (n, rep) and tabulate; tables are written before a failure-rate error is raised."""
    truth = true_psi(plan.functional)
    res = ExperimentResult(plan, truth)
    for n in plan.n_values:
        rows = _map(lambda r: run_rep(plan, n, r), range(plan.reps), plan.threads)
        for m in plan.methods:
            res.runs[(m, n)] = [row[m] for row in rows]
    if out_dir is not None:
        write_tables(res, out_dir)
    for (m, n), runs in res.runs.items():
        bad = sum(1 for r in runs if "error" in r)
        if bad > plan.max_failure_rate * len(runs):
            raise ExperimentError(f"{m} at n={n}: {bad} of {len(runs)} reps failed")
    return res


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


T1_COLUMNS = ("method", "n", "mean_bias", "mean_abs_bias", "rel_abs_bias", "median_abs_bias", "failures")
T2_COLUMNS = ("method", "n", "L", "U", "W", "C", "reps")


def write_tables(res: ExperimentResult, out_dir: str) -> dict:
    from .cli import dump_json

    os.makedirs(out_dir, exist_ok=True)
    t1, t2 = res.table1(), res.table2()
    _write_csv(os.path.join(out_dir, "table1.csv"), t1, T1_COLUMNS)
    _write_csv(os.path.join(out_dir, "table2.csv"), t2, T2_COLUMNS)
    payload = {
        "truth": res.truth,
        "table1": t1,
        "table2": t2,
        "runs": {f"{m}@{n}": runs for (m, n), runs in res.runs.items()},
    }
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        fh.write(dump_json(payload))
    return payload


__all__ = [
    "DgpSpec", "ExperimentPlan", "ExperimentResult", "SyntheticLearnerFamily", "conditional_sample",
    "ddml_crossfit", "draw", "excess_risk_experiment", "generate", "ml_library", "monte_carlo_truth",
    "oracle_library", "rate_experiment", "run_experiment", "true_outcome", "true_propensity", "true_psi",
]
