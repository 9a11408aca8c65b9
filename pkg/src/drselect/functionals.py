"""Doubly robust functionals of the bilinear H-class and the mixed-bias plugin.

Every built-in has influence function ``H(p, b) - psi`` with::

    H(p, b) = b(X) p(X) h1(O) + b(X) h2(O) + p(X) h3(O) + h4(O)

Learners always emit probabilities ``pi(X) = P(A = 1 | X)``; each term
declares how ``pi`` maps into its ``p`` (``raw``: p = pi, ``inverse``:
p = 1/pi, ``inverse_complement``: p = 1/(1 - pi), ``mnar_odds``:
p = (1 - pi) / (pi * tilt) with tilt = E[exp(-alpha Y) | A = 1, X]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.optimize import brentq

from .core import Dataset
from .errors import ContractError, EvaluationError, RootFindingError
from .learners import LearnerSpec, OutcomeTarget

P_MAPS = ("raw", "inverse", "inverse_complement", "mnar_odds")


@dataclass(frozen=True)
class Term:
    sign: float
    h: Callable  # (a, y) -> (h1, h2, h3, h4)
    p_map: str
    target: str


@dataclass(frozen=True)
class FunctionalDef:
    name: str
    terms: tuple
    outcome_targets: tuple  # OutcomeTarget, fitted by every outcome learner
    aux_targets: tuple = ()  # OutcomeTarget, fitted once per split by a fixed learner
    reads_y: str = "all"  # rows whose Y must be finite: "all" or "treated"
    alpha: Optional[float] = None

    def __post_init__(self):
        for t in self.terms:
            if t.p_map not in P_MAPS:
                raise ContractError(f"unknown p mapping {t.p_map!r}")

    def check_data(self, data: Dataset):
        rows = data.a == 1.0 if self.reads_y == "treated" else np.ones(data.n, dtype=bool)
        if not np.all(np.isfinite(data.y[rows])):
            bad = int(np.flatnonzero(rows & ~np.isfinite(data.y))[0])
            raise EvaluationError(f"{self.name}: outcome is missing in row {bad + 1}")

    # -- estimation ----------------------------------------------------------

    def h_values(self, pi, b: Mapping, a, y, aux: Optional[Mapping] = None) -> np.ndarray:
        """Per-observation H for probabilities ``pi`` and outcome predictions ``b``."""
        return h_values(self, pi, b, a, y, aux)

    def psi(self, pi, b: Mapping, data: Dataset, aux=None, weights=None) -> float:
        return estimate_psi(self, pi, b, data, aux, weights)


def _clean_y(a, y):
    # A * Y must vanish where Y is unobserved
    return np.where(np.isfinite(y), y, 0.0)


def _map_p(p_map, pi, aux):
    if p_map == "raw":
        return pi
    if p_map == "inverse":
        return 1.0 / pi
    if p_map == "inverse_complement":
        return 1.0 / (1.0 - pi)
    tilt = aux["tilt"] if aux is not None and "tilt" in aux else 1.0
    return (1.0 - pi) / (pi * np.maximum(tilt, 1e-6))


def h_values(fdef: FunctionalDef, pi, b: Mapping, a, y, aux=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    y = _clean_y(a, np.asarray(y, dtype=np.float64))
    pi = np.asarray(pi, dtype=np.float64)
    total = np.zeros(np.broadcast(a, pi).shape)
    for term in fdef.terms:
        h1, h2, h3, h4 = term.h(a, y)
        p = _map_p(term.p_map, pi, aux)
        bt = np.asarray(b[term.target], dtype=np.float64)
        parts = (bt * p * h1, bt * h2, p * h3, np.broadcast_to(h4, total.shape))
        for name, part in zip(("b*p*h1", "b*h2", "p*h3", "h4"), parts):
            if not np.all(np.isfinite(part)):
                raise EvaluationError(f"{fdef.name}: non-finite {name} term")
        total = total + term.sign * (parts[0] + parts[1] + parts[2] + parts[3])
    return total


def h_transform(fdef: FunctionalDef, pi: float, b, a: float, y: float, aux=None) -> float:
    """H for a single observation; ``b`` is a scalar or a mapping per outcome target."""
    if not isinstance(b, Mapping):
        b = {t.target: b for t in fdef.terms}
    b = {k: np.atleast_1d(v) for k, v in b.items()}
    aux = None if aux is None else {k: np.atleast_1d(v) for k, v in aux.items()}
    return float(h_values(fdef, np.atleast_1d(pi), b, np.atleast_1d(a), np.atleast_1d(y), aux)[0])


def estimate_psi(fdef: FunctionalDef, pi, b: Mapping, data: Dataset, aux=None, weights=None) -> float:
    """Root of the validation estimating equation: the (weighted) mean of H."""
    if data.n == 0:
        raise ContractError("empty validation set")
    h = h_values(fdef, pi, b, data.a, data.y, aux)
    if weights is None:
        return float(np.mean(h))
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(w, h) / w.sum())


# ---------------------------------------------------------------------------
# catalog

def _h_product(a, y):
    return -1.0, a, y, 0.0


def _h_cond_cov(a, y):
    return 1.0, -a, -y, a * y


def _h_mar(a, y):
    return -a, 1.0, a * y, 0.0


def _h_mar_control(a, y):
    return -(1.0 - a), 1.0, (1.0 - a) * y, 0.0


def _h_mnar(alpha):
    def h(a, y):
        t = np.exp(-alpha * y)
        return -a * t, 1.0 - a, a * y * t, a * y
    return h


ALL = OutcomeTarget("all")
ARM1 = OutcomeTarget("arm1", arm=1)
ARM0 = OutcomeTarget("arm0", arm=0)


def expected_product() -> FunctionalDef:
    return FunctionalDef("expected_product", (Term(1.0, _h_product, "raw", "all"),), (ALL,))


def expected_cond_cov() -> FunctionalDef:
    return FunctionalDef("expected_cond_cov", (Term(1.0, _h_cond_cov, "raw", "all"),), (ALL,))


def mar_mean() -> FunctionalDef:
    return FunctionalDef("mar_mean", (Term(1.0, _h_mar, "inverse", "arm1"),), (ARM1,), reads_y="treated")


def counterfactual_mean(arm: int = 1) -> FunctionalDef:
    if arm == 1:
        return FunctionalDef("counterfactual_mean_1", (Term(1.0, _h_mar, "inverse", "arm1"),), (ARM1,))
    if arm == 0:
        return FunctionalDef("counterfactual_mean_0", (Term(1.0, _h_mar_control, "inverse_complement", "arm0"),),
                             (ARM0,))
    raise ContractError("arm must be 0 or 1")


def ate() -> FunctionalDef:
    return FunctionalDef(
        "ate",
        (Term(1.0, _h_mar, "inverse", "arm1"), Term(-1.0, _h_mar_control, "inverse_complement", "arm0")),
        (ARM1, ARM0),
    )


def mnar_mean(alpha: float) -> FunctionalDef:
    if alpha is None or not math.isfinite(alpha):
        raise ContractError("mnar_mean needs a finite alpha")
    return FunctionalDef(
        "mnar_mean",
        (Term(1.0, _h_mnar(alpha), "mnar_odds", "mnar"),),
        (OutcomeTarget("mnar", arm=1, mode="tilted_mean", alpha=alpha),),
        aux_targets=(OutcomeTarget("tilt", arm=1, mode="tilt", alpha=alpha),),
        reads_y="treated",
        alpha=alpha,
    )


AUX_LEARNER = LearnerSpec("l1_linear", "outcome", label="aux_l1_linear")

NAMES = ("ate", "mar_mean", "expected_cond_cov", "expected_product", "mnar_mean", "counterfactual_mean")


def get_functional(name: str, *, alpha: Optional[float] = None, arm: int = 1) -> FunctionalDef:
    if name == "ate":
        return ate()
    if name == "mar_mean":
        return mar_mean()
    if name == "expected_cond_cov":
        return expected_cond_cov()
    if name == "expected_product":
        return expected_product()
    if name == "mnar_mean":
        if alpha is None:
            raise ContractError("mnar_mean requires mnar.alpha")
        return mnar_mean(alpha)
    if name == "counterfactual_mean":
        return counterfactual_mean(arm)
    raise ContractError(f"unknown functional {name!r}; choose from {', '.join(NAMES)}")


# ---------------------------------------------------------------------------
# mixed-bias class


@dataclass(frozen=True)
class MixedBiasPlugin:
    """Influence function with the mixed bias property, solved numerically.

    ``if_eval(c, d, data, psi)`` returns per-observation IF values given the
    propensity-role predictions ``c`` and outcome-role predictions ``d``
    (a mapping keyed by ``d_target.name``). When ``psi_slope`` is set the IF
    is affine in psi and the root is taken in closed form.
    """

    if_eval: Callable
    psi_slope: Optional[float] = None
    d_target: OutcomeTarget = ALL
    c_learner_role: str = "propensity"
    d_learner_role: str = "outcome"
    bracket: Optional[tuple] = None
    name: str = "mixed_bias"
    aux_targets: tuple = ()

    @property
    def outcome_targets(self) -> tuple:
        return (self.d_target,)

    def check_data(self, data: Dataset):
        pass

    def psi(self, pi, b: Mapping, data: Dataset, aux=None, weights=None) -> float:
        return solve_mixed_bias(self, pi, b, data, weights)


def solve_mixed_bias(plugin: MixedBiasPlugin, c, d, data: Dataset, weights=None, tol: float = 1e-10) -> float:
    """Root in psi of the validation mean of ``plugin.if_eval``."""
    if weights is None:
        mean = lambda v: float(np.mean(v))  # noqa: E731
    else:
        w = np.asarray(weights, dtype=np.float64)
        mean = lambda v: float(np.dot(w, v) / w.sum())  # noqa: E731

    def g(psi):
        v = np.asarray(plugin.if_eval(c, d, data, psi), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise EvaluationError(f"{plugin.name}: non-finite influence function at psi={psi}")
        return mean(v)

    if plugin.psi_slope is not None:
        if plugin.psi_slope == 0:
            raise ContractError("psi_slope must be non-zero")
        return -g(0.0) / plugin.psi_slope
    if plugin.bracket is not None:
        lo, hi = map(float, plugin.bracket)
    else:
        v0 = np.asarray(plugin.if_eval(c, d, data, 0.0), dtype=np.float64)
        centre, spread = mean(v0), float(np.std(v0)) or 1.0
        lo, hi = centre - 10 * spread, centre + 10 * spread
    g_lo, g_hi = g(lo), g(hi)
    for _ in range(60):
        if g_lo == 0.0:
            return lo
        if g_hi == 0.0:
            return hi
        if np.sign(g_lo) != np.sign(g_hi):
            return float(brentq(g, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500))
        width = hi - lo
        lo, hi = lo - width, hi + width
        g_lo, g_hi = g(lo), g(hi)
    raise RootFindingError(f"{plugin.name}: no sign change after 60 bracket expansions")
