"""Candidate nuisance learners behind one fit/predict interface.

Every family is implemented here (numba kernels in ``_linear`` and
``_trees``); tuning grids are resolved by K-fold cross-validation with
squared-error loss for regression and log-loss for classification.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from ..core import Dataset, derive_seed, truncate_propensity
from ..errors import ConfigError, FitError
from . import _linear, _trees

LAMBDA_GRID = tuple(10.0 ** k for k in range(-2, 11))

# family -> (task, default grid, inner cv folds)
#   task "cls": binary response, probability output
#   task "reg": real response
#   task "any": follows the role / response type
FAMILIES = {
    "l1_logistic": ("cls", {"lambda": LAMBDA_GRID}, 10),
    "l1_linear": ("reg", {"lambda": LAMBDA_GRID}, 10),
    "poly_l1": ("any", {"lambda": LAMBDA_GRID, "degree": (5,)}, 10),
    "random_forest_cls": ("cls", {"n_trees": (500,), "min_node_size": (1,), "mtry": (0,), "max_bins": (64,)}, 5),
    "random_forest_reg": ("reg", {"n_trees": (500,), "min_node_size": (5,), "mtry": (0,), "max_bins": (64,)}, 5),
    "gbt_cls": ("cls", {"n_trees": (100, 300), "depth": (1, 2, 3, 4), "shrinkage": (0.001, 0.01, 0.1),
                        "min_leaf": (10,), "max_bins": (64,)}, 4),
    "gbt_reg": ("reg", {"n_trees": (100, 300), "depth": (1, 2, 3, 4), "shrinkage": (0.001, 0.01, 0.1),
                        "min_leaf": (10,), "max_bins": (64,)}, 4),
    "constant": ("any", {"offset": (0.0,)}, 0),
    "oracle_sim": ("any", {}, 0),
}
ROLES = ("propensity", "outcome")


@dataclass(frozen=True)
class LearnerSpec:
    family: str
    role: str
    tuning: tuple = ()  # ((name, (values...)), ...) in declaration order
    label: str = ""
    folds: Optional[int] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown learner family {self.family!r}")
        if self.role not in ROLES:
            raise ConfigError(f"unknown learner role {self.role!r}")
        task = FAMILIES[self.family][0]
        if task == "reg" and self.role == "propensity":
            raise ConfigError(f"{self.family} is a regression family; it cannot model a propensity")
        grid = dict(FAMILIES[self.family][1])
        for name, values in self.tuning:
            if name not in grid:
                raise ConfigError(f"{self.family} has no tuning parameter {name!r}")
            values = tuple(values)
            if not values:
                raise ConfigError(f"empty grid for {self.family}.{name}")
            grid[name] = values
        object.__setattr__(self, "tuning", tuple(grid.items()))
        if not self.label:
            object.__setattr__(self, "label", self.family)

    @classmethod
    def make(cls, family: str, role: str, label: str = "", **grid) -> "LearnerSpec":
        tuning = tuple((k, tuple(v) if isinstance(v, (list, tuple)) else (v,)) for k, v in grid.items())
        return cls(family, role, tuning, label)

    @property
    def grid(self) -> dict:
        return dict(self.tuning)

    @property
    def n_folds(self) -> int:
        return self.folds if self.folds is not None else FAMILIES[self.family][2]

    def grid_points(self) -> list:
        names = [k for k, _ in self.tuning]
        return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in self.tuning))]

    def key(self) -> str:
        """Identity used for seeding; identical specs get identical fits."""
        return f"{self.family}|{self.role}|{self.tuning!r}"


@dataclass(frozen=True)
class OutcomeTarget:
    """What an outcome learner estimates.

    ``mode``: ``mean`` is E[Y | X] on the selected rows; ``tilted_mean`` is
    E[Y e^{-alpha Y} | X] / E[e^{-alpha Y} | X]; ``tilt`` is E[e^{-alpha Y} | X].
    """

    name: str
    arm: Optional[int] = None
    mode: str = "mean"
    alpha: float = 0.0


@dataclass(frozen=True)
class Provenance:
    label: str
    split: Optional[int]
    tuning: tuple
    fallback: bool = False
    notes: tuple = ()


# ---------------------------------------------------------------------------
# fitted models (pure predict)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _poly(x, degree):
    if degree <= 1:
        return x
    return np.hstack([x ** k for k in range(1, degree + 1)])


@dataclass(frozen=True, eq=False)
class ConstantModel:
    value: float

    def predict(self, x):
        return np.full(np.asarray(x).shape[0], self.value)


@dataclass(frozen=True, eq=False)
class LinearModel:
    intercept: float
    coef: np.ndarray
    degree: int = 1
    logistic: bool = False

    def predict(self, x):
        z = self.intercept + _poly(np.asarray(x, dtype=np.float64), self.degree) @ self.coef
        return _sigmoid(z) if self.logistic else z


@dataclass(frozen=True, eq=False)
class TreeEnsembleModel:
    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    value: np.ndarray
    offsets: np.ndarray
    scale: float
    init: float
    logistic: bool = False

    def predict(self, x):
        z = _trees.predict_ensemble(np.ascontiguousarray(x, dtype=np.float64), self.feat, self.thr,
                                    self.left, self.value, self.offsets, self.scale, self.init)
        return _sigmoid(z) if self.logistic else z


@dataclass(frozen=True, eq=False)
class FunctionModel:
    fn: object

    def predict(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class RatioModel:
    num: object
    den: object
    floor: float = 1e-6

    def predict(self, x):
        return self.num.predict(x) / np.maximum(self.den.predict(x), self.floor)


@dataclass(frozen=True, eq=False)
class FittedNuisance:
    """A fitted propensity or outcome model.

    Propensity predictions are clamped to ``[m1, 1 - m1]``; outcome
    predictions are clipped to ``[-m2, m2]`` when ``m2`` is set.
    """

    kind: str
    model: object
    provenance: Provenance
    arm: Optional[int] = None
    m1: Optional[float] = None
    m2: Optional[float] = None

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        out = self.model.predict(x)
        if self.kind == "propensity":
            return truncate_propensity(out, self.m1 if self.m1 is not None else 1e-12)
        if self.m2 is not None:
            out = np.clip(out, -self.m2, self.m2)
        return out


# ---------------------------------------------------------------------------
# per-family fitting at a fixed tuning point


def _is_binary(y):
    return bool(np.all((y == 0.0) | (y == 1.0)))


def _task(spec: LearnerSpec, y) -> str:
    task = FAMILIES[spec.family][0]
    if task == "any":
        return "cls" if spec.role == "propensity" else "reg"
    return task


def _standardize(z):
    mu = z.mean(axis=0)
    sd = z.std(axis=0)
    keep = sd > 1e-12 * (1.0 + np.abs(mu))
    sd_safe = np.where(keep, sd, 1.0)
    zs = (z - mu) / sd_safe
    zs[:, ~keep] = 0.0
    return np.ascontiguousarray(zs), mu, sd_safe, keep


def _l1_path(z, y, lambdas, cls: bool):
    """Standardized fit over descending ``lambdas``; returns (intercepts, coefs) on raw scale."""
    zs, mu, sd, keep = _standardize(z)
    if cls:
        b0s, betas = _linear.logistic_path(zs, np.ascontiguousarray(y, dtype=np.float64), lambdas)
    else:
        ybar = y.mean()
        betas = _linear.lasso_path(zs, np.ascontiguousarray(y - ybar), lambdas)
        b0s = np.full(lambdas.shape[0], ybar)
    coefs = np.where(keep, betas / sd, 0.0)
    intercepts = b0s - coefs @ mu
    return intercepts, coefs


def _fit_l1(point, x, y, cls):
    degree = int(point.get("degree", 1))
    lam = np.array([float(point["lambda"])])
    b0, coef = _l1_path(_poly(x, degree), y, lam, cls)
    return LinearModel(float(b0[0]), coef[0], degree, cls)


def _resolve_mtry(m, d):
    m = int(m)
    return max(1, min(d, m if m > 0 else math.ceil(math.sqrt(d))))


def _fit_forest(point, x, y, seed):
    edges, n_edges = _trees.make_edges(x, int(point["max_bins"]))
    codes = _trees.bin_codes(x, edges, n_edges)
    n_trees = int(point["n_trees"])
    feat, thr, left, value, offsets = _trees.forest_fit(
        codes, np.ascontiguousarray(y, dtype=np.float64), edges, n_edges, n_trees,
        _resolve_mtry(point["mtry"], x.shape[1]), int(point["min_node_size"]), seed % (2 ** 32))
    return TreeEnsembleModel(feat, thr, left, value, offsets, 1.0 / n_trees, 0.0, False)


_EMPTY_X = np.zeros((0, 1))
_EMPTY_Y = np.zeros(0)


def _gbt_run(point, x, y, cls, n_trees, x_val=None, y_val=None, checkpoints=None):
    edges, n_edges = _trees.make_edges(x, int(point["max_bins"]))
    codes = _trees.bin_codes(x, edges, n_edges)
    if x_val is None:
        x_val = np.zeros((0, x.shape[1]))
        y_val = _EMPTY_Y
        checkpoints = np.zeros(0, dtype=np.int64)
    return _trees.gbt_fit(codes, np.ascontiguousarray(y, dtype=np.float64), edges, n_edges, int(n_trees),
                          int(point["depth"]), float(point["shrinkage"]), int(point["min_leaf"]),
                          _trees.LOSS_LOGISTIC if cls else _trees.LOSS_SQUARED,
                          np.ascontiguousarray(x_val, dtype=np.float64),
                          np.ascontiguousarray(y_val, dtype=np.float64), checkpoints)


def _fit_gbt(point, x, y, cls):
    feat, thr, left, value, offsets, init, _ = _gbt_run(point, x, y, cls, point["n_trees"])
    return TreeEnsembleModel(feat, thr, left, value, offsets, 1.0, init, cls)


def _oracle_model(spec: LearnerSpec, target: Optional[OutcomeTarget]):
    from ..simulation import true_outcome, true_propensity

    if spec.role == "propensity":
        return FunctionModel(true_propensity)
    if target is None or target.mode != "mean":
        raise FitError("oracle_sim only knows conditional means of the simulation design")
    if target.arm is None:
        return FunctionModel(lambda x: true_propensity(x) * true_outcome(x, 1)
                             + (1 - true_propensity(x)) * true_outcome(x, 0))
    arm = target.arm
    return FunctionModel(lambda x: true_outcome(x, arm))


def fit_model(spec: LearnerSpec, x, y, seed: int, point: Optional[Mapping] = None,
              target: Optional[OutcomeTarget] = None):
    """Fit ``spec`` at ``point`` (tuned by CV when omitted).

    Returns ``(model, point, notes, fallback)``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    notes = []
    if spec.family == "oracle_sim":
        return _oracle_model(spec, target), {}, (), False
    if x.shape[0] == 0:
        raise FitError(f"{spec.label}: empty training set")
    if not np.all(np.isfinite(y)):
        raise FitError(f"{spec.label}: non-finite training response")
    task = _task(spec, y)
    if task == "cls" and not _is_binary(y):
        raise FitError(f"{spec.label}: classification family needs a 0/1 response")
    if spec.family == "constant":
        point = spec.grid_points()[0]
        return ConstantModel(float(y.mean()) + float(point["offset"])), point, (), False
    if task == "cls" and (y.min() == y.max()):
        return ConstantModel(float(y.mean())), {}, ("degenerate response: constant fallback",), True
    if point is None:
        point, tune_notes = cv_tune(spec, x, y, seed)
        notes.extend(tune_notes)
    cls = task == "cls"
    if spec.family in ("l1_logistic", "l1_linear", "poly_l1"):
        model = _fit_l1(point, x, y, cls)
    elif spec.family.startswith("random_forest"):
        model = _fit_forest(point, x, y, seed)
    elif spec.family.startswith("gbt"):
        model = _fit_gbt(point, x, y, cls)
    else:  # pragma: no cover - guarded by LearnerSpec
        raise FitError(f"unhandled family {spec.family}")
    return model, dict(point), tuple(notes), False


# ---------------------------------------------------------------------------
# inner cross-validation


def _loss(pred, y, cls):
    if cls:
        p = np.clip(pred, 1e-15, 1 - 1e-15)
        return -(y * np.log(p) + (1 - y) * np.log(1 - p))
    return (y - pred) ** 2


def _folds(n, k, seed):
    perm = np.random.default_rng(derive_seed(seed, "inner-cv", n, k)).permutation(n)
    return np.array_split(perm, k)


def cv_loss_table(spec: LearnerSpec, x, y, seed: int) -> tuple:
    """Pooled held-out loss for every grid point (declaration order)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    points = spec.grid_points()
    n = x.shape[0]
    notes = []
    k = spec.n_folds
    if n < k:
        notes.append(f"fold count reduced from {k} to {n}")
        k = n
    cls = _task(spec, y) == "cls"
    folds = _folds(n, k, seed)
    total = np.zeros(len(points))
    if spec.family in ("l1_logistic", "l1_linear", "poly_l1"):
        _cv_l1(spec, points, x, y, folds, cls, total)
    elif spec.family.startswith("gbt"):
        _cv_gbt(spec, points, x, y, folds, cls, total)
    else:
        _cv_generic(spec, points, x, y, folds, cls, total, seed)
    return points, total / n, tuple(notes)


def _train_mask(n, fold):
    m = np.ones(n, dtype=bool)
    m[fold] = False
    return m


def _cv_l1(spec, points, x, y, folds, cls, total):
    by_degree = {}
    for i, p in enumerate(points):
        by_degree.setdefault(int(p.get("degree", 1)), []).append(i)
    for degree, members in by_degree.items():
        z = _poly(x, degree)
        lams = np.array([float(points[i]["lambda"]) for i in members])
        order = np.argsort(-lams, kind="stable")
        for fold in folds:
            tr = _train_mask(x.shape[0], fold)
            ytr = y[tr]
            if cls and ytr.min() == ytr.max():
                pred = np.full(fold.size, ytr.mean())
                for i in members:
                    total[i] += _loss(pred, y[fold], cls).sum()
                continue
            b0, coef = _l1_path(z[tr], ytr, lams[order], cls)
            for j, oi in enumerate(order):
                eta = b0[j] + z[fold] @ coef[j]
                pred = _sigmoid(eta) if cls else eta
                total[members[oi]] += _loss(pred, y[fold], cls).sum()


def _cv_gbt(spec, points, x, y, folds, cls, total):
    groups = {}
    for i, p in enumerate(points):
        key = tuple((k, v) for k, v in p.items() if k != "n_trees")
        groups.setdefault(key, []).append(i)
    for key, members in groups.items():
        base = dict(key)
        counts = sorted({int(points[i]["n_trees"]) for i in members})
        checkpoints = np.array(counts, dtype=np.int64)
        for fold in folds:
            tr = _train_mask(x.shape[0], fold)
            ytr = y[tr]
            if cls and ytr.min() == ytr.max():
                pred = np.full(fold.size, ytr.mean())
                for i in members:
                    total[i] += _loss(pred, y[fold], cls).sum()
                continue
            losses = _gbt_run(base, x[tr], ytr, cls, counts[-1], x[fold], y[fold], checkpoints)[-1]
            for i in members:
                total[i] += losses[counts.index(int(points[i]["n_trees"]))]


def _cv_generic(spec, points, x, y, folds, cls, total, seed):
    for i, p in enumerate(points):
        for f, fold in enumerate(folds):
            tr = _train_mask(x.shape[0], fold)
            model, _, _, _ = fit_model(spec, x[tr], y[tr], derive_seed(seed, "cv-fit", f), point=p)
            total[i] += _loss(model.predict(x[fold]), y[fold], cls).sum()


def cv_tune(spec: LearnerSpec, x, y, seed: int) -> tuple:
    """Grid point with the smallest pooled CV loss; ties go to the first point.

    Returns ``(point, notes)``.
    """
    points = spec.grid_points()
    if len(points) == 1:
        return points[0], ()
    points, losses, notes = cv_loss_table(spec, x, y, seed)
    best = int(np.argmin(losses))
    return points[best], notes


# ---------------------------------------------------------------------------
# high-level fit against a dataset view


def _target_rows(train: Dataset, target: OutcomeTarget):
    if target.arm is None:
        return np.ones(train.n, dtype=bool)
    return train.a == float(target.arm)


def fit(spec: LearnerSpec, train: Dataset, seed: int, *, target: Optional[OutcomeTarget] = None,
        m1: float = 0.01, m2: Optional[float] = None, point: Optional[Mapping] = None,
        split: Optional[int] = None) -> FittedNuisance:
    """Fit one nuisance on a training view.

    Propensity learners model A on all rows. Outcome learners model the
    requested ``target`` (default: E[Y | X] on all rows).
    """
    if spec.role == "propensity":
        model, pt, notes, fb = fit_model(spec, train.x, train.a, seed, point)
        return FittedNuisance("propensity", model, Provenance(spec.label, split, tuple(pt.items()), fb, notes),
                              None, m1, None)
    target = target or OutcomeTarget("all")
    rows = _target_rows(train, target)
    if rows.sum() < 2:
        raise FitError(f"{spec.label}: fewer than 2 training rows with A={target.arm}")
    x = train.x[rows]
    y = train.y[rows]
    if not np.all(np.isfinite(y)):
        raise FitError(f"{spec.label}: non-finite outcomes among rows used for target {target.name!r}")
    if target.mode == "mean":
        model, pt, notes, fb = fit_model(spec, x, y, seed, point, target)
    elif target.mode == "tilt":
        model, pt, notes, fb = fit_model(spec, x, np.exp(-target.alpha * y), seed, point, target)
    elif target.mode == "tilted_mean":
        w = np.exp(-target.alpha * y)
        num, pt, n1, fb1 = fit_model(spec, x, y * w, derive_seed(seed, "num"), point, target)
        den, _, n2, fb2 = fit_model(spec, x, w, derive_seed(seed, "den"), point, target)
        model, notes, fb = RatioModel(num, den), n1 + n2, fb1 or fb2
    else:
        raise FitError(f"unknown target mode {target.mode!r}")
    return FittedNuisance("outcome", model, Provenance(spec.label, split, tuple(pt.items()), fb, notes),
                          target.arm, None, m2)


def default_ml_library() -> tuple:
    """The three-by-three machine-learning library of the simulation study."""
    props = (LearnerSpec("l1_logistic", "propensity", label="l1_logistic"),
             LearnerSpec("random_forest_cls", "propensity", label="random_forest_cls"),
             LearnerSpec("gbt_cls", "propensity", label="gbt_cls"))
    outs = (LearnerSpec("l1_linear", "outcome", label="l1_linear"),
            LearnerSpec("random_forest_reg", "outcome", label="random_forest_reg"),
            LearnerSpec("gbt_reg", "outcome", label="gbt_reg"))
    return props, outs


@dataclass(frozen=True)
class CandidateLibrary:
    propensity: tuple
    outcome: tuple

    def __post_init__(self):
        if not self.propensity or not self.outcome:
            raise ConfigError("library needs at least one learner per role")
        for s in self.propensity:
            if s.role != "propensity":
                raise ConfigError(f"{s.label} is not a propensity learner")
        for s in self.outcome:
            if s.role != "outcome":
                raise ConfigError(f"{s.label} is not an outcome learner")

    @property
    def K(self) -> int:
        return len(self.propensity)

    @property
    def L(self) -> int:
        return len(self.outcome)

    @classmethod
    def ml_default(cls) -> "CandidateLibrary":
        return cls(*default_ml_library())


__all__ = [
    "CandidateLibrary", "FAMILIES", "FittedNuisance", "LAMBDA_GRID", "LearnerSpec",
    "OutcomeTarget", "Provenance", "cv_loss_table", "cv_tune", "fit", "fit_model",
]
