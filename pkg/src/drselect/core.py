"""Data model, run configuration, seeding and sample splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DataValidationError,
    ParseError,
    SchemaError,
    SizingError,
)

SPLIT_KINDS = ("vfold", "repeated_half")
CRITERIA = ("minimax", "mixed_minimax", "both")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed units ``(X, A, Y)`` stored column-wise.

    ``y`` may hold NaN where ``a == 0``; functionals that read those entries
    check finiteness themselves.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    x_names: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        a = np.asarray(self.a, dtype=np.float64).ravel()
        y = np.asarray(self.y, dtype=np.float64).ravel()
        n = x.shape[0]
        if a.shape[0] != n or y.shape[0] != n:
            raise DataValidationError(
                f"length mismatch: x has {n} rows, a has {a.shape[0]}, y has {y.shape[0]}"
            )
        if n < 2:
            raise DataValidationError(f"need at least 2 rows, got {n}")
        if not np.all((a == 0.0) | (a == 1.0)):
            bad = int(np.flatnonzero((a != 0.0) & (a != 1.0))[0])
            raise DataValidationError(f"a must be 0/1; row {bad + 1} has {a[bad]!r}")
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
            raise DataValidationError(f"non-finite covariate in row {bad + 1}")
        names = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataValidationError("x_names length does not match covariate count")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x_names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.a[idx], self.y[idx], self.x_names)


def load_dataset(path, y_col: str = "y", a_col: str = "a", x_prefix: str = "x") -> Dataset:
    """Read a comma-separated file with a header row.

    Covariates are every column whose name starts with ``x_prefix`` (in file
    order), excluding the outcome and indicator columns. Empty or ``NA``
    outcome cells become NaN.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row expected") from None
        for col in (y_col, a_col):
            if col not in header:
                raise SchemaError(f"missing column {col!r}")
        x_cols = [
            j for j, h in enumerate(header) if h.startswith(x_prefix) and h not in (y_col, a_col)
        ]
        if not x_cols:
            raise SchemaError(f"no covariate columns with prefix {x_prefix!r}")
        iy, ia = header.index(y_col), header.index(a_col)
        xs, ys, as_ = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"row {row_no}: expected {len(header)} cells, got {len(row)}"
                )
            xs.append([_cell(row[j], row_no, header[j]) for j in x_cols])
            ys.append(_cell(row[iy], row_no, y_col, allow_missing=True))
            a_raw = row[ia].strip()
            if a_raw not in ("0", "1", "0.0", "1.0"):
                raise DataValidationError(
                    f"row {row_no}: column {a_col!r} must be 0 or 1, got {a_raw!r}"
                )
            as_.append(float(a_raw))
    if not xs:
        raise DataValidationError(f"{path}: no data rows")
    return Dataset(
        np.array(xs, dtype=np.float64),
        np.array(as_),
        np.array(ys),
        tuple(header[j] for j in x_cols),
    )


def _cell(raw: str, row_no: int, col: str, allow_missing: bool = False) -> float:
    s = raw.strip()
    if allow_missing and s in ("", "NA", "nan", "NaN"):
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise ParseError(f"row {row_no}, column {col!r}: not a number: {raw!r}") from None


# ---------------------------------------------------------------------------
# seeding


def derive_seed(master: int, *path) -> int:
    """Child seed for a task identified by ``path``.

    Pure function of its arguments, so results never depend on the order in
    which tasks are scheduled.
    """
    key = []
    for p in path:
        if isinstance(p, str):
            key.extend(p.encode("utf-8"))
            key.append(256)
        else:
            key.append(int(p) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(int(master) & ((1 << 64) - 1), spawn_key=tuple(key))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True, eq=False)
class SplitScheme:
    """Validation indicators ``T[s, i]`` (1 = validation) for S splits."""

    assignments: np.ndarray
    kind: str

    def __post_init__(self):
        t = np.asarray(self.assignments, dtype=np.int8)
        if t.ndim != 2:
            raise ContractError("assignments must be S x n")
        for s in range(t.shape[0]):
            if t[s].min() != 0 or t[s].max() != 1:
                raise ContractError(f"split {s} needs both training and validation rows")
        object.__setattr__(self, "assignments", _frozen(t))

    @property
    def S(self) -> int:
        return self.assignments.shape[0]

    @property
    def n(self) -> int:
        return self.assignments.shape[1]

    def validation(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.assignments[s] == 1)

    def training(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.assignments[s] == 0)


def make_splits(n: int, S: int, kind: str = "vfold", seed: int = 0) -> SplitScheme:
    if S < 1:
        raise SizingError(f"S must be >= 1, got {S}")
    rng = np.random.default_rng(derive_seed(seed, "splits", kind, n, S))
    t = np.zeros((S, n), dtype=np.int8)
    if kind == "vfold":
        if S < 2:
            raise SizingError("vfold needs S >= 2 so that every split has training rows")
        if n < 2 * S:
            raise SizingError(f"vfold with S={S} needs n >= {2 * S}, got n={n}")
        for s, fold in enumerate(np.array_split(rng.permutation(n), S)):
            t[s, fold] = 1
    elif kind == "repeated_half":
        if n < 2:
            raise SizingError("repeated_half needs n >= 2")
        half = n // 2
        for s in range(S):
            t[s, rng.permutation(n)[:half]] = 1
    else:
        raise ContractError(f"unknown split kind {kind!r}")
    return SplitScheme(t, kind)


def truncate_propensity(p, m1: float):
    """Clamp probabilities to ``[m1, 1 - m1]``."""
    if not 0.0 < m1 < 0.5:
        raise ContractError(f"M1 must lie in (0, 0.5), got {m1}")
    out = np.minimum(np.maximum(p, m1), 1.0 - m1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    functional: str = "ate"
    S: int = 3
    split_kind: str = "vfold"
    seed: int = 1
    M1: float = 0.01
    M2: Optional[float] = None
    tau: Optional[float] = None
    epsilon: Optional[float] = None
    bootstrap_reps: int = 0
    criterion: str = "both"
    level: float = 0.95
    bootstrap_retune: bool = False
    arm: int = 1
    mnar_alpha: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.M1 < 0.5:
            raise ConfigError(f"M1 must lie in (0, 0.5), got {self.M1}")
        if self.M2 is not None and self.M2 <= 0:
            raise ConfigError("M2 must be positive")
        if self.tau is not None and self.epsilon is not None:
            raise ConfigError("set at most one of tau and epsilon")
        if self.tau is not None and not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.split_kind not in SPLIT_KINDS:
            raise ConfigError(f"split_kind must be one of {SPLIT_KINDS}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}")
        if self.S < 1:
            raise ConfigError("S must be >= 1")
        if self.bootstrap_reps < 0:
            raise ConfigError("bootstrap_reps must be >= 0")
        if self.bootstrap_reps == 1:
            raise ConfigError("bootstrap_reps must be 0 or >= 2")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)")
        if self.arm not in (0, 1):
            raise ConfigError("arm must be 0 or 1")

    @property
    def criteria(self) -> tuple:
        if self.criterion == "both":
            return ("minimax", "mixed_minimax")
        return (self.criterion,)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "tau" in kw:
            kw.setdefault("epsilon", None)
        elif "epsilon" in kw:
            kw.setdefault("tau", None)
        return replace(self, **kw)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}
