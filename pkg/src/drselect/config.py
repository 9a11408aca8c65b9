"""Flat ``key = value`` run files.

Keys are RunConfig field names, plus the learner library::

    learner.p.1 = l1_logistic
    learner.b.1 = random_forest_reg
    grid.b.1.n_trees = 100
    mnar.alpha = 0.5

Learner indices start at 1 and must be contiguous per role. Unknown keys
are rejected.
"""

from __future__ import annotations

import re
from dataclasses import fields
from typing import Optional

from .core import RunConfig
from .errors import ConfigError
from .learners import FAMILIES, CandidateLibrary, LearnerSpec, default_ml_library

_LEARNER = re.compile(r"^learner\.(p|b)\.(\d+)$")
_GRID = re.compile(r"^grid\.(p|b)\.(\d+)\.([A-Za-z_][A-Za-z0-9_]*)$")
_ROLE = {"p": "propensity", "b": "outcome"}
_ALIASES = {"mnar.alpha": "mnar_alpha"}
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _convert(name: str, typ: str, raw: str):
    optional = typ.startswith("Optional[")
    base = typ[len("Optional["):-1] if optional else typ
    if optional and raw.lower() in ("", "none", "null"):
        return None
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {base}") from None


def _grid_value(raw: str):
    out = []
    for tok in raw.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            v = float(tok)
        except ValueError:
            raise ConfigError(f"grid value {tok!r} is not a number") from None
        out.append(int(v) if v.is_integer() and "." not in tok and "e" not in tok.lower() else v)
    if not out:
        raise ConfigError("empty grid")
    return tuple(out)


class ParsedConfig:
    """Run settings and learner library read from a file (or defaults)."""

    def __init__(self, values: dict, learners: dict, grids: dict, raw: dict):
        self.values = values
        self.learners = learners
        self.grids = grids
        self.raw = raw

    def run_config(self, **overrides) -> RunConfig:
        try:
            base = RunConfig(**self.values)
        except TypeError as exc:  # pragma: no cover - keys are validated on read
            raise ConfigError(str(exc)) from None
        return base.with_overrides(**overrides)

    def library(self) -> CandidateLibrary:
        if not self.learners:
            if self.grids:
                raise ConfigError("grid overrides need explicit learner entries")
            return CandidateLibrary(*default_ml_library())
        roles = {"p": [], "b": []}
        for role in ("p", "b"):
            idx = sorted(i for r, i in self.learners if r == role)
            if idx != list(range(1, len(idx) + 1)):
                raise ConfigError(f"learner.{role} indices must run 1..K without gaps, got {idx}")
            families = [self.learners[(role, i)] for i in idx]
            for i, family in zip(idx, families):
                tuning = tuple((name, vals) for (r, j, name), vals in self.grids.items() if (r, j) == (role, i))
                label = f"{family}#{i}" if families.count(family) > 1 else family
                roles[role].append(LearnerSpec(family, _ROLE[role], tuning, label=label))
        for (role, i, name) in self.grids:
            if (role, i) not in self.learners:
                raise ConfigError(f"grid.{role}.{i}.{name} refers to an undefined learner")
        return CandidateLibrary(tuple(roles["p"]), tuple(roles["b"]))


def parse_config_text(text: str, source: str = "<config>") -> ParsedConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values, learners, grids, raw = {}, {}, {}, {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected key = value")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        raw[key] = value
        name = _ALIASES.get(key, key)
        if name in types:
            values[name] = _convert(key, types[name], value)
            continue
        m = _LEARNER.match(key)
        if m:
            if value not in FAMILIES:
                raise ConfigError(f"{source}:{line_no}: unknown learner family {value!r}")
            learners[(m.group(1), int(m.group(2)))] = value
            continue
        m = _GRID.match(key)
        if m:
            grids[(m.group(1), int(m.group(2)), m.group(3))] = _grid_value(value)
            continue
        raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
    parsed = ParsedConfig(values, learners, grids, raw)
    parsed.run_config()  # validate eagerly
    parsed.library()
    return parsed


def load_config(path: Optional[str]) -> ParsedConfig:
    if path is None:
        return ParsedConfig({}, {}, {}, {})
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, path)
