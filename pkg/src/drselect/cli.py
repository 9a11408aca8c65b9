"""``drselect`` command line: estimate, risk-grid, simulate, bootstrap-check.

Exit status 0 on success, 1 on invalid input (an error object is written to
stderr as JSON), 2 when estimation fails at runtime.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
from typing import Optional

import numpy as np

from . import __version__
from .config import load_config
from .core import load_dataset
from .errors import ConfigError, DrSelectError, EstimationError, InputError
from .functionals import get_functional

SEED_ENV = "DRSELECT_SEED"
DEFAULT_SEED = 1


# ---------------------------------------------------------------------------
# deterministic JSON


def _scalar(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return "null"
        return format(v, ".17g")
    return json.dumps(str(v), ensure_ascii=False)


def _encode(v, level: int, out: list):
    pad = "  " * (level + 1)
    if isinstance(v, np.ndarray):
        v = v.tolist()
    if isinstance(v, dict):
        if not v:
            out.append("{}")
            return
        out.append("{\n")
        for i, (k, item) in enumerate(v.items()):
            out.append(f"{pad}{json.dumps(str(k), ensure_ascii=False)}: ")
            _encode(item, level + 1, out)
            out.append(",\n" if i < len(v) - 1 else "\n")
        out.append("  " * level + "}")
    elif isinstance(v, (list, tuple)):
        if not v:
            out.append("[]")
        elif all(not isinstance(x, (dict, list, tuple, np.ndarray)) for x in v):
            out.append("[" + ", ".join(_scalar(x) for x in v) + "]")
        else:
            out.append("[\n")
            for i, item in enumerate(v):
                out.append(pad)
                _encode(item, level + 1, out)
                out.append(",\n" if i < len(v) - 1 else "\n")
            out.append("  " * level + "]")
    else:
        out.append(_scalar(v))


def dump_json(obj) -> str:
    """JSON text with floats in 17 significant digits; non-finite floats become null."""
    out = []
    _encode(obj, 0, out)
    return "".join(out) + "\n"


# ---------------------------------------------------------------------------
# helpers


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy

    return {"drselect": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def resolve_seed(flag: Optional[int], config_values: dict) -> tuple:
    """Seed and where it came from: flag, config, environment, default."""
    if flag is not None:
        return flag, "flag"
    if "seed" in config_values:
        return config_values["seed"], "config"
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env), "environment"
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return DEFAULT_SEED, "default"


def _library_dict(lib) -> dict:
    def spec(s):
        return {"family": s.family, "label": s.label, "grid": {k: list(v) for k, v in s.tuning}}
    return {"propensity": [spec(s) for s in lib.propensity], "outcome": [spec(s) for s in lib.outcome]}


def _config_dict(cfg) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def _manifest(command: str, args: dict, config: dict, library: Optional[dict], seed: int, seed_source: str,
              data_path: Optional[str] = None, extra: Optional[dict] = None) -> dict:
    job = {"command": command, "arguments": args, "config": config, "library": library}
    digest = hashlib.sha256(dump_json(job).encode("utf-8")).hexdigest()
    m = {
        "tool": "drselect",
        "command": command,
        "config_hash": digest,
        "seed": seed,
        "seed_source": seed_source,
        "arguments": args,
        "config": config,
        "library": library,
        "versions": _versions(),
    }
    if data_path is not None:
        m["data"] = {"path": os.path.basename(data_path), "sha256": _sha256_file(data_path)}
    if extra:
        m.update(extra)
    return m


def _write(out_dir: Optional[str], files: dict, stdout_key: str):
    if out_dir is None:
        key = os.path.splitext(stdout_key)[0]
        sys.stdout.write(dump_json({key: files[stdout_key], "manifest": files["manifest.json"]}))
        return
    os.makedirs(out_dir, exist_ok=True)
    for name, payload in files.items():
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(payload if isinstance(payload, str) else dump_json(payload))
    sys.stdout.write(dump_json({"written": sorted(files), "out": out_dir}))


def _load_data(args):
    if args.data is None:
        raise ConfigError("--data is required")
    if not os.path.exists(args.data):
        raise ConfigError(f"data file not found: {args.data}")
    return load_dataset(args.data, args.y_col, args.a_col, args.x_prefix)


def _run_setup(args):
    parsed = load_config(args.config)
    seed, source = resolve_seed(args.seed, parsed.values)
    overrides = dict(seed=seed, functional=args.functional, S=args.S, criterion=args.criterion,
                     tau=args.tau, epsilon=args.epsilon, level=args.level,
                     bootstrap_reps=getattr(args, "bootstrap", None))
    if args.tau is not None and args.epsilon is not None:
        raise ConfigError("--tau and --epsilon are mutually exclusive")
    try:
        cfg = parsed.run_config(**overrides)
    except TypeError as exc:  # pragma: no cover
        raise ConfigError(str(exc)) from None
    fdef = get_functional(cfg.functional, alpha=cfg.mnar_alpha, arm=cfg.arm)
    return cfg, parsed.library(), fdef, seed, source


def _common_args(args) -> dict:
    keep = ("config", "data", "y_col", "a_col", "x_prefix", "functional", "S", "criterion", "tau", "epsilon",
            "level", "bootstrap", "psi_grid")
    out = {}
    for k in keep:
        if hasattr(args, k):
            v = getattr(args, k)
            if k in ("config", "data", "psi_grid") and v is not None:
                v = os.path.basename(v)
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_estimate(args) -> int:
    from .inference import estimate

    cfg, lib, fdef, seed, source = _run_setup(args)
    data = _load_data(args)
    report = estimate(data, lib, fdef, cfg, threads=args.threads)
    result = report.to_dict()
    manifest = _manifest("estimate", _common_args(args), _config_dict(cfg), _library_dict(lib), seed, source,
                         args.data)
    _write(args.out, {"result.json": result, "manifest.json": manifest}, "result.json")
    return 0


def _grid_from_json(path):
    from .selector import PsiGrid

    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read psi grid {path}: {exc}") from None
    values = obj.get("psi_grid") if isinstance(obj, dict) else obj
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError):
        raise ConfigError("psi_grid must be a numeric S x K x L array") from None
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or 0 in arr.shape:
        raise ConfigError("psi_grid must be a numeric S x K x L array")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("psi_grid entries must be finite")
    labels = obj if isinstance(obj, dict) else {}
    return PsiGrid(arr, tuple(labels.get("propensity_learners", ())), tuple(labels.get("outcome_learners", ())))


def _surface_payload(grid, surface) -> dict:
    from .selector import CRITERION_NAMES, final_estimate, n_tied, select

    out = {
        "propensity_learners": list(grid.p_labels),
        "outcome_learners": list(grid.b_labels),
        "psi_grid": grid.values.tolist(),
        "b1": surface.b1.tolist(),
        "b2": surface.b2.tolist(),
        "row_term": surface.row_term.tolist(),
        "col_term": surface.col_term.tolist(),
        "selected": {},
    }
    for c in CRITERION_NAMES:
        k, l = select(surface, c)
        out["selected"][c] = {"pair": [k, l], "labels": [grid.p_labels[k], grid.b_labels[l]],
                              "ties": n_tied(surface, c), "psi_hat": final_estimate(grid, k, l)}
    return out


def cmd_risk_grid(args) -> int:
    from .inference import run_grid
    from .selector import pseudo_risk_surface

    if args.psi_grid is not None:
        grid = _grid_from_json(args.psi_grid)
        manifest = _manifest("risk-grid", _common_args(args), {}, None, 0, "unused",
                             extra={"psi_grid_sha256": _sha256_file(args.psi_grid)})
    else:
        cfg, lib, fdef, seed, source = _run_setup(args)
        data = _load_data(args)
        grid = run_grid(data, lib, fdef, cfg, threads=args.threads)
        manifest = _manifest("risk-grid", _common_args(args), _config_dict(cfg), _library_dict(lib), seed,
                             source, args.data)
    payload = _surface_payload(grid, pseudo_risk_surface(grid))
    _write(args.out, {"risk_grid.json": payload, "manifest.json": manifest}, "risk_grid.json")
    return 0


def _plan(args, methods, bootstrap):
    from .simulation import ExperimentPlan

    parsed = load_config(args.config)
    seed, source = resolve_seed(args.seed, parsed.values)
    plan = ExperimentPlan(
        n_values=tuple(args.n), reps=args.reps, seed=seed, methods=tuple(methods),
        functional=args.functional or "ate", S=args.S or parsed.values.get("S", 3),
        M1=parsed.values.get("M1", 0.01), bootstrap_reps=bootstrap,
        tau=args.tau if args.tau is not None else math.log(9.0),
        level=args.level if args.level is not None else 0.95,
        forest_trees=args.forest_trees, threads=args.threads,
    )
    return plan, seed, source


def _plan_dict(plan) -> dict:
    from dataclasses import asdict

    d = asdict(plan)
    d.pop("threads")
    return d


def _run_plan(args, plan, seed, source, command):
    from .simulation import run_experiment, write_tables

    if args.out is None:
        raise ConfigError("--out is required")
    os.makedirs(args.out, exist_ok=True)
    manifest = _manifest(command, _common_args(args), _plan_dict(plan), None, seed, source)
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_json(manifest))
    res = run_experiment(plan, args.out)
    sys.stdout.write(dump_json({"table1": res.table1(), "table2": res.table2(), "out": args.out}))
    return res


def cmd_simulate(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    plan, seed, source = _plan(args, methods, args.bootstrap or 0)
    _run_plan(args, plan, seed, source, "simulate")
    return 0


def cmd_bootstrap_check(args) -> int:
    plan, seed, source = _plan(args, ["minimax", "mixed_minimax"], args.bootstrap or 200)
    _run_plan(args, plan, seed, source, "bootstrap-check")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drselect", description="Selective machine learning for doubly robust functionals.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value run file")
        sp.add_argument("--seed", type=int, help="master seed (overrides config and DRSELECT_SEED)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
        sp.add_argument("--out", help="output directory (default: print JSON to stdout)")
        sp.add_argument("--functional", help="ate, mar_mean, expected_cond_cov, expected_product, mnar_mean")
        sp.add_argument("-S", type=int, dest="S", help="number of sample splits")
        sp.add_argument("--tau", type=float)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--level", type=float)
        if data:
            sp.add_argument("--data", help="CSV with a header row")
            sp.add_argument("--y-col", default="y")
            sp.add_argument("--a-col", default="a")
            sp.add_argument("--x-prefix", default="x")
            sp.add_argument("--criterion", choices=("minimax", "mixed_minimax", "both"))

    e = sub.add_parser("estimate", help="select learners and estimate the functional")
    common(e)
    e.add_argument("--bootstrap", type=int, help="bootstrap resamples (0 = none)")
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("risk-grid", help="psi grid and pseudo-risk surfaces")
    common(r)
    r.add_argument("--psi-grid", help="JSON file holding an S x K x L psi grid instead of data")
    r.set_defaults(func=cmd_risk_grid)

    for name, func, boot_default in (("simulate", cmd_simulate, 0), ("bootstrap-check", cmd_bootstrap_check, 200)):
        s = sub.add_parser(name, help="simulation study tables" if name == "simulate"
                           else "coverage of smooth-max bootstrap intervals")
        common(s, data=False)
        s.add_argument("--n", type=int, nargs="+", default=[1000])
        s.add_argument("--reps", type=int, default=200)
        s.add_argument("--bootstrap", type=int, default=boot_default)
        s.add_argument("--forest-trees", type=int, help="override the forest size")
        if name == "simulate":
            s.add_argument("--methods", default="minimax,mixed_minimax,ddml_l1,ddml_rf,ddml_gbt")
        s.set_defaults(func=func)
    return p


def _error(exc: Exception, kind: str) -> None:
    sys.stderr.write(json.dumps({"error": {"kind": kind, "type": type(exc).__name__, "message": str(exc)}}) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("a subcommand is required: estimate, risk-grid, simulate, bootstrap-check")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.func(args)
    except InputError as exc:
        _error(exc, "input")
        return 1
    except EstimationError as exc:
        _error(exc, "estimation")
        return 2
    except DrSelectError as exc:  # pragma: no cover - every error is one of the two families
        _error(exc, "estimation")
        return 2


if __name__ == "__main__":
    sys.exit(main())
