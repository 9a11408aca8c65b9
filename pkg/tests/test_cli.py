import json
import os

import numpy as np
import pytest

from drselect.cli import dump_json, main, resolve_seed
from drselect.config import parse_config_text
from drselect.errors import ConfigError
from drselect.simulation import draw

FAST_CONFIG = """\
# small library so the CLI tests stay quick
S = 3
learner.p.1 = l1_logistic
learner.p.2 = constant
learner.b.1 = l1_linear
learner.b.2 = constant
grid.b.2.offset = 0.5
"""


def write_csv(path, data):
    cols = ["y", "a"] + [f"x{j + 1}" for j in range(data.d)]
    lines = [",".join(cols)]
    for i in range(data.n):
        vals = [repr(float(data.y[i])), str(int(data.a[i]))] + [repr(float(v)) for v in data.x[i]]
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def workspace(tmp_path):
    csv = write_csv(tmp_path / "data.csv", draw(240, 12))
    cfg = tmp_path / "run.cfg"
    cfg.write_text(FAST_CONFIG)
    return tmp_path, str(csv), str(cfg)


# -- config ------------------------------------------------------------------------


def test_config_parsing():
    parsed = parse_config_text(FAST_CONFIG + "tau = 2.5\nbootstrap_retune = yes\n")
    cfg = parsed.run_config()
    assert cfg.S == 3 and cfg.tau == 2.5 and cfg.bootstrap_retune is True
    lib = parsed.library()
    assert [s.family for s in lib.propensity] == ["l1_logistic", "constant"]
    assert dict(lib.outcome[1].tuning) == {"offset": (0.5,)}


@pytest.mark.parametrize("text,match", [
    ("bogus = 1\n", "unknown key"),
    ("S = 3\nS = 4\n", "duplicate"),
    ("S = three\n", "cannot read"),
    ("learner.p.1 = svm\n", "unknown learner family"),
    ("learner.p.2 = constant\nlearner.b.1 = constant\n", "without gaps"),
    ("grid.p.1.lambda = 0.1\n", "learner"),
    ("tau = 1\nepsilon = 1\n", "at most one"),
    ("just words\n", "key = value"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


def test_mnar_alias():
    cfg = parse_config_text("functional = mnar_mean\nmnar.alpha = 0.5\n").run_config()
    assert cfg.mnar_alpha == 0.5


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("DRSELECT_SEED", "77")
    assert resolve_seed(5, {"seed": 6}) == (5, "flag")
    assert resolve_seed(None, {"seed": 6}) == (6, "config")
    assert resolve_seed(None, {}) == (77, "environment")
    monkeypatch.delenv("DRSELECT_SEED")
    assert resolve_seed(None, {})[1] == "default"
    monkeypatch.setenv("DRSELECT_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None, {})


def test_json_encoding():
    text = dump_json({"a": 0.1, "b": [float("nan"), float("inf")], "c": np.float64(1 / 3)})
    obj = json.loads(text)
    assert obj["a"] == 0.1 and obj["b"] == [None, None]
    assert obj["c"] == 1 / 3


# -- commands --------------------------------------------------------------------------


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_estimate_to_stdout(workspace, capsys):
    tmp, csv, cfg = workspace
    code, out, err = run(["estimate", "--data", csv, "--config", cfg, "--seed", "4"], capsys)
    assert code == 0, err
    obj = json.loads(out)
    res = obj["result"]
    assert set(res["criteria"]) == {"minimax", "mixed_minimax"}
    assert np.asarray(res["psi_grid"]).shape == (3, 2, 2)
    assert obj["manifest"]["seed"] == 4 and obj["manifest"]["seed_source"] == "flag"
    assert len(obj["manifest"]["data"]["sha256"]) == 64


def test_estimate_with_bootstrap_and_epsilon(workspace, capsys):
    tmp, csv, cfg = workspace
    code, out, err = run(["estimate", "--data", csv, "--config", cfg, "--bootstrap", "4", "--epsilon", "0.5",
                          "--criterion", "minimax", "--out", str(tmp / "o")], capsys)
    assert code == 0, err
    res = json.loads((tmp / "o" / "result.json").read_text())
    assert list(res["criteria"]) == ["minimax"]
    c = res["criteria"]["minimax"]
    assert c["tau_source"] == "epsilon"
    assert c["ci"]["reps"] == 4


def test_risk_grid_from_json(tmp_path, capsys):
    grid = tmp_path / "g.json"
    grid.write_text(json.dumps({"psi_grid": [[[0, 1], [2, 0]]]}))
    code, out, err = run(["risk-grid", "--psi-grid", str(grid)], capsys)
    assert code == 0, err
    res = json.loads(out)["risk_grid"]
    assert res["b1"] == [[4, 1], [4, 4]]
    assert res["b2"] == [[5, 2], [8, 5]]
    assert res["row_term"] == [1, 4] and res["col_term"] == [4, 1]
    assert res["selected"]["mixed_minimax"]["pair"] == [0, 1]


def test_risk_grid_from_data(workspace, capsys):
    tmp, csv, cfg = workspace
    code, out, err = run(["risk-grid", "--data", csv, "--config", cfg, "--out", str(tmp / "r")], capsys)
    assert code == 0, err
    res = json.loads((tmp / "r" / "risk_grid.json").read_text())
    assert np.asarray(res["b1"]).shape == (2, 2)


def test_input_errors_exit_1(workspace, capsys):
    tmp, csv, cfg = workspace
    bad = tmp / "bad.csv"
    bad.write_text("y,a,x1\n1,1,0\n2,7,0\n")
    cases = [
        ["estimate", "--data", str(bad)],
        ["estimate", "--data", str(tmp / "missing.csv")],
        ["estimate", "--data", csv, "--tau", "1", "--epsilon", "1"],
        ["estimate", "--data", csv, "--functional", "median"],
        ["estimate", "--data", csv, "--nonsense"],
        ["estimate", "--data", csv, "--threads", "0"],
        [],
    ]
    for argv in cases:
        code, out, err = run(argv, capsys)
        assert code == 1, argv
        assert json.loads(err.strip().splitlines()[-1])["error"]["kind"] == "input"


def test_estimation_error_exits_2(tmp_path, capsys):
    rng = np.random.default_rng(0)
    n = 30
    a = np.ones(n)
    a[:2] = 0  # too few control rows to fit the control-arm outcome model
    lines = ["y,a,x1"] + [f"{rng.normal()!r},{int(a[i])},{rng.random()!r}" for i in range(n)]
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "c.cfg").write_text("S = 2\nlearner.p.1 = constant\nlearner.b.1 = l1_linear\n")
    code, out, err = run(["estimate", "--data", str(tmp_path / "d.csv"), "--config", str(tmp_path / "c.cfg")],
                         capsys)
    assert code == 2
    assert json.loads(err.strip())["error"]["kind"] == "estimation"


def test_simulate_writes_tables(tmp_path, capsys):
    out_dir = tmp_path / "sim"
    code, out, err = run(["simulate", "--n", "150", "--reps", "2", "--methods", "minimax,ddml_l1",
                          "--forest-trees", "10", "--out", str(out_dir), "--seed", "1"], capsys)
    assert code == 0, err
    assert {p.name for p in out_dir.iterdir()} >= {"table1.csv", "table2.csv", "results.json", "manifest.json"}


def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_threads_do_not_change_artifacts(workspace, capsys):
    tmp, csv, cfg = workspace
    for t in ("1", "4"):
        code, _, err = run(["estimate", "--data", csv, "--config", cfg, "--bootstrap", "6", "--seed", "3",
                            "--threads", t, "--out", str(tmp / f"t{t}")], capsys)
        assert code == 0, err
    assert _tree_bytes(tmp / "t1") == _tree_bytes(tmp / "t4")
