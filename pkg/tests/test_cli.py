import csv
import json

import numpy as np
import pytest

from qotlab.cli import canonical_json, main
from qotlab.fixtures import stability_suite

UNIT = {"eps_lower": 8.0, "diam_bound": 1.0, "lipschitz": 1.0, "density_lower": 1.0,
        "density_upper": 1.0, "cone_const": 1.0, "ball_mass_lower": 1.0}
EX62_PARAMS = {"eps_lower": 1.0, "diam_bound": 1.0, "lipschitz": 6.4, "density_lower": 5 / 6,
               "density_upper": 1.5, "cone_const": 0.1, "ball_mass_lower": 0.5}
ZERO_COST = {
    "eps": 0.5,
    "p": {"points": [[0.0], [0.5], [1.0]], "weights": [0.2, 0.3, 0.5]},
    "q": {"points": [[0.1], [0.9]], "weights": [0.4, 0.6]},
    "cost": {"kind": "matrix", "lipschitz": 1.0, "table_x": [[0.0], [0.5], [1.0]],
             "table_y": [[0.1], [0.9]], "table": [[0, 0], [0, 0], [0, 0]]},
}


def run(tmp_path, command, cfg, *extra):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    return main([command, "--config", str(path), "--out", str(out), *extra]), out


def test_solve_zero_cost(tmp_path):
    code, out = run(tmp_path, "solve", {"instance": ZERO_COST})
    assert code == 0
    sol = json.loads((out / "solution.json").read_text())["solution"]
    h = np.add.outer(sol["f"], sol["g"])
    assert np.max(np.abs(h - 0.5)) <= 1e-12
    assert sol["dual_objective"] == pytest.approx(0.25)


def test_solve_example62_support(tmp_path):
    code, out = run(tmp_path, "solve", {"instance": {"example62": {"eta": 0.0, "grid_n": 81}}})
    assert code == 0
    support = json.loads((out / "solution.json").read_text())["solution"]["support"]
    expected = [[i, 0] for i in range(81)] + [[i, 1] for i in range(21, 81)]
    assert sorted(map(list, support)) == sorted(expected)


def test_corrupt_weights(tmp_path, capsys):
    bad = json.loads(json.dumps(ZERO_COST))
    bad["p"]["weights"] = [0.2, "x", 0.5]
    code, _ = run(tmp_path, "solve", {"instance": bad})
    assert code == 1
    assert "weights" in capsys.readouterr().err


def test_nonconvergence_exit(tmp_path):
    cfg = {"instance": {"quadratic": {"n": 30, "d": 1, "seed": 0, "eps": 0.01}}, "max_iter": 1}
    code, _ = run(tmp_path, "solve", cfg)
    assert code == 2


def test_constants_unit(tmp_path, capsys):
    code, out = run(tmp_path, "constants", {"class_params": UNIT})
    assert code == 0
    text = capsys.readouterr().out
    assert "gamma_bar,16.0" in text
    rows = list(csv.reader((out / "constants.csv").read_text().splitlines()))
    consts = json.loads((out / "constants.json").read_text())
    assert len(rows) - 1 == len(consts) == 6


def test_constants_missing_parameter(tmp_path, capsys):
    params = dict(UNIT)
    del params["ball_mass_lower"]
    code, _ = run(tmp_path, "constants", {"class_params": params})
    assert code == 1
    assert "ball_mass_lower" in capsys.readouterr().err


def test_verify_identical_pair(tmp_path):
    cfg = {"class_params": UNIT, "pairs": [{"a": ZERO_COST, "b": ZERO_COST}]}
    code, out = run(tmp_path, "verify", cfg)
    assert code == 0
    rep = json.loads((out / "reports.json").read_text())[0]
    assert all(v == 0 for k, v in rep["deltas"].items()
               if k.startswith("delta") or k in ("small_delta_star",))


def test_verify_example62(tmp_path):
    cfg = {"class_params": EX62_PARAMS,
           "pairs": [{"a": {"example62": {"eta": 0.0}}, "b": {"example62": {"eta": 0.5}}}]}
    code, out = run(tmp_path, "verify", cfg)
    assert code == 0
    rep = json.loads((out / "reports.json").read_text())[0]
    supp = [c for c in rep["checks"] if c["id"] == "support-hausdorff"][0]
    assert supp["pass"] is None and rep["nondegeneracy"]["applicable"] is False


def _suite_config():
    suite = stability_suite()
    pairs = [{"a": a.to_dict(), "b": b.to_dict()} for a, b in suite.pairs()[:4]]
    return {"class_params": suite.params.to_dict(), "pairs": pairs}


def test_verify_corrupted_constant(tmp_path, capsys):
    cfg = {**_suite_config(), "constants_override": {"c_bar": 1e-9}}
    code, out = run(tmp_path, "verify", cfg)
    assert code == 3
    assert "linf-h" in capsys.readouterr().err
    summary = list(csv.DictReader((out / "summary.csv").read_text().splitlines()))
    assert any(r["check"] == "linf-h" and r["pass"] == "0" for r in summary)


def test_verify_deterministic(tmp_path):
    cfg = _suite_config()
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir(), b.mkdir()
    code1, out1 = run(a, "verify", cfg)
    code2, out2 = run(b, "verify", cfg, "--jobs", "3")
    assert code1 == code2 == 0
    assert (out1 / "reports.json").read_bytes() == (out2 / "reports.json").read_bytes()


def test_perturb_curve(tmp_path):
    suite = stability_suite()
    cfg = {"instance": suite.base.to_dict(), "class_params": suite.params.to_dict(),
           "perturbation": {"kind": "eps-ramp", "grid": [0.0, 0.0005]}}
    code, out = run(tmp_path, "perturb", cfg, "--format", "csv")
    assert code == 0
    lines = (out / "curve.csv").read_text().splitlines()
    assert lines[0] == "t,delta_star,linf_diff,ratio,hypothesis" and len(lines) == 3
    assert not (out / "curve.json").exists()


def test_example62_command(tmp_path):
    code, out = run(tmp_path, "example62", {"eta": [0.0, 0.5], "grid_n": 201})
    assert code == 0
    rows = json.loads((out / "example62.json").read_text())["rows"]
    assert [r["pass"] for r in rows] == [True, True]


@pytest.mark.parametrize("argv", [
    ["solve", "--format", "xml"],
    ["solve", "--tol", "-1"],
    ["solve", "--config", "/nonexistent/cfg.json"],
    ["solve"],
])
def test_input_errors(argv):
    assert main(argv) == 1


def test_canonical_json():
    text = canonical_json({"b": 0.1, "a": [1, 2.0, float("inf")], "c": np.float64(1 / 3)})
    assert text == '{"a":[1,2.0,Infinity],"b":0.10000000000000001,"c":0.33333333333333331}\n'
    assert json.loads(text)["c"] == 1 / 3
