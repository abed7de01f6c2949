import csv
import json

import numpy as np
import pytest

from infgame.cli import EXIT_INVALID, EXIT_NONCONVERGED, EXIT_OK, apply_override, expression_field, main
from infgame.errors import InvalidSpecError
from infgame.geometry import read_grid_csv

ONE_DIM = {"problem": {"oracle": {"kind": "one_dim", "h": [2.0]}},
           "solver": {"eps": 0.03125},
           "simulate": {"x0": [0.5], "dt": 1e-3, "n_paths": 300, "seed": 4, "t_max": 5.0},
           "isaacs": {"p": [1, 0], "S": [[1, 0], [0, 1]], "n_max": 4, "ns": [1, 4]}}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_solve_writes_csv_and_record(tmp_path):
    cfg = _write(tmp_path, ONE_DIM)
    assert main(["solve", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    coords, is_b, vals = read_grid_csv(tmp_path / "o" / "solution.csv")
    assert len(vals) == 33 and is_b[0] and is_b[-1]
    rec = json.loads((tmp_path / "o" / "run.json").read_text())
    assert set(["eps", "sweeps", "residual", "wall_time", "config"]) <= set(rec)
    assert rec["config"]["solver"]["tol"] == 1e-10  # defaults are echoed
    assert not list((tmp_path / "o").glob("*.tmp"))


def test_roundtrip_through_verify(tmp_path):
    cfg = _write(tmp_path, ONE_DIM)
    out = tmp_path / "o"
    assert main(["solve", cfg, "--out", str(out)]) == EXIT_OK
    assert main(["verify", cfg, "--out", str(out), "--set", f"verify.solution={json.dumps(str(out / 'solution.csv'))}",
                 "--set", "verify.sample_count=50"]) == EXIT_OK
    rec = json.loads((out / "residual.json").read_text())
    assert {"max_residual", "mean_abs_residual", "skipped", "step"} <= set(rec)
    assert rec["step"] == pytest.approx(4 * 0.03125)
    from infgame.geometry import build_grid, make_domain
    from infgame.tugofwar import TowProblem, solve_tow
    d = make_domain("interval", lo=0, hi=1)
    sol = solve_tow(TowProblem(d, build_grid(d, 0.03125), 0.03125, 2.0, 0.0))
    _, _, vals = read_grid_csv(out / "solution.csv")
    assert np.array_equal(vals, sol.values.values)


def test_verify_oracle(tmp_path):
    cfg = _write(tmp_path, ONE_DIM)
    assert main(["verify", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rec = json.loads((tmp_path / "residual.json").read_text())
    assert rec["max_residual"] <= 1e-6


def test_isaacs_table(tmp_path):
    cfg = _write(tmp_path, ONE_DIM)
    assert main(["isaacs", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "isaacs.csv")
    assert [int(r["n"]) for r in rows] == [1, 4]
    assert float(rows[0]["lambda_minus"]) == pytest.approx(-2, abs=1e-9)
    assert float(rows[0]["lambda_limit"]) == -2


def test_isaacs_single_query(tmp_path):
    cfg = _write(tmp_path, ONE_DIM)
    assert main(["isaacs", cfg, "--out", str(tmp_path), "--set", "isaacs.k=10", "--set", "isaacs.l=10"]) == EXIT_OK
    rows = _rows(tmp_path / "isaacs.csv")
    assert len(rows) == 1 and float(rows[0]["lambda_plus"]) == pytest.approx(-2, abs=1e-9)


def test_simulate_deterministic(tmp_path):
    cfg = _write(tmp_path, ONE_DIM)
    d = tmp_path / "run"
    texts = []
    for _ in range(2):
        assert main(["simulate", cfg, "--out", str(d), "--set", 'output.paths_csv="paths.csv"']) == EXIT_OK
        text = (d / "estimate.json").read_text()
        texts.append("\n".join(ln for ln in text.splitlines() if '"wall_time"' not in ln))
        assert len(_rows(d / "paths.csv")) == 300
    assert texts[0] == texts[1]
    rec = json.loads((d / "estimate.json").read_text())
    assert {"mean", "std_error", "exit_fraction", "mean_exit_time", "n_paths", "seed"} <= set(rec)


def test_converge_decreasing(tmp_path):
    cfg = _write(tmp_path, ONE_DIM)
    assert main(["converge", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "converge.csv")
    assert len(rows) == 4
    errs = [float(r["sup_error"]) for r in rows]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_negative_h_solution(tmp_path):
    base = {"problem": {"domain": {"kind": "interval", "lo": 0, "hi": 1}, "h": 2.0, "g": {"expr": "x1 - 0.25"}},
            "solver": {"eps": 0.0625}}
    flipped = {"problem": {"domain": {"kind": "interval", "lo": 0, "hi": 1}, "h": -2.0, "g": {"expr": "0.25 - x1"}},
               "solver": {"eps": 0.0625}}
    assert main(["solve", _write(tmp_path, base, "a.json"), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["solve", _write(tmp_path, flipped, "b.json"), "--out", str(tmp_path / "b")]) == EXIT_OK
    va = read_grid_csv(tmp_path / "a" / "solution.csv")[2]
    vb = read_grid_csv(tmp_path / "b" / "solution.csv")[2]
    assert np.array_equal(vb, -va)


def test_radial_table_boundary_data(tmp_path):
    cfg = {"problem": {"domain": {"kind": "annulus", "r_in": 1, "r_out": 2, "dim": 2}, "h": 2.0,
                       "g": {"radial": {"r": [1, 2], "value": [0, 1.5]}}},
           "solver": {"eps": 0.125}}
    assert main(["solve", _write(tmp_path, cfg), "--out", str(tmp_path)]) == EXIT_OK
    coords, is_b, vals = read_grid_csv(tmp_path / "solution.csv")
    r = np.linalg.norm(coords, axis=1)
    assert np.allclose(vals[is_b & (r < 1.5)], 0.0) and np.allclose(vals[is_b & (r > 1.5)], 1.5)


def test_exit_codes(tmp_path, capsys):
    cfg = _write(tmp_path, ONE_DIM)
    assert main(["solve", cfg, "--out", str(tmp_path), "--set", "solver.eps=5"]) == EXIT_INVALID
    bad = tmp_path / "bad.json"
    bad.write_text('{"problem":\n  {"oracle": }\n}')
    assert main(["solve", str(bad)]) == EXIT_INVALID
    assert "bad.json:2:" in capsys.readouterr().err
    assert main(["solve", str(tmp_path / "missing.json")]) == EXIT_INVALID
    assert main(["simulate", _write(tmp_path, {"problem": ONE_DIM["problem"]}, "nox0.json")]) == EXIT_INVALID
    assert main(["solve", cfg, "--out", str(tmp_path), "--set", "solver.max_sweeps=3"]) == EXIT_NONCONVERGED
    assert "residual" in capsys.readouterr().err


def test_override_rules():
    cfg = {"solver": {"eps": 0.1}}
    apply_override(cfg, "solver.eps=0.25")
    apply_override(cfg, "simulate.seed=7")
    apply_override(cfg, "solver.stencil=sphere")
    assert cfg["solver"] == {"eps": 0.25, "stencil": "sphere"} and cfg["simulate"]["seed"] == 7
    with pytest.raises(InvalidSpecError):
        apply_override(cfg, "solver=3")
    with pytest.raises(InvalidSpecError):
        apply_override(cfg, "solver.eps")


def test_expression_field_sandbox():
    f = expression_field("sin(x1) + r**2", 2)
    assert f(np.array([[0.0, 2.0]]))[0] == pytest.approx(4.0)
    for expr in ("__import__('os')", "x1.real", "open('f')", "[x1]"):
        with pytest.raises(InvalidSpecError):
            expression_field(expr, 2)
