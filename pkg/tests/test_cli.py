import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from matstein.cli import config_hash, main, read_embedded

DATA = Path(__file__).parent / "data"


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_missing_seed_exit_1(tmp_path, capsys):
    cfg = {"experiment": "sample", "params": {"count": 5, "nu": 1, "d": 1}, "output_path": str(tmp_path / "o.json")}
    assert main(["sample", "--config", _write(tmp_path, cfg)]) == 1
    assert "seeds mandatory" in capsys.readouterr().err


def test_invalid_configs_exit_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["sample", "--config", str(bad)]) == 1
    cfg = {"experiment": "estimate", "params": {"seed": 1}, "output_path": str(tmp_path / "o.json")}
    assert main(["sample", "--config", _write(tmp_path, cfg)]) == 1
    cfg = {"experiment": "sample", "params": {"seed": 1, "count": 5, "Psi": [[1, 2], [2, 1]], "d": 1},
           "output_path": str(tmp_path / "o.json")}
    assert main(["sample", "--config", _write(tmp_path, cfg)]) == 1


def test_numerical_failure_exit_2(tmp_path, capsys):
    data = tmp_path / "tiny.csv"
    data.write_text("x_1_1,x_1_2,x_1_3\n1,2,3\n")
    cfg = {"experiment": "estimate", "params": {"seed": 0, "data": "tiny.csv"}, "output_path": str(tmp_path / "e.json")}
    assert main(["estimate", "--config", _write(tmp_path, cfg)]) == 2
    assert "not positive definite" in capsys.readouterr().err


def test_sample_deterministic_and_verifiable(tmp_path):
    cfg = {"experiment": "sample", "format": "csv", "params": {"seed": 3, "count": 20, "nu": 2, "d": 2}}
    c = _write(tmp_path, cfg)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["sample", "--config", c, "--output", str(a)]) == 0
    assert main(["sample", "--config", c, "--output", str(b), "--threads", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()
    stored, _ = read_embedded(a)
    assert stored == config_hash(cfg)
    assert main(["verify", "--config", c, "--output", str(a)]) == 0
    assert main(["verify", "--output", str(a)]) == 0
    cfg["params"]["seed"] = 4
    assert main(["verify", "--config", _write(tmp_path, cfg, "other.json"), "--output", str(a)]) == 1
    assert json.loads((tmp_path / "a.csv.runinfo.json").read_text())["wall_time_s"] >= 0


def test_estimate_golden(tmp_path):
    for name in ("estimate_config.json", "synthetic_mn_2x3.csv"):
        shutil.copy(DATA / name, tmp_path / name)
    out = tmp_path / "est.json"
    assert main(["estimate", "--config", str(tmp_path / "estimate_config.json"), "--output", str(out)]) == 0
    assert out.read_bytes() == (DATA / "estimate_golden.json").read_bytes()


def test_verify_moments(tmp_path):
    cfg = {"experiment": "verify_moments", "output_path": str(tmp_path / "m.json"),
           "params": {"seed": 1, "draws": 100000, "wishart": [{"dim": 2, "alpha": 7}, {"dim": 2, "alpha": 5}],
                      "matrix_t": [{"nu": 1, "d": 1, "n_dof": 8}]}}
    assert main(["verify_moments", "--config", _write(tmp_path, cfg)]) == 0
    rows = json.loads((tmp_path / "m.json").read_text())["results"]["moments"]
    closed = {(r["case"].get("alpha"), r["moment"]): r["closed_form"] for r in rows}
    assert closed[(7, "m2tr")] == pytest.approx(0.3) and closed[(7, "m1sq")] == pytest.approx(0.4)
    assert closed[(5, "m1")] == pytest.approx(1.0)
    assert all(r["se"] > 0 for r in rows)
    assert all(abs(r["z"]) <= 4 for r in rows if r["law"] == "inv_wishart")


@pytest.mark.parametrize("exp,params", [
    ("verify_stein", {"seed": 1, "count": 2000, "nu": 2, "d": 2, "probes": 2}),
    ("solve_stein", {"seed": 1, "nu": 1, "d": 2, "h": {"kind": "tanh_coord"}, "count": 2,
                     "quadrature": {"t_nodes": 16, "mc_inner": 512}}),
    ("ou_simulate", {"seed": 1, "nu": 2, "d": 2, "X0": [[1, 0], [0, 1]], "horizon": 0.1, "dt": 0.01}),
    ("ou_simulate", {"seed": 1, "nu": 1, "d": 1, "horizon": 0.1, "dt": 0.01, "paths": 100}),
    ("clt_experiment", {"seed": 1, "nu": 1, "d": 1, "ns": [10, 100], "count": 1000, "family_size": 4}),
    ("t_experiment", {"seed": 1, "nu": 1, "d": 1, "n_dofs": [6], "count": 1000, "family_size": 4}),
    ("estimate", {"seed": 1, "method": "masked", "true_Psi": [[1, 0.2], [0.2, 1]], "true_Sigma": [[1, 0], [0, 1]],
                  "count": 500, "P": [[0, 0], [0, 1]], "Q": [[1, 0], [0, 1]]}),
    ("estimate", {"seed": 1, "method": "structured", "true_Psi": [[1, 0], [0, 2]], "true_Sigma": [[1, 0], [0, 3]],
                  "count": 500, "basis": {"B": [[[1, 0], [0, 0]], [[0, 0], [0, 1]]], "A": [[[1, 0], [0, 0]], [[0, 0], [0, 1]]],
                                          "U": [[[1, 0], [0, 0]], [[0, 0], [0, 1]]], "W": [[[1, 0], [0, 0]], [[0, 0], [0, 1]]]}}),
])
@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_subcommands_run(tmp_path, exp, params, fmt):
    cfg = {"experiment": exp, "format": fmt, "params": params}
    out = tmp_path / f"out.{fmt}"
    assert main([exp, "--config", _write(tmp_path, cfg), "--output", str(out)]) == 0
    first = out.read_bytes()
    assert main([exp, "--config", _write(tmp_path, cfg), "--output", str(out)]) == 0
    assert out.read_bytes() == first
    assert config_hash(cfg) in first.decode()
    if fmt == "json":
        doc = json.loads(first)
        assert doc["provenance"]["config_hash"] == config_hash(cfg)
        assert doc["provenance"]["seeds"]["seed"] == 1


def test_threads_env_fallback(tmp_path, monkeypatch):
    cfg = {"experiment": "sample", "params": {"seed": 3, "count": 10, "nu": 1, "d": 2}}
    monkeypatch.setenv("MATSTEIN_THREADS", "2")
    out = tmp_path / "o.json"
    assert main(["sample", "--config", _write(tmp_path, cfg), "--output", str(out)]) == 0
    assert json.loads((tmp_path / "o.json.runinfo.json").read_text())["threads"] == 2
    data = np.array(json.loads(out.read_text())["results"]["samples"])
    assert data.shape == (10, 1, 2)
