import json
import subprocess
import sys
from pathlib import Path

import pytest

from bayesimpulse.cli import EXIT_CONFIG, EXIT_HASH, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(*argv):
    return main([str(a) for a in argv])


def test_one_shot_pipeline(tmp_path, capsys):
    cfg = CONFIGS / "one_shot.cfg"
    assert run("solve", "--config", cfg, "--out", tmp_path, "--csv") == 0
    report = json.loads((tmp_path / "solve_report.json").read_text())
    assert report["value_at_start"] == 0.5
    assert (tmp_path / "value_field.csv").exists()
    assert run("policy", "--config", cfg, "--out", tmp_path) == 0
    assert run("simulate", "--config", cfg, "--out", tmp_path) == 0
    assert (tmp_path / "trajectories.csv").exists()
    assert run("evaluate", "--config", cfg, "--out", tmp_path) == 0
    ev = json.loads((tmp_path / "evaluation.json").read_text())
    assert ev["within_lower_band"] and ev["n_paths"] == 20000
    assert run("oracle-compare", "--config", cfg, "--out", tmp_path) == 0
    cmp = json.loads((tmp_path / "oracle_compare.json").read_text())
    assert cmp["exact_value"] == "1/2" and cmp["max_abs_error"] == 0.0


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    data = json.loads((CONFIGS / "all_wait.cfg").read_text())
    data["grid"]["bogus"] = 1
    bad.write_text(json.dumps(data))
    assert run("solve", "--config", bad, "--out", tmp_path) == EXIT_CONFIG
    assert "unknown key 'grid.bogus'" in capsys.readouterr().err
    assert run("solve", "--config", tmp_path / "missing.cfg", "--out", tmp_path) == EXIT_CONFIG


def test_policy_from_another_model_exits_4(tmp_path, capsys):
    assert run("policy", "--config", CONFIGS / "all_wait.cfg", "--out", tmp_path) == 0
    other = tmp_path / "other.cfg"
    data = json.loads((CONFIGS / "all_wait.cfg").read_text())
    data["model"]["order_cost"] = 4.0
    other.write_text(json.dumps(data))
    assert run("evaluate", "--config", other, "--out", tmp_path) == EXIT_HASH
    assert "hash mismatch" in capsys.readouterr().err


def test_check_certificate_command(tmp_path, capsys):
    assert run("check", "--config", CONFIGS / "certificate.cfg", "--out", tmp_path, "--certificate") == 0
    rep = json.loads((tmp_path / "check_report.json").read_text())
    assert rep["certificate_passes"] is True
    assert run("check", "--config", CONFIGS / "constant_certificate.cfg", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "check_report.json").read_text())
    assert rep["certificate_passes"] is False
    assert run("check", "--config", CONFIGS / "all_wait.cfg", "--out", tmp_path, "--certificate") == EXIT_CONFIG


@pytest.mark.parametrize("threads", [1, 4])
def test_outputs_do_not_depend_on_threads(tmp_path, capsys, threads):
    cfg = CONFIGS / "all_wait.cfg"
    ref = tmp_path / "ref"
    out = tmp_path / f"t{threads}"
    for d, t in ((ref, 1), (out, threads)):
        assert run("policy", "--config", cfg, "--out", d, "--threads", t) == 0
        assert run("evaluate", "--config", cfg, "--out", d, "--threads", t) == 0
    for name in ("value_field.bin", "policy.bin", "evaluation.json"):
        assert (ref / name).read_bytes() == (out / name).read_bytes()


def test_console_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "bayesimpulse.cli", "solve", "--config", str(CONFIGS / "all_wait.cfg"), "--level", "1"],
        cwd=tmp_path,
        capture_output=True,
        text=True,
        env={"BAYESIMPULSE_OUT": str(tmp_path / "envout"), "PATH": ""},
    )
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "envout" / "value_field.bin").exists()
