import json
import subprocess
import sys

import pytest

from svvc import DATA_DIR
from svvc.cli import EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK, EXIT_SOLVER, main
from svvc.feeder import ProfileSet
from test_sim import midday_csv, scenario_doc


def write_scenario(tmp_path, profile, **extra):
    doc = scenario_doc(profile, **extra)
    doc.setdefault("duration_s", 600)
    p = tmp_path / "sc.json"
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture(scope="module")
def profile(tmp_path_factory):
    return midday_csv(tmp_path_factory.mktemp("cli") / "midday.csv")


def test_run_writes_report(tmp_path, profile, capsys):
    sc = write_scenario(tmp_path, profile)
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(sc), "--case", "2", "--out", str(out)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("2,")
    assert (out / "metrics.csv").exists()
    assert (out / "case2_q_injection.png").exists()


def test_run_no_figures(tmp_path, profile):
    sc = write_scenario(tmp_path, profile)
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(sc), "--out", str(out), "--no-figures"]) == EXIT_OK
    assert not list(out.glob("*.png"))
    assert (out / "case3_dispatch_log.csv").exists()


def test_validate(capsys):
    assert main(["validate", "--feeder", str(DATA_DIR / "ieee34_mod.json")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "regulators" in text and "mismatch" in text
    assert main(["validate", "--raw", "--feeder", str(DATA_DIR / "ieee34_mod.json")]) == EXIT_OK


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as err:
        main(["run"])
    assert err.value.code == EXIT_INPUT
    with pytest.raises(SystemExit) as err:
        main(["run", "--scenario", "x.json", "--case", "7"])
    assert err.value.code == EXIT_INPUT


def test_bad_files_exit_one(tmp_path, profile):
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == EXIT_INPUT
    bad = tmp_path / "feeder.json"
    bad.write_text('{"buses": []}')
    assert main(["validate", "--feeder", str(bad)]) == EXIT_INPUT
    p = tmp_path / "p30.csv"
    p.write_text(ProfileSet.constant(20, step_s=30.0).to_csv())
    assert main(["run", "--scenario", str(write_scenario(tmp_path, p, case=1))]) == EXIT_INPUT


def test_infeasible_exit_two(tmp_path, profile):
    sc = write_scenario(tmp_path, profile, duration_s=300,
                        optimizer={"v_min": 0.999, "v_max": 1.001, "v_ref": 1.0, "max_iter": 5})
    assert main(["run", "--scenario", str(sc), "--out", str(tmp_path / "o"), "--no-figures"]) == EXIT_INFEASIBLE


def test_solver_failure_exit_three(tmp_path):
    p = tmp_path / "huge.csv"
    prof = ProfileSet.constant(40, step_s=15.0)
    p.write_text(ProfileSet(prof.time_s, prof.load_mult * 60.0, prof.pv_mult).to_csv())
    sc = write_scenario(tmp_path, p, case=1)
    assert main(["run", "--scenario", str(sc), "--out", str(tmp_path / "o")]) == EXIT_SOLVER


def test_sweep_subset(tmp_path, profile):
    sc = write_scenario(tmp_path, profile, duration_s=300)
    out = tmp_path / "sw"
    assert main(["sweep", "--all-cases", "--scenario", str(sc), "--out", str(out), "--no-figures"]) == EXIT_OK
    lines = (out / "sweep_metrics.csv").read_text().splitlines()
    assert len(lines) == 4
    assert (out / "short" / "metrics.csv").read_text().count("\n") == 4


def test_console_script_module():
    r = subprocess.run([sys.executable, "-m", "svvc.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep" in r.stdout
