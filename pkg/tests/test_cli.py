import json

from mimo_otfs.cli import main


def test_overhead(capsys):
    assert main(["overhead", "--users", "3"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["K"] == 3 and rep["ul_samples"] == 3 * (8 + 24)


def test_schedule_writes_plan(tmp_path, capsys):
    assert main(["schedule", "--users", "4", "--out", str(tmp_path)]) == 0
    obj = json.loads((tmp_path / "schedule.json").read_text())
    assert obj["violations"] == [] and len(obj["signatures"]) == 4


def test_oracle_check(capsys):
    assert main(["oracle-check"]) == 0
    assert json.loads(capsys.readouterr().out)["monotone"]


def test_sweep_from_config(tmp_path, capsys):
    ini = tmp_path / "exp.ini"
    ini.write_text("[experiment]\nvalues = 20\ntrials = 1\nmax_iter = 2\nrecord_runtime = no\n")
    assert main(["sweep", "--config", str(ini), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "sweep.csv").exists()
    assert "snr=20" in capsys.readouterr().out
