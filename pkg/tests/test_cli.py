import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from emtts import __version__
from emtts.cli import main
from emtts.records import ChannelGroup, RunRecord


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "quick"
    assert main(["run", "builtin:quickstart", "--out", str(out), "--duration", "0.15"]) == 0
    return out


def test_run_writes_csvs_and_manifest(quick_run):
    files = {p.name for p in quick_run.iterdir()}
    assert {"emt.csv", "phasor.csv", "manifest.json"} <= files
    man = _manifest(quick_run)
    assert man["status"] == "ok" and man["exit_code"] == 0
    assert man["artifact_version"] == __version__
    assert len(man["scenario_hash"]) == 64
    assert man["overrides"] == {"duration": 0.15}
    assert "overruns" in man and "start_time" in man
    assert set(man["files"]) >= files


def test_csv_format(quick_run):
    raw = (quick_run / "emt.csv").read_bytes()
    assert b"\r\n" not in raw
    with open(quick_run / "emt.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "time_s"
    assert "v_pcc.a" in rows[0] and "w_150.a" in rows[0]
    assert len(rows) - 1 == 1500
    # full double precision survives the round trip
    rec = RunRecord.read(quick_run)
    assert rec.data_hash() == _manifest(quick_run)["data_hash"]


def test_missing_scenario_exit_1(tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["run", str(tmp_path / "nope.json"), "--out", str(out)])
    assert code == 1
    assert "nope.json" in capsys.readouterr().err
    man = _manifest(out)
    assert man["status"] == "input_error" and man["exit_code"] == 1


def test_bad_override_exit_1(tmp_path):
    assert main(["run", "builtin:quickstart", "--out", str(tmp_path), "--h", "1ms", "--H", "1.5ms"]) == 1


def test_unknown_command_exit_1():
    assert main(["explode"]) == 1


def test_validate(capsys):
    assert main(["validate", "builtin:bess_step3"]) == 0
    assert "1 events" in capsys.readouterr().out


def test_overrides_shadow_file(tmp_path):
    out = tmp_path / "interp"
    assert main(["run", "builtin:quickstart", "--out", str(out), "--duration", "0.05",
                 "--coupling-mode", "interpolated", "--no-feedforward"]) == 0
    man = _manifest(out)
    assert man["mode"] == "interpolated" and man["feedforward"] is False
    assert man["overrides"]["coupling_mode"] == "interpolated"


def test_step_three_trace_shows_transient(tmp_path):
    out = tmp_path / "s3"
    assert main(["run", "builtin:bess_step3", "--out", str(out), "--duration", "0.4"]) == 0
    rec = RunRecord.read(out)
    t, v = rec.channel("v_150.a")
    t_fire = rec.events[0][0]
    before = v[(t > t_fire - 0.02) & (t < t_fire)]
    after = v[(t > t_fire + 0.005) & (t < t_fire + 0.05)]
    assert before.mean() - after.min() > 0.02


def test_no_writes_outside_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "builtin:quickstart", "--out", "here", "--duration", "0.02"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["here"]


# ----------------------------------------------------------- delay sweep
def test_delay_sweep_single_row(tmp_path):
    out = tmp_path / "sweep"
    assert main(["delay-sweep", "builtin:quickstart", "--H", "1ms", "--trials", "3", "--out", str(out)]) == 0
    with open(out / "delays.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert float(rows[0]["delay_max_s"]) <= 2.1e-3 + 1e-12
    assert rows[0]["within_bound"] == "True"
    with open(out / "delay_trials.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    assert _manifest(out)["overrides"]["seed"] == 0


def test_delay_sweep_seed_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("COSIM_SEED", "7")
    out = tmp_path / "sweep"
    assert main(["delay-sweep", "builtin:quickstart", "--H", "1ms", "--trials", "2", "--out", str(out)]) == 0
    assert _manifest(out)["overrides"]["seed"] == 7


def test_delay_sweep_non_integer_ratio(tmp_path, capsys):
    out = tmp_path / "bad"
    assert main(["delay-sweep", "builtin:quickstart", "--H", "1.5ms", "--h", "1ms", "--out", str(out)]) == 1
    assert "integer multiple" in capsys.readouterr().err
    assert _manifest(out)["status"] == "input_error"


# --------------------------------------------------------------- compare
def test_compare_self_is_zero(quick_run, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", str(quick_run), str(quick_run), "--out", str(out)]) == 0
    with open(out / "channel_rmse.csv") as fh:
        vals = [float(r["rmse"]) for r in csv.DictReader(fh)]
    assert vals and all(v == 0.0 for v in vals)
    with open(out / "pcc_rms_rmse.csv") as fh:
        assert all(float(r["rmse_pu"]) == 0.0 for r in csv.DictReader(fh))
    for name in ("traces.csv", "cost.csv", "summary.txt"):
        assert (out / name).exists()


def test_compare_disjoint_exit_2(quick_run, tmp_path, capsys):
    t = np.arange(1, 11) * 1e-3
    other = tmp_path / "other"
    RunRecord({"emt": ChannelGroup(1e-3, t, {"x": t}), "phasor": ChannelGroup(1e-3, t, {"y": t})},
              {"v_base": 1.0}).write(other)
    out = tmp_path / "cmp"
    assert main(["compare", str(quick_run), str(other), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "no shared channels" in err and "lacks v_pcc.a" in err
    assert _manifest(out)["status"] == "failed"


def test_compare_missing_dir_exit_1(quick_run, tmp_path):
    assert main(["compare", str(quick_run), str(tmp_path / "none"), "--out", str(tmp_path / "c")]) == 1


def test_console_script_version():
    exe = os.path.join(os.path.dirname(sys.executable), "cosim")
    cmd = [exe] if os.path.exists(exe) else [sys.executable, "-m", "emtts.cli"]
    res = subprocess.run(cmd + ["--version"], capture_output=True, text=True, check=True)
    assert __version__ in res.stdout
