import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from netcbf import cli, config

GOLDEN = Path(__file__).parent / "golden"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pinned(tmp_path_factory):
    # fixed tolerances so no calibration runs are needed
    path = tmp_path_factory.mktemp("scn") / "pinned.toml"
    config.bundled().with_calibration(2.5e-5, 6.4e-17, 0.12).save(path)
    return path


def test_headers():
    assert cli.trace_header(2) == ["step", "t_s", "h_min", "dist_obs1", "dist_obs2", "ee_x", "ee_y",
                                   "u1", "u2", "u3", "intervened"]
    assert cli.SUMMARY_HEADER == ["architecture", "safe_rate", "reach_rate", "success_rate",
                                  "avg_reach_time_s", "peak_jerk_mean", "peak_jerk_max", "n_runs", "seed"]
    assert cli.ENVELOPE_HEADER == ["architecture", "step", "t_s", "obstacle", "mean", "min", "max"]


@pytest.mark.parametrize("v, s", [
    (1.0, "1"), (0.1234567, "0.123457"), (1234567.0, "1.23457e+06"), (True, "1"),
    (np.int64(7), "7"), (float("nan"), "nan"), (-2.5e-7, "-2.5e-07"),
])
def test_number_format(v, s):
    assert cli.fmt(v) == s


def bounds_lines(capsys, *args):
    assert cli.main(["bounds", *args]) == 0
    return dict(ln.split(None, 1) for ln in capsys.readouterr().out.splitlines())


def test_bounds_zero_delay_single_step(capsys):
    out = bounds_lines(capsys, "--h", "0.1", "--gamma", "0.2", "--Lh", "1", "--Lf", "1.1",
                       "--Lg", "0.2", "--umax", "2", "--tau", "0", "--N", "1")
    wl = float(out["w_bar_l"])
    assert wl == pytest.approx(0.8 * 0.1, rel=1e-5)
    assert float(out["w_bar_r"].split()[0]) == pytest.approx(wl, rel=1e-5)
    assert float(out["L_d"]) == pytest.approx(1.5)
    assert all(out[c] == "PASS" for c in ("clause1", "clause2", "clause3"))


def test_bounds_gamma_one_gives_zero(capsys):
    out = bounds_lines(capsys, "--h", "0.1", "--gamma", "1", "--Lh", "1", "--Lf", "1",
                       "--Lg", "1", "--umax", "1", "--tau", "3", "--N", "2")
    assert float(out["w_bar_l"]) == 0.0
    assert float(out["w_bar_r"].split()[0]) == 0.0


def test_bounds_robot_constants(capsys):
    out = bounds_lines(capsys, "--h", "2.8e-5", "--gamma", "0.1", "--Lh", "0.99", "--Lf", "1.22",
                       "--Lg", "1.11", "--umax", "8.66", "--tau", "7", "--N", "5")
    assert float(out["w_bar_r"].split()[0]) < float(out["w_bar_l"])
    assert out["clause3"] == "PASS"


@pytest.mark.parametrize("h, Lh", [("-1", "1"), ("0.1", "0"), ("0.1", "-2")])
def test_bounds_rejects_bad_input(capsys, h, Lh):
    assert cli.main(["bounds", "--h", h, "--gamma", "0.5", "--Lh", Lh, "--Lf", "1",
                     "--Lg", "1", "--umax", "1"]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_section_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    text = config.bundled_path().read_text()
    bad.write_text(text.replace("[arm]", "[armm]"))
    assert cli.main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "armm" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "nope.toml")]) == 2


def test_run_outputs_and_determinism(pinned, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["run", str(pinned), "--arch", "combined", "--seed", "42", "--steps", "60",
                         "--out", str(out)]) == 0
    assert (a / "trace.csv").read_text() == (b / "trace.csv").read_text()
    rows = read_csv(a / "trace.csv")
    assert rows[0] == cli.trace_header(2)
    assert len(rows) == 61
    assert [r[0] for r in rows[1:4]] == ["0", "1", "2"]
    summary = json.loads((a / "summary.json").read_text())
    assert summary["steps"] == 60 and summary["seed"] == 42
    assert summary["calibration"]["pinned"] is True
    assert summary["reach_time_s"] is None  # NaN is written as null
    assert "Combined" in capsys.readouterr().out


def test_run_matches_golden_trace(pinned, tmp_path):
    cli.main(["run", str(pinned), "--arch", "combined", "--seed", "42", "--steps", "60",
              "--out", str(tmp_path)])
    got, want = read_csv(tmp_path / "trace.csv"), read_csv(GOLDEN / "trace_combined_seed42_60.csv")
    assert got[0] == want[0] and len(got) == len(want)
    for g, w in zip(got[1:], want[1:]):
        for x, y in zip(g, w):
            assert float(x) == pytest.approx(float(y), rel=1e-5, abs=1e-9)


def test_batch_outputs(pinned, tmp_path):
    out = tmp_path / "batch"
    assert cli.main(["batch", str(pinned), "--runs", "2", "--steps", "30", "--workers", "1",
                     "--out-dir", str(out)]) == 0
    summary = read_csv(out / "summary.csv")
    assert summary[0] == cli.SUMMARY_HEADER
    assert [r[0] for r in summary[1:]] == ["local_cbf", "mpc_cbf", "combined"]
    env = read_csv(out / "envelope.csv")
    assert env[0] == cli.ENVELOPE_HEADER
    # clearance to a disc can never drop below minus its radius
    radii = config.load(pinned).obstacles.radii
    assert all(float(r[5]) >= -radii[int(r[3]) - 1] for r in env[1:])
    # 31 visited states per run, two obstacles, three architectures
    assert len(env) == 1 + 3 * 31 * 2
    traces = sorted(p.name for p in (out / "traces").iterdir())
    assert traces[0] == "combined_run000.csv" and len(traces) == 6
    js = json.loads((out / "summary.json").read_text())
    assert len(js["run_seeds"]) == 2
    assert math.isclose(js["disturbance"]["clip"], 0.002)


def test_batch_matches_golden_summary(pinned, tmp_path):
    cli.main(["batch", str(pinned), "--runs", "2", "--steps", "30", "--workers", "1",
              "--no-traces", "--out-dir", str(tmp_path)])
    assert read_csv(tmp_path / "summary.csv") == read_csv(GOLDEN / "summary_2runs_30.csv")
    assert not (tmp_path / "traces").exists()


def test_calibrate_write_round_trip(tmp_path, capsys):
    src = tmp_path / "line.toml"
    cfg = config.bundled()
    cfg.save(src)
    dst = tmp_path / "pinned.toml"
    assert cli.main(["calibrate", str(src), "--steps", "40", "--margin-runs", "0",
                     "--write", str(dst)]) == 0
    out = capsys.readouterr().out
    assert "w_bar_l" in out and "L_d" in out
    back = config.load(dst)
    assert back.pinned_calibration
    assert back.mpc.w_bar_r <= back.mpc.w_bar_l
    assert back.run.sim_steps == 40


def test_disturbance_free_run_stops_at_completion(pinned, tmp_path):
    assert cli.main(["run", str(pinned), "--arch", "mpc_cbf", "--clip", "0", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["reached_all"] and not summary["safety_violated"]
    rows = read_csv(tmp_path / "trace.csv")
    assert len(rows) - 1 == summary["steps"] == summary["reach_steps"][-1]
