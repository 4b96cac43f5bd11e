import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import clockrd as cr
from clockrd.cli import main


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = main(["simulate", "--preset", "paper_like", "--seed", "7",
                 "--days", "50", "--out", str(out)])
    assert code == 0
    return out


def test_simulate_is_byte_deterministic(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        assert main(["simulate", "--preset", "null", "--seed", "7",
                     "--days", "10", "--out", str(d)]) == 0
    assert (d1 / "visits.csv").read_bytes() == (d2 / "visits.csv").read_bytes()
    assert (d1 / "truth.csv").read_bytes() == (d2 / "truth.csv").read_bytes()
    meta = json.loads((d1 / "visits.csv.meta.json").read_text())
    assert meta["config_hash"] == json.loads((d2 / "visits.csv.meta.json").read_text())["config_hash"]


def test_estimate_emits_headline_table(sim_dir, tmp_path):
    out = tmp_path / "est"
    code = main(["estimate", "--input", str(sim_dir / "visits.csv"), "--out", str(out)])
    assert code == 0
    table = pd.read_csv(out / "estimates.csv")
    assert list(table["outcome"]) == ["time_to_roomed", "time_to_dispo",
                                      "admitted", "revisit_30d"]
    for col in ("estimate", "lo", "hi", "formatted", "n_left", "n_right"):
        assert col in table.columns
    meta = json.loads((out / "estimates.csv.meta.json").read_text())
    assert meta["command"] == "estimate"
    assert len(meta["config_hash"]) == 64


def test_missing_outcome_column_exits_2(sim_dir, tmp_path, capsys):
    code = main(["estimate", "--input", str(sim_dir / "visits.csv"),
                 "--outcome", "nope", "--out", str(tmp_path)])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "data"
    assert "nope" in err["message"]


def test_missing_input_file_exits_2(tmp_path, capsys):
    code = main(["estimate", "--input", str(tmp_path / "absent.csv"),
                 "--out", str(tmp_path)])
    assert code == 2


def test_usage_error_exits_1(capsys):
    assert main(["estimate", "--form", "septic"]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "usage"


def test_estimation_failure_exits_3(tmp_path, capsys):
    scenario = cr.preset("null", seed=3, n_days=8)
    visits, _ = cr.simulate(scenario)
    visits["first_order_time"] = 5.0  # constant mediator
    path = tmp_path / "visits.csv"
    cr.write_visits(visits, path)
    code = main(["mediate", "--input", str(path), "--out", str(tmp_path)])
    assert code == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "estimation"


def test_config_file_with_flag_override(sim_dir, tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"input": str(sim_dir / "visits.csv"),
                                  "bandwidth": 2.0, "outcome": "time_to_dispo"}))
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["estimate", "--config", str(config), "--out", str(out1)]) == 0
    assert main(["estimate", "--config", str(config), "--bandwidth", "1.0",
                 "--out", str(out2)]) == 0
    m1 = json.loads((out1 / "estimates.csv.meta.json").read_text())
    m2 = json.loads((out2 / "estimates.csv.meta.json").read_text())
    assert m1["config"]["bandwidth"] == 2.0
    assert m2["config"]["bandwidth"] == 1.0
    n1 = pd.read_csv(out1 / "estimates.csv")["n_left"].iloc[0]
    n2 = pd.read_csv(out2 / "estimates.csv")["n_left"].iloc[0]
    assert n1 > n2


def test_placebo_command(sim_dir, tmp_path):
    out = tmp_path / "placebo"
    code = main(["placebo", "--input", str(sim_dir / "visits.csv"),
                 "--outcome", "time_to_dispo", "--anchors", "7,16,15,12,23,8",
                 "--out", str(out)])
    assert code == 0
    table = pd.read_csv(out / "placebo.csv")
    assert len(table) == 6
    assert sorted(table["anchor_hour"]) == [7.0, 8.0, 12.0, 15.0, 16.0, 23.0]


def test_endhour_command(sim_dir, tmp_path):
    out = tmp_path / "endhour"
    code = main(["endhour", "--input", str(sim_dir / "visits.csv"),
                 "--outcome", "time_to_dispo", "--out", str(out)])
    assert code == 0
    table = pd.read_csv(out / "endhour.csv")
    assert table["anchor"].iloc[0] == "window_end"


def test_moderate_command(sim_dir, tmp_path):
    out = tmp_path / "mod"
    code = main(["moderate", "--input", str(sim_dir / "visits.csv"),
                 "--moderator", "congestion", "--outcome", "time_to_roomed",
                 "--out", str(out)])
    assert code == 0
    table = pd.read_csv(out / "moderation.csv")
    assert set(table["level"]) == {"low", "medium", "high"}


def test_mediate_command_with_levels(sim_dir, tmp_path):
    out = tmp_path / "med"
    code = main(["mediate", "--input", str(sim_dir / "visits.csv"),
                 "--mediator", "time_to_first_order", "--by", "congestion",
                 "--out", str(out)])
    assert code == 0
    table = pd.read_csv(out / "mediation.csv")
    assert list(table["group"]) == ["all", "low", "medium", "high"]


def test_loocv_command(sim_dir, tmp_path):
    out = tmp_path / "cv"
    code = main(["loocv", "--input", str(sim_dir / "visits.csv"),
                 "--outcome", "time_to_dispo", "--bandwidths", "0.5,1",
                 "--out", str(out)])
    assert code == 0
    grid = pd.read_csv(out / "loocv_grid.csv")
    assert list(grid["form"]) == ["linear_shared", "linear_separate", "quadratic"]
    assert "(" in str(grid.iloc[0, 1])


def test_diagnose_command(sim_dir, tmp_path):
    out = tmp_path / "diag"
    code = main(["diagnose", "--input", str(sim_dir / "visits.csv"), "--out", str(out)])
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert "balance.csv" in names
    assert "density_test.csv" in names
    assert "arrivals_hist_1h.csv" in names
    assert "binmeans_time_to_dispo.csv" in names
    # every artifact carries a sidecar
    for name in names:
        if name.endswith(".csv"):
            assert f"{name}.meta.json" in names


def test_cli_subprocess_thread_count_invariance(sim_dir, tmp_path):
    outs = []
    for tag, threads in (("t1", "1"), ("t4", "4")):
        out = tmp_path / tag
        env = {"OMP_NUM_THREADS": threads, "OPENBLAS_NUM_THREADS": threads,
               "PATH": "/usr/bin:/bin:/usr/local/bin"}
        result = subprocess.run(
            [sys.executable, "-m", "clockrd.cli", "estimate",
             "--input", str(sim_dir / "visits.csv"), "--out", str(out)],
            env=env, capture_output=True, text=True)
        assert result.returncode == 0, result.stderr
        outs.append((out / "estimates.csv").read_bytes())
    assert outs[0] == outs[1]
