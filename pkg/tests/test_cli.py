import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from metaseird.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main
from metaseird.core import I

REGIONS = "id,name,population,lat,lon\n0,North,200000,33.0,-97.0\n1,South,350000,30.0,-98.0\n2,West,120000,31.5,-102.0\n"
BASE = {
    "time_unit": "day",
    "params": {"lambda_S": 0.4, "lambda_E": 0.1, "lambda_R": 0.0714285714, "lambda_D": 0.01},
    "tests": {"alpha": 0.01, "beta": 0.85, "zeta": 3.3333333333, "eps4": 0.2},
    "eps": {"eps1": 0.03, "eps3": 0.1},
}


def write_config(tmp_path, name="run.yaml", **changes):
    (tmp_path / "regions.csv").write_text(REGIONS)
    raw = {**BASE, "regions": "regions.csv", "seed": 3, "output": "out",
           "simulate": {"horizon": 120, "initial_infectives": {0: 20}}, **changes}
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def run(*args):
    return main([str(a) for a in args])


# ---------------------------------------------------------------- simulate


def test_simulate_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg) == 0
    out = tmp_path / "out"
    assert capsys.readouterr().out.strip() == str(out)
    summary = rows(out / "summary.csv")
    assert [r["region_id"] for r in summary] == ["0", "1", "2"]
    truth = rows(out / "ground_truth.csv")
    assert len(truth) == 120 * 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 3 and manifest["time_unit"] == "day"
    assert "numpy" in manifest["versions"]
    assert (out / "config.resolved.yaml").exists()


def test_texas_simulation_grows_between_snapshots(tmp_path):
    cfg = tmp_path / "texas.yaml"
    cfg.write_text(yaml.safe_dump({**BASE, "seed": 1, "output": "out",
                                   "simulate": {"horizon": 200, "initial_infectives": {0: 5}}}))
    assert run("simulate", "--config", cfg) == 0
    truth = rows(tmp_path / "out" / "ground_truth.csv")
    inf = {(int(r["t"]), int(r["region_id"])): int(r["I"]) for r in truth}
    assert inf[60, 0] < inf[90, 0] < inf[100, 0]
    assert inf[100, 0] / inf[90, 0] > 1.5
    summary = rows(tmp_path / "out" / "summary.csv")
    assert len(summary) == 11 and all(int(r["final_D"]) > 0 for r in summary)


def test_horizon_one(tmp_path):
    cfg = write_config(tmp_path, simulate={"horizon": 1, "initial_infectives": [5, 0, 0]})
    assert run("simulate", "--config", cfg) == 0
    assert len(rows(tmp_path / "out" / "observations.csv")) == 3
    assert len(rows(tmp_path / "out" / "ground_truth.csv")) == 3


def test_missing_region_file(tmp_path, capsys):
    cfg = write_config(tmp_path, regions="nowhere.csv")
    assert run("simulate", "--config", cfg) == EXIT_DATA
    assert "nowhere.csv" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, simulate={"horizon": -3})
    assert run("simulate", "--config", cfg) == EXIT_CONFIG
    assert "simulate.horizon" in capsys.readouterr().err


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("simulate", "--config", cfg, "--out", tmp_path / "b") == 0
    for name in ("ground_truth.csv", "observations.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run("simulate", "--config", cfg, "--out", tmp_path / "c", "--seed", 99) == 0
    assert (tmp_path / "a" / "observations.csv").read_bytes() != (tmp_path / "c" / "observations.csv").read_bytes()


def test_resolved_config_reproduces_run(tmp_path):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg, "--seed", 8) == 0
    resolved = tmp_path / "resolved.yaml"
    shutil.copy(tmp_path / "out" / "config.resolved.yaml", resolved)
    assert run("simulate", "--config", resolved, "--out", tmp_path / "again") == 0
    assert (tmp_path / "out" / "observations.csv").read_bytes() == \
        (tmp_path / "again" / "observations.csv").read_bytes()


# ---------------------------------------------------------------- filter


def test_filter_synthetic(tmp_path):
    cfg = write_config(tmp_path)
    assert run("filter", "--config", cfg) == 0
    out = tmp_path / "out"
    states = rows(out / "filter_states.csv")
    assert len(states) == 120 * 3
    assert {"var_I", "pred_P", "obs_P", "flags", "true_I"} <= set(states[0])
    summary = json.loads((out / "filter_summary.json").read_text())
    assert np.isfinite(summary["loglik"])
    assert summary["loglik"] == pytest.approx(sum(summary["loglik_by_region"].values()))
    assert json.loads((out / "manifest.json").read_text())["loglik"] == summary["loglik"]


def test_filter_single_week(tmp_path):
    obs = tmp_path / "week.csv"
    obs.write_text("t,region_id,P,Q,rt,rp\n2020-09-06,0,40,2,0.01,0.06\n2020-09-06,1,55,1,0.01,0.05\n"
                   "2020-09-06,2,12,0,0.02,0.04\n")
    cfg = write_config(tmp_path, observations="week.csv", time_unit="week")
    assert run("filter", "--config", cfg) == 0
    states = rows(tmp_path / "out" / "filter_states.csv")
    assert [(r["t"], r["region_id"]) for r in states] == [("2020-09-06", str(i)) for i in range(3)]


def test_filter_flags_infeasible_positivity(tmp_path):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "sim") == 0
    obs = rows(tmp_path / "sim" / "observations.csv")
    for r in obs:
        if r["t"] == "100":
            r["rp"] = "0.005"  # below alpha
    with open(tmp_path / "edited.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(obs[0]))
        w.writeheader()
        w.writerows(obs)
    cfg2 = write_config(tmp_path, name="f.yaml", observations="edited.csv")
    assert run("filter", "--config", cfg2) == 0
    states = rows(tmp_path / "out" / "filter_states.csv")
    flagged = {r["t"] for r in states if int(r["flags"]) & 2}
    assert "100" in flagged
    summary = json.loads((tmp_path / "out" / "filter_summary.json").read_text())
    assert "100" in summary["carried_eps_steps"]


def test_filter_needs_known_parameters(tmp_path, capsys):
    cfg = write_config(tmp_path, params={**BASE["params"], "lambda_S": {"unknown": True, "lower": 0.1,
                                                                           "upper": 0.9}})
    assert run("filter", "--config", cfg) == EXIT_CONFIG
    assert "fit" in capsys.readouterr().err


def test_numerical_error_exit_code(tmp_path, capsys):
    obs = tmp_path / "obs.csv"
    obs.write_text("t,region_id,P,Q,rt,rp\n1,0,150000,0,0.01,0.05\n1,1,10,0,0.01,0.05\n1,2,10,0,0.01,0.05\n")
    cfg = write_config(tmp_path, observations="obs.csv")
    assert run("filter", "--config", cfg) == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "t=0" in err and "region=0" in err


# ---------------------------------------------------------------- fit


FIT_PARAMS = {"lambda_S": {"unknown": True, "lower": 0.1, "upper": 0.8}, "lambda_E": 0.1,
              "lambda_R": {"unknown": True, "lower": 0.03, "upper": 0.2}, "lambda_D": 0.01}


def test_fit_outputs_and_determinism(tmp_path):
    sim = write_config(tmp_path)
    assert run("simulate", "--config", sim, "--out", tmp_path / "sim") == 0
    cfg = write_config(tmp_path, name="fit.yaml", observations="sim/observations.csv", params=FIT_PARAMS,
                       fss={"school_size": 6, "iterations": 6})
    for out in ("a", "b"):
        assert run("fit", "--config", cfg, "--out", tmp_path / out) == 0
    result = json.loads((tmp_path / "a" / "fit_result.json").read_text())
    assert set(result["theta_hat"]) == {"lambda_S", "lambda_R"}
    assert result["evaluations"] == 6 * (1 + 2 * 6)
    assert 0.1 <= result["theta_hat"]["lambda_S"] <= 0.8
    assert len(rows(tmp_path / "a" / "fit_trace.csv")) == 6
    preds = rows(tmp_path / "a" / "fit_predictions.csv")
    assert len(preds) == 119 * 3 and {"observed_P", "predicted_P", "observed_Q", "predicted_Q"} <= set(preds[0])
    for name in ("fit_result.json", "fit_trace.csv", "fit_predictions.csv", "filter_states.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_without_unknowns(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("fit", "--config", cfg) == EXIT_CONFIG
    assert "filter" in capsys.readouterr().err


# ---------------------------------------------------------------- forecast


def forecast_rows(out):
    return rows(out / "forecast.csv")


def test_forecast_zero_steps_echoes_state(tmp_path):
    cfg = write_config(tmp_path)
    assert run("filter", "--config", cfg) == 0
    assert run("forecast", "--config", cfg, "--steps", 0) == 0
    fc = forecast_rows(tmp_path / "out")
    state = json.loads((tmp_path / "out" / "filter_state.json").read_text())
    assert len(fc) == 3
    for r, mean in zip(fc, state["means"]):
        np.testing.assert_allclose([float(r[c]) for c in "SEIRD"], mean, rtol=1e-15)


def test_forecast_disease_free_is_flat(tmp_path):
    obs = tmp_path / "obs.csv"
    obs.write_text("t,region_id,P,Q,rt,rp\n" + "".join(
        f"{t},{i},0,0,0.01,0.05\n" for t in (1, 2) for i in range(3)))
    cfg = write_config(tmp_path, observations="obs.csv")
    assert run("filter", "--config", cfg) == 0
    assert run("forecast", "--config", cfg, "--steps", 5) == 0
    fc = forecast_rows(tmp_path / "out")
    for i in range(3):
        path = [[float(r[c]) for c in "SEIRD"] for r in fc if r["region_id"] == str(i)]
        assert len(path) == 6
        np.testing.assert_allclose(path, [path[0]] * 6, atol=1e-9)


def test_forecast_holdout_within_three_sd(tmp_path):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "sim") == 0
    obs = rows(tmp_path / "sim" / "observations.csv")
    head = [r for r in obs if int(r["t"]) <= 80]
    with open(tmp_path / "head.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(obs[0]))
        w.writeheader()
        w.writerows(head)
    fcfg = write_config(tmp_path, name="f.yaml", observations="head.csv")
    assert run("filter", "--config", fcfg) == 0
    assert run("forecast", "--config", fcfg, "--steps", 4) == 0
    fc = forecast_rows(tmp_path / "out")
    held = {(int(r["t"]), int(r["region_id"])): float(r["P"]) for r in obs}
    for r in fc:
        k, i = int(r["step"]), int(r["region_id"])
        if k == 0:
            continue
        assert abs(float(r["P"]) - held[80 + k, i]) <= 3 * float(r["P_sd"]), (k, i)


def test_forecast_without_prior_state(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("forecast", "--config", cfg, "--steps", 2) == EXIT_DATA
    assert "filter_state.json" in capsys.readouterr().err
