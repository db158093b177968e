"""Command-line driver: ``metaseird {simulate,filter,fit,forecast}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
error (time/region context on stderr).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, _jit
from .config import RunConfig, dump_config, load_config
from .core import COMPARTMENTS, I, D, EpiParams, EpsilonSet, TestParams, gravity_coupling
from .data import (
    FLAG_CARRIED_EPS,
    CleanSeries,
    generate_synthetic,
    load_observations,
    load_regions,
    texas_regions,
    write_ground_truth,
    write_series,
)
from .errors import ConfigError, DataError, ModelError
from .estimate import fit
from .ukf import filter_series, forecast

log = logging.getLogger("metaseird")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
STATE_FILE = "filter_state.json"


def _fmt(v) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


class Run:
    """Resolved inputs shared by the subcommands."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.regions = load_regions(cfg.regions) if cfg.regions else texas_regions()
        if not self.regions:
            raise DataError(f"{cfg.regions}: no regions")
        self.coupling = gravity_coupling(self.regions, cfg.coupling_exponent, cfg.coupling_cap)
        self.populations = np.array([r.population for r in self.regions], dtype=float)
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self.flags_raised: list[str] = []

    def full_params(self):
        if self.cfg.params_unknown:
            raise ConfigError(f"params: {sorted(self.cfg.params_unknown)} are marked unknown; "
                              "this command needs every rate fixed (use `fit`)")
        return self.cfg.param_spec.assemble(())

    def synthetic(self, params):
        cfg = self.cfg
        if cfg.horizon is None:
            raise ConfigError("simulate.horizon: required when no observations file is given")
        eps = cfg.eps_set()
        if eps is None:
            raise ConfigError("eps: required to generate synthetic observations")
        infectives = np.zeros(len(self.regions), dtype=np.int64)
        for rid, n in cfg.initial_infectives.items():
            if not 0 <= rid < len(self.regions):
                raise ConfigError(f"simulate.initial_infectives: no region {rid}")
            infectives[rid] = n
        return generate_synthetic(self.regions, params, cfg.tests, eps, cfg.horizon, cfg.seed, infectives,
                                  self.coupling)

    def series(self, params=None) -> tuple[CleanSeries, np.ndarray | None]:
        cfg = self.cfg
        if cfg.observations:
            series = load_observations(cfg.observations, self.regions, cfg.time_unit)
            if series.region_ids != [r.id for r in self.regions]:
                raise DataError(f"{cfg.observations}: region ids {series.region_ids} do not match the region file")
            if np.isnan(series.obs.rt).any() or np.isnan(series.obs.rp).any():
                raise DataError(f"{cfg.observations}: testing or positivity rates missing for a whole region")
            return series, None
        if params is None:
            params = self.cfg.param_spec.assemble(()) if not self.cfg.params_unknown else None
        if params is None:
            raise ConfigError("synthetic observations need fully specified params; give an observations file")
        truth, series = self.synthetic(params)
        series.time_unit = cfg.time_unit
        return series, truth

    def manifest(self, command: str, extra: dict) -> None:
        info = {
            "command": command,
            "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
            "seed": self.cfg.seed,
            "time_unit": self.cfg.time_unit,
            "inputs": {"regions": self.cfg.regions or "builtin:texas_hhs", "observations": self.cfg.observations},
            "versions": {"metaseird": __version__, "numpy": np.__version__, "python": platform.python_version(),
                         "numba": _jit.numba.__version__ if _jit.HAVE_NUMBA else None,
                         "jit": _jit.USE_NUMBA},
            "flags_raised": self.flags_raised,
            **extra,
        }
        (self.out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        dump_config(self.cfg, self.out / "config.resolved.yaml")


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig) -> Path:
    run = Run(cfg)
    params = run.full_params()
    truth, series = run.synthetic(params)
    write_ground_truth(run.out / "ground_truth.csv", truth, series.labels, series.region_ids)
    write_series(run.out / "observations.csv", series)
    rows = []
    for i, region in enumerate(run.regions):
        peak_t = int(np.argmax(truth[:, i, I]))
        rows.append([region.id, region.name, _fmt(truth[peak_t, i, I]), series.labels[peak_t],
                     _fmt(truth[-1, i, D])])
    _write_csv(run.out / "summary.csv", ["region_id", "name", "peak_I", "peak_t", "final_D"], rows)
    run.manifest("simulate", {"horizon": cfg.horizon, "params": dataclasses.asdict(params)})
    return run.out


def _run_filter(run: Run, params, series: CleanSeries, truth=None, prefix="filter"):
    cfg = run.cfg
    res = filter_series(series.obs, params, cfg.tests, run.coupling, run.populations, prior_eps=cfg.eps_set(),
                        weighting=cfg.weighting, eps_mode=cfg.eps_mode)
    flags = series.flags | np.where(res.eps_flags, FLAG_CARRIED_EPS, 0)
    header = (["t", "region_id"] + list(COMPARTMENTS) + [f"var_{c}" for c in COMPARTMENTS]
              + ["pred_P", "pred_Q", "obs_P", "obs_Q", "eps1", "eps2", "eps3", "flags"])
    if truth is not None:
        header += [f"true_{c}" for c in COMPARTMENTS]
    rows = []
    t_len, g = series.obs.shape
    for t in range(t_len):
        for i in range(g):
            row = [series.labels[t], series.region_ids[i]]
            row += [_fmt(v) for v in res.means[t, i]]
            row += [_fmt(v) for v in np.diag(res.covs[t, i])]
            row += ["" if np.isnan(v) else _fmt(v) for v in res.predicted_obs[t, i]]
            row += [_fmt(series.obs.p[t, i]), _fmt(series.obs.q[t, i])]
            row += ["" if np.isnan(v) else _fmt(v) for v in res.eps[t, i, :3]]
            row.append(int(flags[t, i]))
            if truth is not None:
                row += [_fmt(v) for v in truth[t, i]]
            rows.append(row)
    _write_csv(run.out / f"{prefix}_states.csv", header, rows)
    flagged = [series.labels[t] for t in np.flatnonzero(res.eps_flags.any(axis=1))]
    if flagged:
        run.flags_raised.append(f"carried testing fractions at {len(flagged)} step(s)")
    if series.corrections:
        run.flags_raised.append(f"{len(series.corrections)} data correction(s) during cleaning")
    summary = {
        "loglik": res.loglik,
        "loglik_by_region": {str(rid): float(v) for rid, v in zip(series.region_ids, res.loglik_increments.sum(0))},
        "carried_eps_steps": flagged,
        "clamped_means": res.clamp_count,
        "params": dataclasses.asdict(params),
    }
    (run.out / f"{prefix}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    last_eps = res.eps[-1] if t_len > 1 else np.tile(
        (cfg.eps_set() or EpsilonSet(0, 0, 0, cfg.tests.eps4)).as_array(), (g, 1))
    state = {
        "label": series.labels[-1],
        "time_unit": series.time_unit,
        "means": res.means[-1].tolist(),
        "covs": res.covs[-1].tolist(),
        "weighting": cfg.weighting,
        "eps": np.asarray(last_eps).tolist(),
        "params": dataclasses.asdict(params),
        "tests": dataclasses.asdict(cfg.tests),
        "populations": run.populations.tolist(),
        "coupling": run.coupling.tolist(),
        "region_ids": list(series.region_ids),
    }
    (run.out / STATE_FILE).write_text(json.dumps(state, indent=2) + "\n")
    return res


def cmd_filter(cfg: RunConfig) -> Path:
    run = Run(cfg)
    params = run.full_params()
    series, truth = run.series(params)
    if truth is not None:
        write_ground_truth(run.out / "ground_truth.csv", truth, series.labels, series.region_ids)
        write_series(run.out / "observations.csv", series)
    res = _run_filter(run, params, series, truth)
    run.manifest("filter", {"loglik": res.loglik})
    return run.out


def cmd_fit(cfg: RunConfig) -> Path:
    spec = cfg.param_spec
    if not spec.names:
        raise ConfigError("params: no parameter is marked unknown; use the `filter` command instead")
    run = Run(cfg)
    series, truth = run.series()
    result = fit(series.obs, spec, cfg.tests, run.coupling, run.populations, cfg.fss_config,
                 prior_eps=cfg.eps_set(), weighting=cfg.weighting, eps_mode=cfg.eps_mode)
    params = result.params
    payload = {
        "theta_hat": result.as_dict(),
        "loglik": result.loglik,
        "evaluations": result.evaluations,
        "params": dataclasses.asdict(params),
        "mean_recovery_time": None if params.lambda_R == 0 else 1.0 / params.lambda_R,
        "time_unit": cfg.time_unit,
        "bounds": {k: list(v) for k, v in spec.unknowns.items()},
    }
    (run.out / "fit_result.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_csv(run.out / "fit_trace.csv", ["iteration", "best_loglik"],
               [[k + 1, repr(v)] for k, v in enumerate(result.trace)])
    res = _run_filter(run, params, series, truth)
    rows = []
    t_len, g = series.obs.shape
    for t in range(1, t_len):
        for i in range(g):
            rows.append([series.labels[t], series.region_ids[i], _fmt(series.obs.p[t, i]),
                         _fmt(res.predicted_obs[t, i, 0]), _fmt(series.obs.q[t, i]), _fmt(res.predicted_obs[t, i, 1])])
    _write_csv(run.out / "fit_predictions.csv",
               ["t", "region_id", "observed_P", "predicted_P", "observed_Q", "predicted_Q"], rows)
    run.manifest("fit", {"loglik": result.loglik, "theta_hat": result.as_dict(), "fss": dataclasses.asdict(cfg.fss_config)})
    return run.out


def cmd_forecast(cfg: RunConfig, steps: int) -> Path:
    if steps < 0:
        raise ConfigError(f"--steps must be >= 0, got {steps}")
    out = Path(cfg.output)
    state_path = out / STATE_FILE
    if not state_path.exists():
        raise DataError(f"no filter state at {state_path}; run `filter` or `fit` with the same --out first")
    state = json.loads(state_path.read_text())
    try:
        params = EpiParams(**state["params"])
        tests = TestParams(**state["tests"])
        eps = [EpsilonSet(*row) for row in state["eps"]]
        fc = forecast(state["means"], state["covs"], steps, params, tests, state["coupling"],
                      state["populations"], eps)
    except KeyError as exc:
        raise DataError(f"{state_path}: missing field {exc}") from None
    rows = []
    for k in range(steps + 1):
        for i, rid in enumerate(state["region_ids"]):
            sd = np.sqrt(np.diag(fc.obs_covs[k, i]))
            rows.append([k, rid] + [_fmt(v) for v in fc.means[k, i]]
                        + [_fmt(v) for v in (*fc.predicted_obs[k, i], *sd)])
    _write_csv(out / "forecast.csv", ["step", "region_id", *COMPARTMENTS, "P", "Q", "P_sd", "Q_sd"], rows)
    return out


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaseird", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("simulate", "simulate a stochastic multi-region epidemic"),
                        ("filter", "estimate hidden states with all rates known"),
                        ("fit", "maximum-likelihood estimation of unknown rates"),
                        ("forecast", "propagate the last filtered state forward")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML/JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        if name == "forecast":
            p.add_argument("--steps", type=int, required=True, help="time units to forecast")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output = str(Path(args.out).resolve())
        if args.command == "simulate":
            out = cmd_simulate(cfg)
        elif args.command == "filter":
            out = cmd_filter(cfg)
        elif args.command == "fit":
            out = cmd_fit(cfg)
        else:
            out = cmd_forecast(cfg, args.steps)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
