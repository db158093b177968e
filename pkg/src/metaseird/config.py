"""Run configuration (YAML or JSON).

Example::

    regions: regions.csv            # omit for the bundled Texas HHS table
    observations: obs.csv           # omit to use a synthetic run (see simulate:)
    time_unit: day                  # day | week, a label only; rates are never converted
    seed: 7
    output: out/
    coupling: {exponent: 2.0, cap: 0.1}
    params:
      lambda_S: {unknown: true, lower: 0.1, upper: 0.8}
      lambda_E: 0.1
      lambda_R: {unknown: true, lower: 0.0333, upper: 0.2}
      lambda_D: 0.01
    tests: {alpha: 0.01, beta: 0.85, zeta: 3.3333333, eps4: 0.2}
    eps: {eps1: 0.03, eps3: 0.1}    # generating values / filter fallback
    filter: {weighting: standard, eps_mode: aggregate}
    simulate: {horizon: 200, initial_infectives: {0: 5}}
    fss: {school_size: 30, iterations: 200}
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core import EpsilonSet, TestParams
from .errors import ConfigError
from .estimate import PARAM_NAMES, FssConfig, ParamSpec
from .ukf import EPS_MODES, WEIGHTINGS

TIME_UNITS = ("day", "week")
_TOP_KEYS = {"regions", "observations", "time_unit", "seed", "output", "coupling", "params", "tests", "eps",
             "filter", "simulate", "fss"}


@dataclass
class RunConfig:
    params_fixed: dict
    params_unknown: dict
    tests: TestParams
    regions: str | None = None
    observations: str | None = None
    time_unit: str = "day"
    seed: int = 0
    output: str = "out"
    coupling_exponent: float = 2.0
    coupling_cap: float = 0.1
    eps: tuple | None = None
    weighting: str = "equal"
    eps_mode: str = "aggregate"
    horizon: int | None = None
    initial_infectives: dict = field(default_factory=dict)
    fss: dict = field(default_factory=dict)

    @property
    def param_spec(self) -> ParamSpec:
        return ParamSpec(dict(self.params_fixed), dict(self.params_unknown))

    @property
    def fss_config(self) -> FssConfig:
        return FssConfig(**{**self.fss, "seed": self.seed})

    def eps_set(self) -> EpsilonSet | None:
        if self.eps is None:
            return None
        return EpsilonSet.from_tests(self.eps[0], self.eps[1], self.tests)

    def to_dict(self) -> dict:
        params = {k: float(v) for k, v in self.params_fixed.items()}
        params.update({k: {"unknown": True, "lower": float(lo), "upper": float(hi)}
                       for k, (lo, hi) in self.params_unknown.items()})
        out = {
            "regions": self.regions,
            "observations": self.observations,
            "time_unit": self.time_unit,
            "seed": self.seed,
            "output": self.output,
            "coupling": {"exponent": self.coupling_exponent, "cap": self.coupling_cap},
            "params": params,
            "tests": dataclasses.asdict(self.tests),
            "filter": {"weighting": self.weighting, "eps_mode": self.eps_mode},
            "fss": dict(self.fss),
        }
        if self.eps is not None:
            out["eps"] = {"eps1": self.eps[0], "eps3": self.eps[1]}
        if self.horizon is not None:
            out["simulate"] = {"horizon": self.horizon,
                               "initial_infectives": {int(k): int(v) for k, v in self.initial_infectives.items()}}
        return {k: v for k, v in out.items() if v is not None}


def _section(raw, key, allowed):
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"{key}: expected a mapping")
    extra = set(value) - set(allowed)
    if extra:
        raise ConfigError(f"{key}: unknown field(s) {sorted(extra)}")
    return value


def _number(path, value, cast=float):
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {value!r}") from None


def _resolve_path(value, base: Path | None):
    if value is None:
        return None
    p = Path(value).expanduser()
    if not p.is_absolute() and base is not None:
        p = base / p
    return str(p.resolve())


def parse_config(raw: dict, base: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    extra = set(raw) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown top-level field(s) {sorted(extra)}")

    params = raw.get("params")
    if not isinstance(params, dict):
        raise ConfigError("params: expected a mapping of lambda_S, lambda_E, lambda_R, lambda_D")
    fixed, unknown = {}, {}
    for name in PARAM_NAMES:
        if name not in params:
            raise ConfigError(f"params.{name}: missing (give a value or mark it unknown with bounds)")
        spec = params[name]
        if isinstance(spec, dict):
            if not spec.get("unknown"):
                if "value" not in spec:
                    raise ConfigError(f"params.{name}: expected a value or unknown: true")
                fixed[name] = _number(f"params.{name}.value", spec["value"])
                continue
            for b in ("lower", "upper"):
                if b not in spec:
                    raise ConfigError(f"params.{name}.{b}: required for an unknown parameter")
            unknown[name] = (_number(f"params.{name}.lower", spec["lower"]),
                             _number(f"params.{name}.upper", spec["upper"]))
        else:
            fixed[name] = _number(f"params.{name}", spec)
    extra = set(params) - set(PARAM_NAMES)
    if extra:
        raise ConfigError(f"params: unknown field(s) {sorted(extra)}")
    try:
        ParamSpec(dict(fixed), dict(unknown))
    except ValueError as exc:
        raise ConfigError(f"params: {exc}") from None

    t = _section(raw, "tests", ("alpha", "beta", "zeta", "eps4"))
    for k in ("alpha", "beta", "zeta", "eps4"):
        if k not in t:
            raise ConfigError(f"tests.{k}: missing")
    try:
        tests = TestParams(**{k: _number(f"tests.{k}", t[k]) for k in ("alpha", "beta", "zeta", "eps4")})
    except ValueError as exc:
        raise ConfigError(f"tests: {exc}") from None

    eps = None
    if raw.get("eps") is not None:
        e = _section(raw, "eps", ("eps1", "eps3"))
        if "eps1" not in e or "eps3" not in e:
            raise ConfigError("eps: needs eps1 and eps3 (eps2 = zeta * eps1, eps4 from tests)")
        eps = (_number("eps.eps1", e["eps1"]), _number("eps.eps3", e["eps3"]))
        try:
            EpsilonSet.from_tests(eps[0], eps[1], tests)
        except ValueError as exc:
            raise ConfigError(f"eps: {exc}") from None

    time_unit = raw.get("time_unit", "day")
    if time_unit not in TIME_UNITS:
        raise ConfigError(f"time_unit: expected one of {TIME_UNITS}, got {time_unit!r}")

    c = _section(raw, "coupling", ("exponent", "cap"))
    f = _section(raw, "filter", ("weighting", "eps_mode"))
    weighting = f.get("weighting", "equal")
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"filter.weighting: expected one of {WEIGHTINGS}")
    eps_mode = f.get("eps_mode", "aggregate")
    if eps_mode not in EPS_MODES:
        raise ConfigError(f"filter.eps_mode: expected one of {EPS_MODES}")

    s = _section(raw, "simulate", ("horizon", "initial_infectives"))
    horizon = None if "horizon" not in s else _number("simulate.horizon", s["horizon"], int)
    if horizon is not None and horizon < 1:
        raise ConfigError("simulate.horizon: must be >= 1")
    init = s.get("initial_infectives", {})
    if isinstance(init, list):
        init = dict(enumerate(init))
    if not isinstance(init, dict):
        raise ConfigError("simulate.initial_infectives: expected a list or a mapping of region id to count")
    init = {_number("simulate.initial_infectives", k, int): _number(f"simulate.initial_infectives.{k}", v, int)
            for k, v in init.items()}

    fss = _section(raw, "fss", [f.name for f in dataclasses.fields(FssConfig) if f.name != "seed"])
    try:
        FssConfig(**fss)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fss: {exc}") from None

    return RunConfig(
        params_fixed=fixed,
        params_unknown=unknown,
        tests=tests,
        regions=_resolve_path(raw.get("regions"), base),
        observations=_resolve_path(raw.get("observations"), base),
        time_unit=time_unit,
        seed=_number("seed", raw.get("seed", 0), int),
        output=_resolve_path(raw.get("output", "out"), base),
        coupling_exponent=_number("coupling.exponent", c.get("exponent", 2.0)),
        coupling_cap=_number("coupling.cap", c.get("cap", 0.1)),
        eps=eps,
        weighting=weighting,
        eps_mode=eps_mode,
        horizon=horizon,
        initial_infectives=init,
        fss=dict(fss),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path.parent)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
