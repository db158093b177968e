"""Maximum-likelihood parameter estimation with Fish School Search.

Operators, applied once per iteration (maximization):

1. individual movement: each fish tries ``x + U(-1, 1) * step_ind`` and
   keeps it only if fitness strictly improves;
2. feeding: ``W += df / max(df)`` then clip to ``[weight_min, weight_max]``;
   skipped when no fish improved;
3. collective-instinctive movement: every fish moves by
   ``sum(dx * df) / sum(df)``;
4. collective-volitive movement: with barycenter ``B = sum(W x) / sum(W)``,
   each fish moves ``step_vol * U(0, 1) * (x - B) / |x - B|`` towards ``B``
   if the school's total weight grew since the last iteration, away
   otherwise.

Step sizes are fractions of the box width and decay linearly from their
initial to final values over the iterations. Positions are clipped to the
box after every move. The school is evaluated after the individual move and
again after the collective moves, so a run costs
``school_size * (1 + 2 * iterations)`` objective calls.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import EpiParams, EpsilonSet, ObservationRecord, TestParams
from .errors import AllInfeasibleError, ModelError
from .ukf import filter_series

log = logging.getLogger(__name__)

PARAM_NAMES = ("lambda_S", "lambda_E", "lambda_R", "lambda_D")


@dataclass(frozen=True)
class ParamSpec:
    """Which epidemic rates are searched and which are held fixed.

    ``unknowns`` maps a rate name to its ``(lower, upper)`` bounds.
    """

    fixed: dict
    unknowns: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in set(self.fixed) | set(self.unknowns):
            if name not in PARAM_NAMES:
                raise ValueError(f"unknown parameter name {name!r}")
        overlap = set(self.fixed) & set(self.unknowns)
        if overlap:
            raise ValueError(f"parameters both fixed and unknown: {sorted(overlap)}")
        missing = set(PARAM_NAMES) - set(self.fixed) - set(self.unknowns)
        if missing:
            raise ValueError(f"parameters neither fixed nor unknown: {sorted(missing)}")
        for name, (lo, hi) in self.unknowns.items():
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"{name}: bounds must be finite with lower < upper, got ({lo}, {hi})")
        if self._upper("lambda_R") + self._upper("lambda_D") > 1:
            raise ValueError("upper(lambda_R) + upper(lambda_D) must be <= 1")
        lo_s = self.unknowns["lambda_S"][0] if "lambda_S" in self.unknowns else self.fixed["lambda_S"]
        if lo_s <= 0:
            raise ValueError("lambda_S must be > 0")
        if "lambda_E" in self.unknowns:
            lo, hi = self.unknowns["lambda_E"]
            if lo <= 0 or hi > 1:
                raise ValueError("lambda_E bounds must lie in (0, 1]")

    def _upper(self, name):
        return self.unknowns[name][1] if name in self.unknowns else self.fixed[name]

    @property
    def names(self) -> tuple:
        return tuple(n for n in PARAM_NAMES if n in self.unknowns)

    @property
    def bounds(self):
        lower = np.array([self.unknowns[n][0] for n in self.names], dtype=float)
        upper = np.array([self.unknowns[n][1] for n in self.names], dtype=float)
        return lower, upper

    def assemble(self, theta: Sequence[float]) -> EpiParams:
        values = dict(self.fixed)
        values.update(zip(self.names, map(float, theta)))
        return EpiParams(**values)


@dataclass(frozen=True)
class FssConfig:
    school_size: int = 30
    iterations: int = 200
    step_ind_init: float = 0.1
    step_ind_final: float = 0.001
    step_vol_init: float = 0.2
    step_vol_final: float = 0.002
    weight_min: float = 1.0
    weight_max: float = 500.0
    seed: int = 0

    def __post_init__(self):
        if self.school_size < 2:
            raise ValueError("school_size must be >= 2")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for kind in ("ind", "vol"):
            init = getattr(self, f"step_{kind}_init")
            final = getattr(self, f"step_{kind}_final")
            # zero steps are allowed: they freeze the school
            if not 0 <= final <= init < 1:
                raise ValueError(f"need 0 <= step_{kind}_final <= step_{kind}_init < 1")
        if not 0 < self.weight_min < self.weight_max:
            raise ValueError("need 0 < weight_min < weight_max")

    @property
    def evaluations(self) -> int:
        return self.school_size * (1 + 2 * self.iterations)


@dataclass
class FitResult:
    theta_hat: np.ndarray
    loglik: float
    trace: list
    evaluations: int
    names: tuple = ()
    params: EpiParams | None = None

    def as_dict(self) -> dict:
        return dict(zip(self.names, map(float, self.theta_hat)))


def _linear(init, final, it, iterations):
    if iterations <= 1:
        return init
    return init + (final - init) * it / (iterations - 1)


def fss_optimize(objective: Callable[[np.ndarray], float], lower, upper, config: FssConfig,
                 rng: np.random.Generator | None = None) -> FitResult:
    """Maximize ``objective`` over the box ``[lower, upper]``.

    ``-inf`` marks infeasible points. A fish leaving an infeasible point is
    moved but contributes no fitness gain to feeding or instinct.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or lower.ndim != 1 or np.any(~(lower < upper)):
        raise ValueError("bounds must be 1-D with lower < upper")
    width = upper - lower
    n, dim = config.school_size, lower.size

    if rng is None:
        seq = np.random.SeedSequence(config.seed)
    else:
        seq = np.random.SeedSequence(rng.integers(0, 2**63 - 1))
    children = seq.spawn(n + 1)
    school_rng = np.random.default_rng(children[0])
    fish_rng = [np.random.default_rng(s) for s in children[1:]]

    def evaluate(points):
        return np.array([float(objective(p)) for p in points])

    x = np.array([lower + r.random(dim) * width for r in fish_rng])
    fit = evaluate(x)
    evals = n
    if not np.any(np.isfinite(fit)):
        raise AllInfeasibleError("objective is -inf at every initial fish position")
    weights = np.full(n, config.weight_max / 2.0)
    prev_total = weights.sum()
    best = int(np.argmax(fit))
    best_x, best_f = x[best].copy(), fit[best]
    trace = []

    for it in range(config.iterations):
        step_ind = _linear(config.step_ind_init, config.step_ind_final, it, config.iterations) * width
        step_vol = _linear(config.step_vol_init, config.step_vol_final, it, config.iterations) * width

        cand = np.array([x[k] + r.uniform(-1.0, 1.0, dim) * step_ind for k, r in enumerate(fish_rng)])
        np.clip(cand, lower, upper, out=cand)
        cand_fit = evaluate(cand)
        evals += n
        improved = cand_fit > fit
        rescued = improved & ~np.isfinite(fit)
        gain = np.where(improved & ~rescued, cand_fit - np.where(np.isfinite(fit), fit, 0.0), 0.0)
        dx = np.where(improved[:, None], cand - x, 0.0)
        x = np.where(improved[:, None], cand, x)
        fit = np.where(improved, cand_fit, fit)

        top = gain.max()
        if top > 0:
            weights = np.clip(weights + gain / top, config.weight_min, config.weight_max)
        total_gain = gain.sum()
        if total_gain > 0:
            x = np.clip(x + (dx * gain[:, None]).sum(axis=0) / total_gain, lower, upper)

        total = weights.sum()
        bary = (weights[:, None] * x).sum(axis=0) / total
        diff = x - bary
        dist = np.linalg.norm(diff, axis=1)
        unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
        sign = -1.0 if total > prev_total else 1.0
        x = np.clip(x + sign * step_vol * school_rng.random(n)[:, None] * unit, lower, upper)
        prev_total = total

        fit = evaluate(x)
        evals += n
        for cand_x, cand_f in ((cand, cand_fit), (x, fit)):
            k = int(np.argmax(cand_f))
            if cand_f[k] > best_f:
                best_x, best_f = cand_x[k].copy(), cand_f[k]
        trace.append(float(best_f))
        if it % 20 == 0:
            log.debug("fss iteration %d best %.6g at %s", it, best_f, best_x)

    return FitResult(best_x, float(best_f), trace, evals)


def loglik_objective(theta, spec: ParamSpec, series: ObservationRecord, tests: TestParams, coupling, regions,
                     prior_eps: EpsilonSet | None = None, **filter_kw) -> float:
    """Total innovation log-likelihood at ``theta``; ``-inf`` where the filter fails."""
    try:
        params = spec.assemble(theta)
        return filter_series(series, params, tests, coupling, regions, prior_eps=prior_eps, **filter_kw).loglik
    except (ModelError, ValueError) as exc:
        log.debug("objective infeasible at %s: %s", theta, exc)
        return -math.inf


def fit(series: ObservationRecord, spec: ParamSpec, tests: TestParams, coupling, regions, config: FssConfig,
        prior_eps: EpsilonSet | None = None, **filter_kw) -> FitResult:
    """Maximum-likelihood estimate of the unknown rates in ``spec``."""
    if not spec.names:
        params = spec.assemble(())
        ll = filter_series(series, params, tests, coupling, regions, prior_eps=prior_eps, **filter_kw).loglik
        return FitResult(np.zeros(0), ll, [ll], 1, (), params)

    def objective(theta):
        return loglik_objective(theta, spec, series, tests, coupling, regions, prior_eps, **filter_kw)

    lower, upper = spec.bounds
    result = fss_optimize(objective, lower, upper, config)
    result.names = spec.names
    result.params = spec.assemble(result.theta_hat)
    return result
