"""Unscented Kalman filter over the per-region 5-compartment state.

Sigma points are ``m +/- columns of chol(n P)``. Two weightings are
available:

``"standard"``
    central point weight 0, the others ``1/(2n)`` (the unscented transform
    with kappa = 0; exact for linear maps).
``"equal"``
    every one of the ``2n+1`` points, the central one included, weighted
    ``1/(2n)``. The weights then sum to ``(2n+1)/(2n)``, so means are
    inflated by 10% per step for n = 5.
    This is the default; pass ``weighting="standard"`` for the textbook
    transform, which tracks and recovers parameters markedly better.

The per-series recursion has a fused numba kernel (see ``_kernels``) and
the pure-numpy composition of the functions below; ``filter_series``
picks one according to :mod:`metaseird._jit`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _jit
from .core import (
    I,
    EpiParams,
    EpsilonSet,
    ObservationRecord,
    TestParams,
    compute_epsilons,
    observe_mean,
    seird_map,
)
from .errors import (
    CovarianceError,
    FilterError,
    InfectionPressureError,
    InitializationError,
    ModelError,
    SingularInnovationError,
)
from .noise import observation_covariance, process_covariance, repair_psd

log = logging.getLogger(__name__)

N_STATE = 5
WEIGHTINGS = ("standard", "equal")
EPS_MODES = ("aggregate", "region")
JITTER_ESCALATIONS = 3
# Reports are whole numbers: the variance of rounding to an integer is added
# to both observation channels so a channel that is exactly zero (no deaths
# yet) cannot produce a degenerate innovation covariance.
REPORT_ROUNDING_VAR = 1.0 / 12.0


@dataclass
class FilterEstimate:
    mean: np.ndarray
    cov: np.ndarray
    predicted_obs: np.ndarray
    innovation_cov: np.ndarray
    loglik_increment: float
    clamped: bool = False


def init_from_observation(p0: float, q0: float, population: float, beta: float):
    """Initial mean ``(N - 2P - Q/beta, P, P, 0, Q/beta)`` and identity covariance."""
    if population <= 0:
        raise InitializationError(f"population must be > 0, got {population}")
    if not 0 < beta <= 1:
        raise InitializationError(f"beta must be in (0, 1], got {beta}")
    deaths = q0 / beta
    mean = np.array([population - 2.0 * p0 - deaths, p0, p0, 0.0, deaths], dtype=float)
    if mean[0] < 0:
        raise InitializationError(
            f"initial susceptible estimate is negative ({mean[0]:.6g}); P0={p0}, Q0={q0}, N={population}"
        )
    return mean, np.eye(N_STATE)


def sigma_weights(n: int, weighting: str = "equal") -> np.ndarray:
    if weighting == "standard":
        w = np.full(2 * n + 1, 1.0 / (2 * n))
        w[0] = 0.0
        return w
    if weighting == "equal":
        return np.full(2 * n + 1, 1.0 / (2 * n))
    raise ValueError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")


def cholesky_jitter(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter ``1e-9 * tr/n * 10**k`` on failure."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    n = a.shape[0]
    jitter = 1e-9 * abs(np.trace(a)) / n
    for _ in range(JITTER_ESCALATIONS + 1):
        try:
            return np.linalg.cholesky(a + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise CovarianceError("covariance could not be factorized after maximum jitter")


def sigma_points(mean, cov) -> np.ndarray:
    """``(2n+1, n)`` array: the mean, then ``m + L_i`` and ``m - L_i``."""
    mean = np.asarray(mean, dtype=float)
    n = mean.size
    root = cholesky_jitter(n * np.asarray(cov, dtype=float))
    return np.vstack([mean, mean + root.T, mean - root.T])


def unscented_moments(points, transformed, weights, center):
    """Weighted mean/covariance of ``transformed`` and cross-covariance with ``points - center``."""
    mu = weights @ transformed
    dy = transformed - mu
    dx = points - center
    cov = (weights[:, None] * dy).T @ dy
    cross = (weights[:, None] * dx).T @ dy
    return mu, cov, cross


def predict(mean, cov, transition: Callable, q_cov, weighting: str = "equal"):
    """Propagate ``(mean, cov)`` through ``transition`` and add ``q_cov``."""
    z = sigma_points(mean, cov)
    x = transition(z)
    w = sigma_weights(z.shape[1], weighting)
    m_pred, p_pred, _ = unscented_moments(z, x, w, mean)
    p_pred = p_pred + q_cov
    return m_pred, 0.5 * (p_pred + p_pred.T)


def update(mean_pred, cov_pred, measurement: Callable, r_cov, y, weighting: str = "equal",
           clamp_mean: bool = True) -> FilterEstimate:
    """Assimilate observation ``y`` and score its innovation."""
    mean_pred = np.asarray(mean_pred, dtype=float)
    z = sigma_points(mean_pred, cov_pred)
    yhat = measurement(z)
    w = sigma_weights(z.shape[1], weighting)
    mu, s_cov, cross = unscented_moments(z, yhat, w, mean_pred)
    s_cov = 0.5 * (s_cov + s_cov.T) + r_cov
    try:
        s_chol = np.linalg.cholesky(s_cov)
    except np.linalg.LinAlgError:
        raise SingularInnovationError(f"innovation covariance is not positive definite: {s_cov.tolist()}") from None
    innov = np.asarray(y, dtype=float) - mu
    gain = np.linalg.solve(s_cov, cross.T).T
    mean = mean_pred + gain @ innov
    cov = repair_psd(cov_pred - gain @ s_cov @ gain.T)
    white = np.linalg.solve(s_chol, innov)
    logdet = 2.0 * np.sum(np.log(np.diag(s_chol)))
    loglik = -0.5 * (innov.size * np.log(2 * np.pi) + logdet) - 0.5 * white @ white
    clamped = False
    if clamp_mean and np.any(mean < 0):
        log.debug("clamping negative posterior mean components %s", mean)
        mean = np.maximum(mean, 0.0)
        clamped = True
    return FilterEstimate(mean, cov, mu, s_cov, float(loglik), clamped)


def seird_transition(params: EpiParams, population: float, external_pressure: float):
    def f(z):
        return seird_map(z, external_pressure, params, population)

    return f


def seird_measurement(eps: EpsilonSet, tests: TestParams):
    def h(z):
        p, q = observe_mean(z, eps, tests)
        return np.stack([p, q], axis=-1)

    return h


# ---------------------------------------------------------------- series


@dataclass
class FilterResult:
    """Output of :func:`filter_series`; time on axis 0, region on axis 1.

    Row ``t = 0`` holds the initialization (no prediction, zero likelihood).
    """

    means: np.ndarray
    covs: np.ndarray
    predicted_obs: np.ndarray
    innovation_covs: np.ndarray
    loglik_increments: np.ndarray
    eps: np.ndarray
    eps_flags: np.ndarray
    clamp_count: int

    @property
    def loglik(self) -> float:
        return float(self.loglik_increments.sum())

    def estimate(self, t: int, region: int) -> FilterEstimate:
        return FilterEstimate(
            self.means[t, region],
            self.covs[t, region],
            self.predicted_obs[t, region],
            self.innovation_covs[t, region],
            float(self.loglik_increments[t, region]),
        )


def aggregate_rates(rt, rp, populations):
    """Combine regional testing/positivity rates into overall rates."""
    tests = np.asarray(rt, dtype=float) * populations
    total = tests.sum()
    return total / np.sum(populations), float(np.dot(rp, tests) / total) if total > 0 else float(np.mean(rp))


def _as_populations(regions) -> np.ndarray:
    if len(regions) and hasattr(regions[0], "population"):
        return np.array([r.population for r in regions], dtype=float)
    return np.asarray(regions, dtype=float)


def _validate_series(series: ObservationRecord, g: int):
    if series.p.ndim != 2 or series.p.shape[0] == 0:
        raise FilterError("observation series must be a non-empty (T, G) array")
    if series.p.shape[1] != g:
        raise FilterError(f"series has {series.p.shape[1]} regions but {g} populations were given")


def filter_series(series: ObservationRecord, params: EpiParams, tests: TestParams, coupling, regions,
                  prior_eps: EpsilonSet | None = None, weighting: str = "equal", eps_mode: str = "aggregate",
                  backend: str | None = None) -> FilterResult:
    """Run the filter over every region of ``series``.

    At each step the testing fractions are re-derived from the predicted
    state and the reported rates (over all regions with ``eps_mode
    ="aggregate"``, per region with ``"region"``). Steps where that
    inversion fails reuse the last successful set (``prior_eps`` before the
    first one) and are flagged. Cross-region exposure is frozen at the
    previous posterior means.
    """
    pops = _as_populations(regions)
    coupling = np.asarray(coupling, dtype=float)
    _validate_series(series, pops.size)
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    if eps_mode not in EPS_MODES:
        raise ValueError(f"unknown eps_mode {eps_mode!r}")
    if backend is None:
        backend = "numba" if _jit.USE_NUMBA else "numpy"
    if backend == "numba":
        from ._kernels import run_filter_kernel

        return run_filter_kernel(series, params, tests, coupling, pops, prior_eps, weighting, eps_mode)
    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")
    return _filter_series_numpy(series, params, tests, coupling, pops, prior_eps, weighting, eps_mode)


def _filter_series_numpy(series, params, tests, coupling, pops, prior_eps, weighting, eps_mode) -> FilterResult:
    t_len, g = series.p.shape
    means = np.zeros((t_len, g, N_STATE))
    covs = np.zeros((t_len, g, N_STATE, N_STATE))
    pred_obs = np.full((t_len, g, 2), np.nan)
    innov = np.full((t_len, g, 2, 2), np.nan)
    ll = np.zeros((t_len, g))
    eps_out = np.full((t_len, g, 4), np.nan)
    flags = np.zeros((t_len, g), dtype=bool)
    clamps = 0

    for i in range(g):
        try:
            means[0, i], covs[0, i] = init_from_observation(series.p[0, i], series.q[0, i], pops[i], tests.beta)
        except ModelError as exc:
            raise FilterError(str(exc), t=0, region=i) from exc

    last = [prior_eps] * g
    diag = np.diag(coupling)
    for t in range(1, t_len):
        prev = means[t - 1]
        frac = prev[:, I] / pops
        total = coupling @ frac
        pressure = params.lambda_S * total
        if np.any(pressure > 1 + 1e-12):
            i = int(np.argmax(pressure))
            exc = InfectionPressureError(i, float(pressure[i]))
            raise FilterError(str(exc), t=t, region=i) from exc
        external = total - diag * frac

        m_pred = np.zeros((g, N_STATE))
        p_pred = np.zeros((g, N_STATE, N_STATE))
        for i in range(g):
            try:
                q_cov = process_covariance(prev, params, coupling, i, pops)
                m_pred[i], p_pred[i] = predict(
                    prev[i], covs[t - 1, i], seird_transition(params, pops[i], external[i]), q_cov, weighting
                )
            except ModelError as exc:
                raise FilterError(str(exc), t=t, region=i) from exc

        nonneg = np.maximum(m_pred, 0.0)
        if eps_mode == "aggregate":
            rt, rp = aggregate_rates(series.rt[t], series.rp[t], pops)
            eps_t, ok = _epsilons_or_carry(nonneg.sum(axis=0), rt, rp, tests, last[0])
            if eps_t is None:
                raise FilterError("testing fractions infeasible and no earlier set to carry forward", t=t)
            last = [eps_t] * g
            flags[t, :] = not ok
        else:
            for i in range(g):
                eps_i, ok = _epsilons_or_carry(nonneg[i], series.rt[t, i], series.rp[t, i], tests, last[i])
                if eps_i is None:
                    raise FilterError("testing fractions infeasible and no earlier set to carry forward",
                                      t=t, region=i)
                last[i] = eps_i
                flags[t, i] = not ok

        for i in range(g):
            eps_i = last[i]
            eps_out[t, i] = eps_i.as_array()
            try:
                r_cov = observation_covariance(nonneg[i], eps_i, tests) + REPORT_ROUNDING_VAR * np.eye(2)
                est = update(m_pred[i], p_pred[i], seird_measurement(eps_i, tests), r_cov,
                             (series.p[t, i], series.q[t, i]), weighting)
            except ModelError as exc:
                raise FilterError(str(exc), t=t, region=i) from exc
            means[t, i] = est.mean
            covs[t, i] = est.cov
            pred_obs[t, i] = est.predicted_obs
            innov[t, i] = est.innovation_cov
            ll[t, i] = est.loglik_increment
            clamps += est.clamped
    return FilterResult(means, covs, pred_obs, innov, ll, eps_out, flags, clamps)


@dataclass
class Forecast:
    """Open-loop propagation from a posterior; step 0 is the posterior itself."""

    means: np.ndarray
    covs: np.ndarray
    predicted_obs: np.ndarray
    obs_covs: np.ndarray


def forecast(means, covs, steps: int, params: EpiParams, tests: TestParams, coupling, regions, eps) -> Forecast:
    """Run the prediction step ``steps`` times without assimilating data.

    ``eps`` holds one testing-fraction set per region, held constant. The
    observation covariance at each step includes both state uncertainty and
    reporting noise, so ``sqrt(obs_covs[k, i, 0, 0])`` is the spread to
    expect around the forecast of new cases.

    Propagation always uses the standard weights. The equal weights sum
    to more than one and would inflate the mean at every open-loop step.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    weighting = "standard"
    pops = _as_populations(regions)
    coupling = np.asarray(coupling, dtype=float)
    g = pops.size
    m = np.zeros((steps + 1, g, N_STATE))
    p = np.zeros((steps + 1, g, N_STATE, N_STATE))
    obs = np.zeros((steps + 1, g, 2))
    obs_cov = np.zeros((steps + 1, g, 2, 2))
    m[0] = np.asarray(means, dtype=float)
    p[0] = np.asarray(covs, dtype=float)
    diag = np.diag(coupling)
    for k in range(steps + 1):
        if k:
            frac = m[k - 1, :, I] / pops
            total = coupling @ frac
            pressure = params.lambda_S * total
            if np.any(pressure > 1 + 1e-12):
                i = int(np.argmax(pressure))
                exc = InfectionPressureError(i, float(pressure[i]))
                raise FilterError(str(exc), t=k, region=i) from exc
            external = total - diag * frac
            for i in range(g):
                q_cov = process_covariance(m[k - 1], params, coupling, i, pops)
                mk, pk = predict(m[k - 1, i], p[k - 1, i], seird_transition(params, pops[i], external[i]), q_cov,
                                 weighting)
                m[k, i], p[k, i] = np.maximum(mk, 0.0), repair_psd(pk)
        for i in range(g):
            z = sigma_points(m[k, i], p[k, i])
            w = sigma_weights(N_STATE, weighting)
            mu, s_cov, _ = unscented_moments(z, seird_measurement(eps[i], tests)(z), w, m[k, i])
            r_cov = observation_covariance(m[k, i], eps[i], tests) + REPORT_ROUNDING_VAR * np.eye(2)
            obs[k, i] = mu
            obs_cov[k, i] = 0.5 * (s_cov + s_cov.T) + r_cov
    return Forecast(m, p, obs, obs_cov)


def _epsilons_or_carry(state, rt, rp, tests, last):
    try:
        return compute_epsilons(state, rt, rp, tests), True
    except ModelError:
        return last, False
