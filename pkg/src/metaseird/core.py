"""Metapopulation SEIRD state and observation models.

States are numpy arrays with the compartments on the last axis, ordered
``(S, E, I, R, D)``; an all-region state has shape ``(G, 5)``. Leading batch
axes are allowed by the stochastic samplers so Monte-Carlo replicates can be
drawn in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateDistanceError,
    DegenerateStateError,
    InconsistentInputsError,
    InfectionPressureError,
    InversionInfeasibleError,
)

S, E, I, R, D = range(5)
COMPARTMENTS = ("S", "E", "I", "R", "D")

EARTH_RADIUS_KM = 6371.0088
_EPS_RANGE_TOL = 1e-12


@dataclass(frozen=True)
class RegionMeta:
    id: int
    name: str
    population: int
    lat: float
    lon: float

    def __post_init__(self):
        if self.population < 1:
            raise ValueError(f"region {self.id}: population must be >= 1, got {self.population}")


def validate_regions(regions: Sequence[RegionMeta]) -> None:
    ids = [r.id for r in regions]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate region ids in {ids}")
    if sorted(ids) != list(range(len(ids))):
        raise ValueError(f"region ids must be contiguous from 0, got {sorted(ids)}")


@dataclass(frozen=True)
class EpiParams:
    lambda_S: float
    lambda_E: float
    lambda_R: float
    lambda_D: float

    def __post_init__(self):
        if not self.lambda_S > 0:
            raise ValueError(f"lambda_S must be > 0, got {self.lambda_S}")
        if not 0 < self.lambda_E <= 1:
            raise ValueError(f"lambda_E must be in (0, 1], got {self.lambda_E}")
        if self.lambda_R < 0 or self.lambda_D < 0:
            raise ValueError("lambda_R and lambda_D must be >= 0")
        if self.lambda_R + self.lambda_D > 1:
            raise ValueError("lambda_R + lambda_D must be <= 1")

    def replace(self, **changes) -> "EpiParams":
        return EpiParams(**{**self.__dict__, **changes})


@dataclass(frozen=True)
class TestParams:
    """Test accuracy and testing-behaviour constants.

    ``zeta`` is the symptomatic/asymptomatic testing-rate ratio. The value 1
    is accepted here (no differential testing) but makes the epsilon
    inversion degenerate.
    """

    __test__ = False  # keep pytest from collecting this class

    alpha: float
    beta: float
    zeta: float
    eps4: float

    def __post_init__(self):
        if not 0 <= self.alpha < self.beta <= 1:
            raise ValueError(f"need 0 <= alpha < beta <= 1, got alpha={self.alpha}, beta={self.beta}")
        if self.zeta < 1:
            raise ValueError(f"zeta must be >= 1, got {self.zeta}")
        if not 0 <= self.eps4 <= 1:
            raise ValueError(f"eps4 must be in [0, 1], got {self.eps4}")


@dataclass(frozen=True)
class EpsilonSet:
    eps1: float
    eps2: float
    eps3: float
    eps4: float

    def __post_init__(self):
        for name in ("eps1", "eps2", "eps3", "eps4"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise InconsistentInputsError(name, value)

    @classmethod
    def from_tests(cls, eps1: float, eps3: float, tests: TestParams) -> "EpsilonSet":
        return cls(eps1, tests.zeta * eps1, eps3, tests.eps4)

    def as_array(self) -> np.ndarray:
        return np.array([self.eps1, self.eps2, self.eps3, self.eps4])


@dataclass(frozen=True)
class FluxRecord:
    """Transition counts of one stochastic step.

    ``n_s[..., i, j]`` counts susceptibles of region ``i`` exposed through
    contact with infectives of region ``j``.
    """

    n_s: np.ndarray
    n_e: np.ndarray
    n_r: np.ndarray
    n_d: np.ndarray


@dataclass(frozen=True)
class ObservationRecord:
    """Reported data. Fields share one shape, typically ``(T, G)``."""

    p: np.ndarray
    q: np.ndarray
    rt: np.ndarray
    rp: np.ndarray

    def __getitem__(self, index) -> "ObservationRecord":
        return ObservationRecord(self.p[index], self.q[index], self.rt[index], self.rp[index])

    @property
    def shape(self):
        return np.shape(self.p)


# ---------------------------------------------------------------- coupling


def haversine_km(lat1, lon1, lat2, lon2):
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def gravity_weights(populations, distances, exponent: float = 2.0, cap: float = 0.1) -> np.ndarray:
    """Gravity coupling from an explicit distance matrix.

    Off-diagonal weights are ``N_i N_j / d_ij**exponent`` rescaled so the
    largest equals ``cap``; the diagonal is 1.
    """
    if not exponent > 0:
        raise ValueError(f"exponent must be > 0, got {exponent}")
    if not 0 < cap <= 1:
        raise ValueError(f"cap must be in (0, 1], got {cap}")
    pops = np.asarray(populations, dtype=float)
    dist = np.asarray(distances, dtype=float)
    g = pops.size
    if g == 0:
        raise ValueError("at least one region is required")
    if g == 1:
        return np.eye(1)
    off = ~np.eye(g, dtype=bool)
    if np.any(dist[off] <= 0):
        i, j = np.argwhere((dist <= 0) & off)[0]
        raise DegenerateDistanceError(f"regions {i} and {j} are at zero distance")
    raw = np.zeros((g, g))
    raw[off] = (np.outer(pops, pops)[off]) / dist[off] ** exponent
    raw = 0.5 * (raw + raw.T)
    c = raw * (cap / raw[off].max())
    np.fill_diagonal(c, 1.0)
    return c


def gravity_coupling(regions: Sequence[RegionMeta], exponent: float = 2.0, cap: float = 0.1) -> np.ndarray:
    if len(regions) == 0:
        raise ValueError("at least one region is required")
    lat = np.array([r.lat for r in regions], dtype=float)
    lon = np.array([r.lon for r in regions], dtype=float)
    dist = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    pops = [r.population for r in regions]
    return gravity_weights(pops, dist, exponent, cap)


def check_coupling(c: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"coupling must be square, got shape {c.shape}")
    if not np.allclose(np.diag(c), 1.0, atol=atol):
        raise ValueError("coupling diagonal must be 1")
    if np.any(c < -atol) or np.any(c > 1 + atol):
        raise ValueError("coupling entries must lie in [0, 1]")
    if not np.allclose(c, c.T, atol=atol):
        raise ValueError("coupling must be symmetric")
    return c


# ---------------------------------------------------------------- dynamics


def exposure_probabilities(states: np.ndarray, params: EpiParams, coupling: np.ndarray, populations=None):
    """Per-source exposure probabilities ``lambda_S c_ij I_j / N_j``, shape ``(..., G, G)``."""
    states = np.asarray(states)
    if populations is None:
        populations = states.sum(axis=-1)
    frac = states[..., I] / np.asarray(populations, dtype=float)
    return params.lambda_S * coupling * frac[..., None, :]


def _check_pressure(pressure: np.ndarray, tol: float = 1e-12) -> None:
    bad = pressure > 1 + tol
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise InfectionPressureError(int(idx[-1]), float(pressure[tuple(idx)]))


def sample_multinomial(n, probs, rng: np.random.Generator) -> np.ndarray:
    """Multinomial draws by sequential conditional binomials.

    ``probs`` has categories on the last axis and may sum to less than one;
    the remainder is the implicit "no event" category.
    """
    n = np.asarray(n, dtype=np.int64)
    probs = np.asarray(probs, dtype=float)
    k = probs.shape[-1]
    out = np.zeros(np.broadcast_shapes(n.shape + (k,), probs.shape), dtype=np.int64)
    remaining = np.broadcast_to(n, out.shape[:-1]).copy()
    mass_left = np.ones(out.shape[:-1])
    for j in range(k):
        pj = np.broadcast_to(probs[..., j], out.shape[:-1])
        cond = np.divide(pj, mass_left, out=np.where(pj > 0, 1.0, 0.0), where=mass_left > 0)
        draw = rng.binomial(remaining, np.clip(cond, 0.0, 1.0))
        out[..., j] = draw
        remaining -= draw
        mass_left = mass_left - pj
    return out


def apply_fluxes(states: np.ndarray, flux: FluxRecord) -> np.ndarray:
    new_exposed = flux.n_s.sum(axis=-1)
    out = np.array(states, copy=True)
    out[..., S] -= new_exposed
    out[..., E] += new_exposed - flux.n_e
    out[..., I] += flux.n_e - flux.n_r - flux.n_d
    out[..., R] += flux.n_r
    out[..., D] += flux.n_d
    return out


def step_stochastic(states, params: EpiParams, coupling, rng: np.random.Generator):
    """One multinomial/binomial transition of all regions.

    Returns ``(next_states, FluxRecord)``. ``states`` is an integer array of
    shape ``(..., G, 5)``; batch axes are sampled independently.
    """
    states = np.asarray(states)
    if not np.issubdtype(states.dtype, np.integer):
        if not np.all(states == np.round(states)):
            raise ValueError("stochastic step needs integer-valued states")
        states = states.astype(np.int64)
    probs = exposure_probabilities(states, params, coupling)
    _check_pressure(probs.sum(axis=-1))
    n_s = sample_multinomial(states[..., S], probs, rng)
    n_e = rng.binomial(states[..., E], params.lambda_E)
    rd = sample_multinomial(states[..., I], np.array([params.lambda_R, params.lambda_D]), rng)
    flux = FluxRecord(n_s=n_s, n_e=n_e, n_r=rd[..., 0], n_d=rd[..., 1])
    return apply_fluxes(states, flux), flux


def seird_map(x, external_pressure, params: EpiParams, population):
    """Noise-free single-region transition.

    ``external_pressure`` is ``sum_{j != i} c_ij I_j / N_j`` (without
    ``lambda_S``), held fixed; the region's own infectives enter through
    ``x``. Works on any array with compartments on the last axis and does
    not clamp, so it stays a polynomial map for sigma-point propagation.
    """
    x = np.asarray(x, dtype=float)
    pressure = params.lambda_S * (x[..., I] / population + external_pressure)
    out = np.empty_like(x)
    out[..., S] = x[..., S] * (1.0 - pressure)
    out[..., E] = (1.0 - params.lambda_E) * x[..., E] + pressure * x[..., S]
    out[..., I] = (1.0 - params.lambda_R - params.lambda_D) * x[..., I] + params.lambda_E * x[..., E]
    out[..., R] = x[..., R] + params.lambda_R * x[..., I]
    out[..., D] = x[..., D] + params.lambda_D * x[..., I]
    return out


def clamp_conserving(x: np.ndarray) -> np.ndarray:
    """Zero out negative components and charge the deficit to the largest one."""
    x = np.array(x, dtype=float, copy=True)
    neg = x < 0
    if not neg.any():
        return x
    flat = x.reshape(-1, x.shape[-1])
    for row in flat:
        mask = row < 0
        if mask.any():
            deficit = row[mask].sum()
            row[mask] = 0.0
            row[np.argmax(row)] += deficit
    return flat.reshape(x.shape)


def step_mean(states, params: EpiParams, coupling, populations=None) -> np.ndarray:
    """Expected next state of all regions, shape ``(G, 5)``."""
    states = np.asarray(states, dtype=float)
    if np.any(states < 0):
        raise ValueError("mean propagation needs nonnegative states")
    if populations is None:
        populations = states.sum(axis=-1)
    populations = np.asarray(populations, dtype=float)
    pressure = exposure_probabilities(states, params, coupling, populations).sum(axis=-1)
    _check_pressure(pressure)
    frac = states[..., I] / populations
    own = params.lambda_S * frac
    external = (pressure - own) / params.lambda_S
    out = seird_map(states, external, params, populations)
    return clamp_conserving(out)


# ---------------------------------------------------------------- observation


def _test_groups(state, eps: EpsilonSet):
    state = np.asarray(state, dtype=float)
    w = state[..., S] + state[..., R]
    a = (1.0 - eps.eps3) * w
    b = eps.eps3 * w
    c = (1.0 - eps.eps4) * state[..., I]
    d = eps.eps4 * state[..., I] + state[..., E]
    return a, b, c, d


def testing_rates(state, eps: EpsilonSet, tests: TestParams):
    """Forward testing rate and positivity rate ``(rt, rp)`` implied by a state."""
    a, b, c, d = _test_groups(state, eps)
    tested = eps.eps1 * a + eps.eps2 * b + eps.eps2 * c + eps.eps1 * d
    positive = tests.alpha * (eps.eps1 * a + eps.eps2 * b) + tests.beta * (eps.eps2 * c + eps.eps1 * d)
    with np.errstate(invalid="ignore", divide="ignore"):  # empty population -> nan
        return tested / (a + b + c + d), positive / tested


def _in_unit(name: str, value: float) -> float:
    if -_EPS_RANGE_TOL <= value <= 1 + _EPS_RANGE_TOL:
        return min(max(value, 0.0), 1.0)
    raise InconsistentInputsError(name, value)


def compute_epsilons(aggregate_state, rt: float, rp: float, tests: TestParams) -> EpsilonSet:
    """Recover the testing fractions from reported testing and positivity rates."""
    s, e, i, r = (float(v) for v in np.asarray(aggregate_state, dtype=float)[:4])
    alpha, beta, zeta, eps4 = tests.alpha, tests.beta, tests.zeta, tests.eps4
    if not alpha < rp < beta:
        raise InversionInfeasibleError(f"positivity {rp!r} must lie strictly between alpha={alpha} and beta={beta}")
    w = s + r
    sym_inf = (1.0 - eps4) * i
    asym = eps4 * i + e
    den3 = (zeta - 1.0) * w * (rp - alpha)
    if den3 == 0:
        raise DegenerateStateError("zero denominator in the non-specific-symptom fraction (zeta == 1 or S + R == 0)")
    eps3 = ((beta - rp) * (asym + zeta * sym_inf) - w * (rp - alpha)) / den3
    eps3 = _in_unit("eps3", eps3)
    a = (1.0 - eps3) * w
    b = eps3 * w
    den1 = (beta - alpha) * (b * asym - a * sym_inf)
    if den1 == 0:
        raise DegenerateStateError("zero denominator in the asymptomatic testing rate")
    tested = (s + e + i + r) * rt
    eps1 = _in_unit("eps1", tested * (rp * (b + sym_inf) - alpha * b - beta * sym_inf) / den1)
    eps2 = _in_unit("eps2", zeta * eps1)
    return EpsilonSet(eps1, eps2, eps3, eps4)


def observe_mean(state, eps: EpsilonSet, tests: TestParams):
    """Expected reported new cases and cumulative deaths."""
    state = np.asarray(state, dtype=float)
    a, b, c, d = _test_groups(state, eps)
    p = tests.beta * (eps.eps2 * c + eps.eps1 * d) + tests.alpha * (eps.eps1 * a + eps.eps2 * b)
    q = tests.beta * state[..., D]
    return p, q


def _size(x, rng):
    """Randomized rounding: ``floor(x) + Bernoulli(frac(x))``, so ``E[size] = x``."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    lo = np.floor(x)
    return (lo + (rng.random(np.shape(x)) < x - lo)).astype(np.int64)


def observe_stochastic(state, eps: EpsilonSet, tests: TestParams, rng: np.random.Generator, aggregate=None):
    """Draw reported data for integer state(s).

    ``rt``/``rp`` come from the forward rate formulas evaluated on
    ``aggregate`` when given (shared testing fractions), else on ``state``.
    """
    state = np.asarray(state)
    a, b, c, d = _test_groups(state, eps)
    true_pos = (rng.binomial(_size(eps.eps2 * c, rng), tests.beta)
                + rng.binomial(_size(eps.eps1 * d, rng), tests.beta))
    false_pos = (rng.binomial(_size(eps.eps1 * a, rng), tests.alpha)
                 + rng.binomial(_size(eps.eps2 * b, rng), tests.alpha))
    q = rng.binomial(state[..., D].astype(np.int64), tests.beta)
    src = state if aggregate is None else aggregate
    rt, rp = testing_rates(src, eps, tests)
    shape = np.shape(true_pos)
    return ObservationRecord(
        p=true_pos + false_pos,
        q=q,
        rt=np.broadcast_to(rt, shape).astype(float),
        rp=np.broadcast_to(rp, shape).astype(float),
    )


@dataclass
class Trajectory:
    """Simulated run: ``states`` has shape ``(T + 1, G, 5)`` starting at t=0,
    ``observations`` has shape ``(T, G)`` for t=1..T."""

    states: np.ndarray
    observations: ObservationRecord
    fluxes: list = field(default_factory=list, repr=False)


def simulate(initial, params: EpiParams, tests: TestParams, eps: EpsilonSet, coupling, horizon: int,
             rng: np.random.Generator) -> Trajectory:
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    x = np.asarray(initial)
    if x.ndim != 2 or x.shape[1] != 5:
        raise ValueError(f"initial state must have shape (G, 5), got {x.shape}")
    if np.any(x < 0):
        raise ValueError("initial state must be nonnegative")
    x = x.astype(np.int64)
    states = [x]
    obs = []
    fluxes = []
    for _ in range(horizon):
        x, flux = step_stochastic(x, params, coupling, rng)
        states.append(x)
        fluxes.append(flux)
        obs.append(observe_stochastic(x, eps, tests, rng, aggregate=x.sum(axis=0)))
    record = ObservationRecord(
        p=np.stack([o.p for o in obs]),
        q=np.stack([o.q for o in obs]),
        rt=np.stack([o.rt for o in obs]),
        rp=np.stack([o.rp for o in obs]),
    )
    return Trajectory(np.stack(states), record, fluxes)


def seeded_initial_state(populations, initial_infectives) -> np.ndarray:
    """Integer state with the given infectives and everyone else susceptible."""
    pops = np.asarray(populations, dtype=np.int64)
    inf = np.zeros_like(pops)
    inf[:] = np.asarray(initial_infectives, dtype=np.int64)
    if np.any(inf > pops) or np.any(inf < 0):
        raise ValueError("initial infectives must lie in [0, population]")
    x = np.zeros((pops.size, 5), dtype=np.int64)
    x[:, S] = pops - inf
    x[:, I] = inf
    return x


def mean_recovery_time(params: EpiParams) -> float:
    return math.inf if params.lambda_R == 0 else 1.0 / params.lambda_R
