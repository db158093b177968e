"""State-dependent covariances of the transition and observation noise."""

from __future__ import annotations

import numpy as np

from .core import D, E, I, R, S, EpiParams, EpsilonSet, TestParams, exposure_probabilities
from .errors import CovarianceError

PSD_TOL = 1e-8


def process_covariance(states, params: EpiParams, coupling, region: int, populations=None) -> np.ndarray:
    """5x5 covariance of ``(n_S, n_E, n_I, n_R, n_D)`` for one region.

    Only the variances and the five covariances arising from the flux
    bookkeeping are nonzero. The exposure variance keeps the explicit
    ``j1 != j2`` cross term of the multinomial.
    """
    states = np.asarray(states, dtype=float)
    x = states[region]
    probs = exposure_probabilities(states, params, coupling, populations)[region]
    s = x[S]
    cross = probs.sum() ** 2 - np.sum(probs**2)  # sum over j1 != j2 of p_j1 p_j2
    var_exp = s * np.sum(probs * (1.0 - probs)) - s * cross

    lr, ld = params.lambda_R, params.lambda_D
    inf = x[I]
    var_ne = x[E] * params.lambda_E * (1.0 - params.lambda_E)
    var_nr = inf * lr * (1.0 - lr)
    var_nd = inf * ld * (1.0 - ld)

    q = np.zeros((5, 5))
    q[S, S] = var_exp
    q[E, E] = var_exp + var_ne
    q[I, I] = var_ne + inf * (lr + ld) * (1.0 - (lr + ld))
    q[R, R] = var_nr
    q[D, D] = var_nd
    q[S, E] = -var_exp
    q[E, I] = -var_ne
    q[I, R] = -inf * lr * (1.0 - (lr + ld))
    q[I, D] = -inf * ld * (1.0 - (lr + ld))
    q[R, D] = -inf * lr * ld
    return np.triu(q) + np.triu(q, 1).T


def observation_covariance(state, eps: EpsilonSet, tests: TestParams) -> np.ndarray:
    """Diagonal 2x2 covariance of the (new cases, deaths) reporting noise."""
    x = np.asarray(state, dtype=float)
    a, b = tests.alpha, tests.beta
    w = x[S] + x[R]
    var_p = (
        eps.eps1 * (1.0 - eps.eps3) * w * a * (1.0 - a)
        + eps.eps2 * eps.eps3 * w * a * (1.0 - a)
        + eps.eps2 * (1.0 - eps.eps4) * x[I] * b * (1.0 - b)
        + eps.eps1 * (eps.eps4 * x[I] + x[E]) * b * (1.0 - b)
    )
    var_q = x[D] * b * (1.0 - b)
    return np.diag([var_p, var_q])


def repair_psd(m: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetrize; lift the diagonal when the spectrum dips slightly below zero.

    Raises :class:`CovarianceError` if the smallest eigenvalue is below
    ``-tol * trace``.
    """
    m = 0.5 * (m + m.T)
    lo = np.linalg.eigvalsh(m)[0]
    if lo >= 0:
        return m
    if lo < -tol * max(np.trace(m), 0.0):
        raise CovarianceError(f"covariance not positive semidefinite: smallest eigenvalue {lo:.6g}")
    return m + (-lo) * np.eye(m.shape[0])
