"""Fused filter recursion compiled with numba.

Mirrors ``ukf._filter_series_numpy`` step for step, with hand-rolled 5x5
linear algebra so every region-step stays inside one compiled loop. Errors
are reported as status codes and translated into exceptions by
:func:`run_filter_kernel`.
"""

from __future__ import annotations

import math

import numpy as np

from ._jit import njit
from .core import EpsilonSet
from .errors import (
    CovarianceError,
    FilterError,
    InfectionPressureError,
    InitializationError,
    SingularInnovationError,
)

OK = 0
ST_INIT = 1
ST_PRESSURE = 2
ST_CHOL = 3
ST_SINGULAR = 4
ST_PSD = 5
ST_EPS = 6

NS = 5
NSIG = 2 * NS + 1
JITTER_ESCALATIONS = 3
PSD_TOL = 1e-8
EPS_TOL = 1e-12
LOG_2PI = math.log(2.0 * math.pi)
REPORT_ROUNDING_VAR = 1.0 / 12.0


@njit
def _chol(a, out):
    n = a.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = a[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            if i == j:
                if not s > 0.0:
                    return False
                out[i, i] = math.sqrt(s)
            else:
                out[i, j] = s / out[j, j]
        for j in range(i + 1, n):
            out[i, j] = 0.0
    return True


@njit
def _chol_jitter(a, out, work):
    if _chol(a, out):
        return True
    n = a.shape[0]
    tr = 0.0
    for i in range(n):
        tr += a[i, i]
    jitter = 1e-9 * abs(tr) / n
    for _ in range(JITTER_ESCALATIONS + 1):
        work[:, :] = a
        for i in range(n):
            work[i, i] += jitter
        if _chol(work, out):
            return True
        jitter *= 10.0
    return False


@njit
def _sigma(mean, cov, z, scaled, root, work):
    for i in range(NS):
        for j in range(NS):
            scaled[i, j] = NS * cov[i, j]
    if not _chol_jitter(scaled, root, work):
        return False
    for i in range(NS):
        z[0, i] = mean[i]
    for k in range(NS):
        for i in range(NS):
            z[1 + k, i] = mean[i] + root[i, k]
            z[1 + NS + k, i] = mean[i] - root[i, k]
    return True


@njit
def _f(z, x, lam_s, lam_e, lam_r, lam_d, pop, ext):
    for k in range(z.shape[0]):
        s, e, inf, r, d = z[k, 0], z[k, 1], z[k, 2], z[k, 3], z[k, 4]
        pressure = lam_s * (inf / pop + ext)
        x[k, 0] = s * (1.0 - pressure)
        x[k, 1] = (1.0 - lam_e) * e + pressure * s
        x[k, 2] = (1.0 - lam_r - lam_d) * inf + lam_e * e
        x[k, 3] = r + lam_r * inf
        x[k, 4] = d + lam_d * inf


@njit
def _h(z, y, eps1, eps2, eps3, eps4, alpha, beta):
    for k in range(z.shape[0]):
        w = z[k, 0] + z[k, 3]
        a = (1.0 - eps3) * w
        b = eps3 * w
        c = (1.0 - eps4) * z[k, 2]
        dd = eps4 * z[k, 2] + z[k, 1]
        y[k, 0] = beta * (eps2 * c + eps1 * dd) + alpha * (eps1 * a + eps2 * b)
        y[k, 1] = beta * z[k, 4]


@njit
def _process_cov(prev, pops, coupling, i, lam_s, lam_e, lam_r, lam_d, q):
    g = prev.shape[0]
    s = prev[i, 0]
    tot = 0.0
    sq = 0.0
    var_terms = 0.0
    for j in range(g):
        pj = lam_s * coupling[i, j] * prev[j, 2] / pops[j]
        tot += pj
        sq += pj * pj
        var_terms += pj * (1.0 - pj)
    var_exp = s * var_terms - s * (tot * tot - sq)
    inf = prev[i, 2]
    var_ne = prev[i, 1] * lam_e * (1.0 - lam_e)
    lrd = lam_r + lam_d
    q[:, :] = 0.0
    q[0, 0] = var_exp
    q[1, 1] = var_exp + var_ne
    q[2, 2] = var_ne + inf * lrd * (1.0 - lrd)
    q[3, 3] = inf * lam_r * (1.0 - lam_r)
    q[4, 4] = inf * lam_d * (1.0 - lam_d)
    q[0, 1] = q[1, 0] = -var_exp
    q[1, 2] = q[2, 1] = -var_ne
    q[2, 3] = q[3, 2] = -inf * lam_r * (1.0 - lrd)
    q[2, 4] = q[4, 2] = -inf * lam_d * (1.0 - lrd)
    q[3, 4] = q[4, 3] = -inf * lam_r * lam_d


@njit
def _unit(v):
    if v < -EPS_TOL or v > 1.0 + EPS_TOL:
        return -1.0
    return min(max(v, 0.0), 1.0)


@njit
def _epsilons(s, e, inf, r, rt, rp, alpha, beta, zeta, eps4, out):
    if not (alpha < rp < beta):
        return False
    w = s + r
    sym_inf = (1.0 - eps4) * inf
    asym = eps4 * inf + e
    den3 = (zeta - 1.0) * w * (rp - alpha)
    if den3 == 0.0:
        return False
    eps3 = _unit(((beta - rp) * (asym + zeta * sym_inf) - w * (rp - alpha)) / den3)
    if eps3 < 0.0:
        return False
    a = (1.0 - eps3) * w
    b = eps3 * w
    den1 = (beta - alpha) * (b * asym - a * sym_inf)
    if den1 == 0.0:
        return False
    tested = (s + e + inf + r) * rt
    eps1 = _unit(tested * (rp * (b + sym_inf) - alpha * b - beta * sym_inf) / den1)
    if eps1 < 0.0:
        return False
    eps2 = _unit(zeta * eps1)
    if eps2 < 0.0:
        return False
    out[0] = eps1
    out[1] = eps2
    out[2] = eps3
    out[3] = eps4
    return True


@njit
def _weights(equal):
    w = np.full(NSIG, 1.0 / (2 * NS))
    if not equal:
        w[0] = 0.0
    return w


@njit
def filter_kernel(p, q, rt, rp, pops, coupling, lam, tst, prior, has_prior, equal, aggregate,
                  means, covs, pred_obs, innov, ll, eps_out, flags):
    """Returns ``(status, t, region, clamp_count, detail)``."""
    t_len, g = p.shape
    lam_s, lam_e, lam_r, lam_d = lam[0], lam[1], lam[2], lam[3]
    alpha, beta, zeta, eps4 = tst[0], tst[1], tst[2], tst[3]
    w = _weights(equal)

    z = np.zeros((NSIG, NS))
    x = np.zeros((NSIG, NS))
    yh = np.zeros((NSIG, 2))
    scaled = np.zeros((NS, NS))
    root = np.zeros((NS, NS))
    work = np.zeros((NS, NS))
    qc = np.zeros((NS, NS))
    m_pred = np.zeros((g, NS))
    p_pred = np.zeros((g, NS, NS))
    frac = np.zeros(g)
    ext = np.zeros(g)
    last = np.zeros((g, 4))
    have = np.zeros(g, dtype=np.bool_)
    cur = np.zeros(4)
    s_cov = np.zeros((2, 2))
    cross = np.zeros((NS, 2))
    gain = np.zeros((NS, 2))
    mu = np.zeros(2)
    post = np.zeros((NS, NS))
    clamps = 0

    for i in range(g):
        if has_prior:
            for k in range(4):
                last[i, k] = prior[k]
            have[i] = True
        deaths = q[0, i] / beta
        means[0, i, 0] = pops[i] - 2.0 * p[0, i] - deaths
        means[0, i, 1] = p[0, i]
        means[0, i, 2] = p[0, i]
        means[0, i, 3] = 0.0
        means[0, i, 4] = deaths
        if means[0, i, 0] < 0.0:
            return ST_INIT, 0, i, clamps, means[0, i, 0]
        for a in range(NS):
            for b in range(NS):
                covs[0, i, a, b] = 1.0 if a == b else 0.0

    for t in range(1, t_len):
        prev = means[t - 1]
        for j in range(g):
            frac[j] = prev[j, 2] / pops[j]
        for i in range(g):
            tot = 0.0
            for j in range(g):
                tot += coupling[i, j] * frac[j]
            if lam_s * tot > 1.0 + 1e-12:
                return ST_PRESSURE, t, i, clamps, lam_s * tot
            ext[i] = tot - coupling[i, i] * frac[i]

        # predict
        for i in range(g):
            _process_cov(prev, pops, coupling, i, lam_s, lam_e, lam_r, lam_d, qc)
            if not _sigma(prev[i], covs[t - 1, i], z, scaled, root, work):
                return ST_CHOL, t, i, clamps, 0.0
            _f(z, x, lam_s, lam_e, lam_r, lam_d, pops[i], ext[i])
            for a in range(NS):
                acc = 0.0
                for k in range(NSIG):
                    acc += w[k] * x[k, a]
                m_pred[i, a] = acc
            for a in range(NS):
                for b in range(a, NS):
                    acc = 0.0
                    for k in range(NSIG):
                        acc += w[k] * (x[k, a] - m_pred[i, a]) * (x[k, b] - m_pred[i, b])
                    p_pred[i, a, b] = acc + qc[a, b]
                    p_pred[i, b, a] = acc + qc[b, a]
            for a in range(NS):
                for b in range(a + 1, NS):
                    avg = 0.5 * (p_pred[i, a, b] + p_pred[i, b, a])
                    p_pred[i, a, b] = avg
                    p_pred[i, b, a] = avg

        # testing fractions
        if aggregate:
            agg = np.zeros(4)
            for i in range(g):
                for a in range(4):
                    agg[a] += max(m_pred[i, a], 0.0)
            total = 0.0
            pos = 0.0
            popsum = 0.0
            for i in range(g):
                tests_i = rt[t, i] * pops[i]
                total += tests_i
                pos += rp[t, i] * tests_i
                popsum += pops[i]
            if total > 0.0:
                rt_a = total / popsum
                rp_a = pos / total
            else:
                rt_a = 0.0
                rp_a = 0.0
                for i in range(g):
                    rp_a += rp[t, i]
                rp_a /= g
            ok = _epsilons(agg[0], agg[1], agg[2], agg[3], rt_a, rp_a, alpha, beta, zeta, eps4, cur)
            if ok:
                for i in range(g):
                    last[i, :] = cur
                    have[i] = True
            elif not have[0]:
                return ST_EPS, t, -1, clamps, rp_a
            for i in range(g):
                flags[t, i] = not ok
        else:
            for i in range(g):
                ok = _epsilons(max(m_pred[i, 0], 0.0), max(m_pred[i, 1], 0.0), max(m_pred[i, 2], 0.0),
                               max(m_pred[i, 3], 0.0), rt[t, i], rp[t, i], alpha, beta, zeta, eps4, cur)
                if ok:
                    last[i, :] = cur
                    have[i] = True
                elif not have[i]:
                    return ST_EPS, t, i, clamps, rp[t, i]
                flags[t, i] = not ok

        # update
        for i in range(g):
            e1, e2, e3, e4 = last[i, 0], last[i, 1], last[i, 2], last[i, 3]
            for a in range(4):
                eps_out[t, i, a] = last[i, a]
            mp = m_pred[i]
            if not _sigma(mp, p_pred[i], z, scaled, root, work):
                return ST_CHOL, t, i, clamps, 0.0
            _h(z, yh, e1, e2, e3, e4, alpha, beta)
            for a in range(2):
                acc = 0.0
                for k in range(NSIG):
                    acc += w[k] * yh[k, a]
                mu[a] = acc
            for a in range(2):
                for b in range(2):
                    acc = 0.0
                    for k in range(NSIG):
                        acc += w[k] * (yh[k, a] - mu[a]) * (yh[k, b] - mu[b])
                    s_cov[a, b] = acc
            for a in range(NS):
                for b in range(2):
                    acc = 0.0
                    for k in range(NSIG):
                        acc += w[k] * (z[k, a] - mp[a]) * (yh[k, b] - mu[b])
                    cross[a, b] = acc
            off = 0.5 * (s_cov[0, 1] + s_cov[1, 0])
            # observation noise at the clamped predicted mean
            sn = max(mp[0], 0.0)
            en = max(mp[1], 0.0)
            inn = max(mp[2], 0.0)
            rn = max(mp[3], 0.0)
            dn = max(mp[4], 0.0)
            wn = sn + rn
            var_p = (e1 * (1.0 - e3) * wn * alpha * (1.0 - alpha)
                     + e2 * e3 * wn * alpha * (1.0 - alpha)
                     + e2 * (1.0 - e4) * inn * beta * (1.0 - beta)
                     + e1 * (e4 * inn + en) * beta * (1.0 - beta))
            var_q = dn * beta * (1.0 - beta)
            s00 = s_cov[0, 0] + var_p + REPORT_ROUNDING_VAR
            s11 = s_cov[1, 1] + var_q + REPORT_ROUNDING_VAR
            s01 = off
            if not s00 > 0.0:
                return ST_SINGULAR, t, i, clamps, s00
            l00 = math.sqrt(s00)
            l10 = s01 / l00
            d11 = s11 - l10 * l10
            if not d11 > 0.0:
                return ST_SINGULAR, t, i, clamps, d11
            l11 = math.sqrt(d11)
            det = s00 * s11 - s01 * s01
            i00 = s11 / det
            i01 = -s01 / det
            i11 = s00 / det
            v0 = p[t, i] - mu[0]
            v1 = q[t, i] - mu[1]
            for a in range(NS):
                gain[a, 0] = cross[a, 0] * i00 + cross[a, 1] * i01
                gain[a, 1] = cross[a, 0] * i01 + cross[a, 1] * i11
            clamped = False
            for a in range(NS):
                val = mp[a] + gain[a, 0] * v0 + gain[a, 1] * v1
                if val < 0.0:
                    val = 0.0
                    clamped = True
                means[t, i, a] = val
            if clamped:
                clamps += 1
            for a in range(NS):
                for b in range(NS):
                    ks0 = gain[a, 0] * s00 + gain[a, 1] * s01
                    ks1 = gain[a, 0] * s01 + gain[a, 1] * s11
                    post[a, b] = p_pred[i, a, b] - (ks0 * gain[b, 0] + ks1 * gain[b, 1])
            for a in range(NS):
                for b in range(a + 1, NS):
                    avg = 0.5 * (post[a, b] + post[b, a])
                    post[a, b] = avg
                    post[b, a] = avg
            lo = np.linalg.eigvalsh(post)[0]
            if lo < 0.0:
                tr = 0.0
                for a in range(NS):
                    tr += post[a, a]
                if lo < -PSD_TOL * max(tr, 0.0):
                    return ST_PSD, t, i, clamps, lo
                for a in range(NS):
                    post[a, a] -= lo
            covs[t, i] = post
            pred_obs[t, i, 0] = mu[0]
            pred_obs[t, i, 1] = mu[1]
            innov[t, i, 0, 0] = s00
            innov[t, i, 0, 1] = s01
            innov[t, i, 1, 0] = s01
            innov[t, i, 1, 1] = s11
            w0 = v0 / l00
            w1 = (v1 - l10 * w0) / l11
            logdet = 2.0 * (math.log(l00) + math.log(l11))
            ll[t, i] = -0.5 * (2.0 * LOG_2PI + logdet) - 0.5 * (w0 * w0 + w1 * w1)
    return OK, 0, 0, clamps, 0.0


def run_filter_kernel(series, params, tests, coupling, pops, prior_eps, weighting, eps_mode):
    from .ukf import FilterResult

    p = np.ascontiguousarray(series.p, dtype=np.float64)
    t_len, g = p.shape
    means = np.zeros((t_len, g, NS))
    covs = np.zeros((t_len, g, NS, NS))
    pred_obs = np.full((t_len, g, 2), np.nan)
    innov = np.full((t_len, g, 2, 2), np.nan)
    ll = np.zeros((t_len, g))
    eps_out = np.full((t_len, g, 4), np.nan)
    flags = np.zeros((t_len, g), dtype=np.bool_)
    prior = np.zeros(4) if prior_eps is None else prior_eps.as_array()
    status, t, region, clamps, detail = filter_kernel(
        p,
        np.ascontiguousarray(series.q, dtype=np.float64),
        np.ascontiguousarray(series.rt, dtype=np.float64),
        np.ascontiguousarray(series.rp, dtype=np.float64),
        np.ascontiguousarray(pops, dtype=np.float64),
        np.ascontiguousarray(coupling, dtype=np.float64),
        np.array([params.lambda_S, params.lambda_E, params.lambda_R, params.lambda_D]),
        np.array([tests.alpha, tests.beta, tests.zeta, tests.eps4]),
        prior,
        prior_eps is not None,
        weighting == "equal",
        eps_mode == "aggregate",
        means, covs, pred_obs, innov, ll, eps_out, flags,
    )
    if status != OK:
        _raise(status, t, region, detail)
    return FilterResult(means, covs, pred_obs, innov, ll, eps_out, flags, int(clamps))


def _raise(status, t, region, detail):
    region = None if region < 0 else int(region)
    if status == ST_INIT:
        cause = InitializationError(f"initial susceptible estimate is negative ({detail:.6g})")
    elif status == ST_PRESSURE:
        cause = InfectionPressureError(region, detail)
    elif status == ST_CHOL:
        cause = CovarianceError("covariance could not be factorized after maximum jitter")
    elif status == ST_SINGULAR:
        cause = SingularInnovationError(f"innovation covariance is not positive definite ({detail:.6g})")
    elif status == ST_PSD:
        cause = CovarianceError(f"covariance not positive semidefinite: smallest eigenvalue {detail:.6g}")
    else:
        raise FilterError("testing fractions infeasible and no earlier set to carry forward", t=t, region=region)
    raise FilterError(str(cause), t=t, region=region) from cause


def eps_from_array(a) -> EpsilonSet:
    return EpsilonSet(*map(float, a))
