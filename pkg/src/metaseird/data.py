"""Loading, cleaning and aggregating reported epidemic data."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    COMPARTMENTS,
    EpiParams,
    EpsilonSet,
    ObservationRecord,
    RegionMeta,
    TestParams,
    gravity_coupling,
    seeded_initial_state,
    simulate,
    validate_regions,
)
from .errors import DataError

REGION_HEADER = ["id", "name", "population", "lat", "lon"]
RAW_HEADER = ["date", "region_id", "cum_cases", "cum_deaths", "tests_total", "positivity"]
SERIES_HEADER = ["t", "region_id", "P", "Q", "rt", "rp"]
TRUTH_HEADER = ["t", "region_id", *COMPARTMENTS]

FLAG_NEGATIVE_CORRECTION = 1
FLAG_CARRIED_EPS = 2
FLAG_IMPUTED_RATE = 4

SUNDAY = 6  # date.weekday()


@dataclass(frozen=True)
class RawDailyRecord:
    date: dt.date
    region_id: int
    cumulative_cases: float
    cumulative_deaths: float
    tests_total: float | None = None
    positivity: float | None = None


@dataclass(frozen=True)
class Correction:
    region_id: int
    date: dt.date
    kind: str
    original: float | None
    replacement: float


@dataclass
class CleanSeries:
    """Aligned per-region observation series.

    ``obs`` fields have shape ``(T, G)``; ``flags`` is a bitmask of the
    ``FLAG_*`` constants per point; ``corrections`` lists every day-level
    value that was clamped or imputed.
    """

    obs: ObservationRecord
    flags: np.ndarray
    labels: list
    region_ids: list
    time_unit: str = "day"
    corrections: list = field(default_factory=list)

    def __len__(self):
        return self.obs.p.shape[0]

    def head(self, n: int) -> "CleanSeries":
        return CleanSeries(self.obs[:n], self.flags[:n], self.labels[:n], self.region_ids, self.time_unit,
                           self.corrections)

    def tail_from(self, n: int) -> "CleanSeries":
        return CleanSeries(self.obs[n:], self.flags[n:], self.labels[n:], self.region_ids, self.time_unit,
                           self.corrections)


# ---------------------------------------------------------------- regions


def _open_text(path):
    try:
        return open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


def load_regions(path) -> list[RegionMeta]:
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != REGION_HEADER:
            raise DataError(f"{path}: header must be {','.join(REGION_HEADER)}")
        regions = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(REGION_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(REGION_HEADER)} fields, got {len(row)}")
            try:
                region = RegionMeta(int(row[0]), row[1].strip(), int(row[2]), float(row[3]), float(row[4]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            regions.append(region)
    try:
        validate_regions(regions)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return sorted(regions, key=lambda r: r.id)


def texas_regions() -> list[RegionMeta]:
    """Bundled 11-region Texas HHS table (approximate populations and centroids)."""
    with resources.as_file(resources.files("metaseird") / "resources" / "texas_hhs_regions.csv") as path:
        return load_regions(path)


# ---------------------------------------------------------------- raw daily data


def _opt_float(text):
    text = text.strip()
    return None if text == "" else float(text)


def load_daily_records(path) -> list[RawDailyRecord]:
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RAW_HEADER:
            raise DataError(f"{path}: header must be {','.join(RAW_HEADER)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(RAW_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(RAW_HEADER)} fields, got {len(row)}")
            try:
                rec = RawDailyRecord(
                    dt.date.fromisoformat(row[0].strip()),
                    int(row[1]),
                    float(row[2]),
                    float(row[3]),
                    _opt_float(row[4]),
                    _opt_float(row[5]),
                )
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if rec.cumulative_cases < 0 or rec.cumulative_deaths < 0 or (rec.tests_total or 0) < 0:
                raise DataError(f"{path}:{lineno}: counts must be >= 0")
            records.append(rec)
    return records


def write_daily_records(path, records: Iterable[RawDailyRecord]) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v)) if not float(v).is_integer() else str(int(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_HEADER)
        for r in records:
            w.writerow([r.date.isoformat(), r.region_id, fmt(r.cumulative_cases), fmt(r.cumulative_deaths),
                        fmt(r.tests_total), fmt(r.positivity)])


def _impute(values, region_id, dates, kind, corrections):
    """Last observation carried forward (back-filled at the start); returns (array, imputed mask)."""
    out = np.array([np.nan if v is None else v for v in values], dtype=float)
    imputed = np.zeros(out.size, dtype=bool)
    valid = np.flatnonzero(~np.isnan(out))
    if valid.size == 0:
        return out, imputed
    for k in range(out.size):
        if np.isnan(out[k]):
            prior = valid[valid < k]
            src = prior[-1] if prior.size else valid[0]
            out[k] = out[src]
            imputed[k] = True
            corrections.append(Correction(region_id, dates[k], kind, None, float(out[k])))
    return out, imputed


def _clean_daily(records: Sequence[RawDailyRecord], populations=None):
    """Per-region daily arrays after differencing, clamping and imputation."""
    if not records:
        raise DataError("no daily records")
    by_region: dict[int, list[RawDailyRecord]] = {}
    for rec in records:
        by_region.setdefault(rec.region_id, []).append(rec)
    region_ids = sorted(by_region)
    dates = None
    corrections: list[Correction] = []
    cols = {k: [] for k in ("new", "deaths", "rt", "rp", "flags")}
    for rid in region_ids:
        recs = sorted(by_region[rid], key=lambda r: r.date)
        rdates = [r.date for r in recs]
        for a, b in zip(rdates, rdates[1:]):
            if (b - a).days != 1:
                raise DataError(f"region {rid}: dates must be consecutive days, gap or duplicate between {a} and {b}")
        if dates is None:
            dates = rdates
        elif rdates != dates:
            raise DataError(f"region {rid}: dates are not aligned with region {region_ids[0]}")
        flags = np.zeros(len(recs), dtype=np.int64)

        cum = np.array([r.cumulative_cases for r in recs], dtype=float)
        new = np.diff(cum, prepend=0.0)
        for k in np.flatnonzero(new < 0):
            corrections.append(Correction(rid, rdates[k], "negative_new_cases", float(new[k]), 0.0))
            flags[k] |= FLAG_NEGATIVE_CORRECTION
        new = np.maximum(new, 0.0)

        deaths = np.array([r.cumulative_deaths for r in recs], dtype=float)
        running = np.maximum.accumulate(deaths)
        for k in np.flatnonzero(deaths < running):
            corrections.append(Correction(rid, rdates[k], "decreasing_deaths", float(deaths[k]), float(running[k])))
            flags[k] |= FLAG_NEGATIVE_CORRECTION

        tests, imp_t = _impute([r.tests_total for r in recs], rid, rdates, "imputed_tests", corrections)
        pos, imp_p = _impute([r.positivity for r in recs], rid, rdates, "imputed_positivity", corrections)
        flags[imp_t | imp_p] |= FLAG_IMPUTED_RATE
        if populations is not None:
            rt = tests / float(populations[rid])
        else:
            rt = np.full(tests.size, np.nan)

        cols["new"].append(new)
        cols["deaths"].append(running)
        cols["rt"].append(rt)
        cols["rp"].append(pos)
        cols["flags"].append(flags)
    arrays = {k: np.stack(v, axis=1) for k, v in cols.items()}
    return dates, region_ids, arrays, corrections


def _populations_map(populations):
    if populations is None:
        return None
    if isinstance(populations, dict):
        return populations
    if len(populations) and hasattr(populations[0], "population"):
        return {r.id: r.population for r in populations}
    return dict(enumerate(populations))


def daily_series(daily: Sequence[RawDailyRecord], populations=None) -> CleanSeries:
    """Cleaned day-by-day series (no aggregation)."""
    dates, region_ids, a, corrections = _clean_daily(daily, _populations_map(populations))
    obs = ObservationRecord(a["new"], a["deaths"], a["rt"], a["rp"])
    return CleanSeries(obs, a["flags"], [d.isoformat() for d in dates], region_ids, "day", corrections)


def weekly_aggregate(daily: Sequence[RawDailyRecord], populations=None) -> CleanSeries:
    """Average Sunday-to-Saturday blocks of the cleaned daily data.

    New cases, cumulative deaths, testing rates and positivity are each
    averaged over the week; partial weeks at either end are dropped.
    ``populations`` (regions, a list indexed by region id, or a dict) turns
    daily test counts into testing rates.
    """
    dates, region_ids, a, corrections = _clean_daily(daily, _populations_map(populations))
    start = next((k for k, d in enumerate(dates) if d.weekday() == SUNDAY), None)
    if start is None or len(dates) - start < 7:
        raise DataError("insufficient data: no complete Sunday-to-Saturday week")
    n_weeks = (len(dates) - start) // 7
    blocks = [slice(start + 7 * w, start + 7 * (w + 1)) for w in range(n_weeks)]

    def avg(x):
        return np.stack([x[b].mean(axis=0) for b in blocks])

    flags = np.stack([np.bitwise_or.reduce(a["flags"][b], axis=0) for b in blocks])
    obs = ObservationRecord(avg(a["new"]), avg(a["deaths"]), avg(a["rt"]), avg(a["rp"]))
    labels = [dates[b.start].isoformat() for b in blocks]
    return CleanSeries(obs, flags, labels, region_ids, "week", corrections)


# ---------------------------------------------------------------- series files


def write_series(path, series: CleanSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_HEADER)
        t_len, g = series.obs.shape
        for t in range(t_len):
            for i in range(g):
                w.writerow([series.labels[t], series.region_ids[i], _num(series.obs.p[t, i]),
                            _num(series.obs.q[t, i]), repr(float(series.obs.rt[t, i])),
                            repr(float(series.obs.rp[t, i]))])


def _num(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def read_series(path, time_unit: str = "day") -> CleanSeries:
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SERIES_HEADER:
            raise DataError(f"{path}: header must be {','.join(SERIES_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SERIES_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(SERIES_HEADER)} fields, got {len(row)}")
            try:
                rows.append((row[0].strip(), int(row[1]), float(row[2]), float(row[3]), float(row[4]),
                             float(row[5])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no observations")
    labels = list(dict.fromkeys(r[0] for r in rows))
    region_ids = sorted({r[1] for r in rows})
    if len(rows) != len(labels) * len(region_ids):
        raise DataError(f"{path}: series is not aligned across regions and times")
    ti = {lab: k for k, lab in enumerate(labels)}
    gi = {rid: k for k, rid in enumerate(region_ids)}
    arr = np.full((4, len(labels), len(region_ids)), np.nan)
    for lab, rid, *vals in rows:
        arr[:, ti[lab], gi[rid]] = vals
    if np.isnan(arr).any():
        raise DataError(f"{path}: duplicate or missing (t, region_id) rows")
    obs = ObservationRecord(*arr)
    return CleanSeries(obs, np.zeros(obs.shape, dtype=np.int64), labels, region_ids, time_unit)


def load_observations(path, populations=None, time_unit: str = "day") -> CleanSeries:
    """Read either a raw daily CSV (cleaned, weekly-averaged for ``time_unit="week"``)
    or an already-prepared series CSV."""
    with _open_text(path) as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    if header == SERIES_HEADER:
        return read_series(path, time_unit)
    if header == RAW_HEADER:
        records = load_daily_records(path)
        if time_unit == "week":
            return weekly_aggregate(records, populations)
        return daily_series(records, populations)
    raise DataError(f"{path}: unrecognized header {header}")


def write_ground_truth(path, truth: np.ndarray, labels=None, region_ids=None) -> None:
    t_len, g, _ = truth.shape
    labels = labels or [str(t + 1) for t in range(t_len)]
    region_ids = region_ids or list(range(g))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRUTH_HEADER)
        for t in range(t_len):
            for i in range(g):
                w.writerow([labels[t], region_ids[i], *(int(v) for v in truth[t, i])])


# ---------------------------------------------------------------- synthetic data


def generate_synthetic(regions: Sequence[RegionMeta], params: EpiParams, tests: TestParams, eps: EpsilonSet,
                       horizon: int, seed: int, initial_infectives, coupling=None):
    """Simulate a run and package its reports as a :class:`CleanSeries`.

    Returns ``(truth, series)`` where ``truth`` has shape ``(horizon, G, 5)``
    and is aligned with the series rows (t = 1..horizon).
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if coupling is None:
        coupling = gravity_coupling(regions)
    pops = [r.population for r in regions]
    init = seeded_initial_state(pops, initial_infectives)
    traj = simulate(init, params, tests, eps, coupling, horizon, np.random.default_rng(seed))
    obs = ObservationRecord(traj.observations.p.astype(float), traj.observations.q.astype(float),
                            traj.observations.rt, traj.observations.rp)
    series = CleanSeries(obs, np.zeros(obs.shape, dtype=np.int64), [str(t + 1) for t in range(horizon)],
                         [r.id for r in regions], "day")
    return traj.states[1:], series


def series_to_daily_records(series: CleanSeries, populations, start: dt.date) -> list[RawDailyRecord]:
    """Express a daily series as raw cumulative records starting at ``start``.

    Testing rates become daily test counts; reported deaths are written as
    given (they may dip, as reports do).
    """
    t_len, g = series.obs.shape
    cum = np.cumsum(series.obs.p, axis=0)
    out = []
    for t in range(t_len):
        day = start + dt.timedelta(days=t)
        for i in range(g):
            out.append(RawDailyRecord(day, series.region_ids[i], float(cum[t, i]), float(series.obs.q[t, i]),
                                      float(round(series.obs.rt[t, i] * populations[i])),
                                      float(series.obs.rp[t, i])))
    return out
