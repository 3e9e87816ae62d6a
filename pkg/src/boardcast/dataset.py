"""Raw-series ingestion, daily breach fractions, labels and rolling windows.

A dataset directory holds ``periods.csv`` plus one or more catchments.  A
catchment is a directory containing ``waits.csv``, ``cases.csv`` and
``static.csv``; when those files sit directly in the dataset directory the
dataset has a single catchment named ``default``.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

LEVELS = ("building", "estate", "tpu")
MIN_HOURS_PER_DAY = 20
DEFAULT_INPUT_LENGTH = 7

WAITS_HEADER = ["date", "hour", "breached"]
CASES_HEADER = ["date", "count"]
STATIC_HEADER = ["feature", "level", "response_level", "value"]
PERIODS_HEADER = ["name", "start", "end"]
SKIPS_HEADER = ["catchment", "anchor_date", "stage", "reason"]


class DatasetError(ValueError):
    pass


class DuplicateRecordError(DatasetError):
    pass


class InsufficientHistoryError(DatasetError):
    pass


class PeriodConfigError(DatasetError):
    pass


class MissingDateError(DatasetError):
    pass


# -- domain types -------------------------------------------------------------


@dataclass(frozen=True)
class HourlyWaitRecord:
    date: dt.date
    hour: int
    breached: bool

    def __post_init__(self):
        if not 0 <= self.hour <= 23:
            raise DatasetError(f"hour {self.hour} outside [0, 23] on {self.date}")


@dataclass
class DailySeries:
    """Date-indexed values; dates strictly increasing but gaps are allowed."""

    dates: np.ndarray  # datetime64[D]
    values: np.ndarray

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.dates.shape != self.values.shape:
            raise DatasetError("dates and values differ in length")
        if len(self.dates) > 1 and np.any(np.diff(self.dates).astype(np.int64) <= 0):
            raise DatasetError("dates must be strictly increasing")

    def __len__(self):
        return len(self.dates)

    @property
    def span(self) -> int:
        """Number of calendar days from first to last date inclusive."""
        if len(self.dates) == 0:
            return 0
        return int((self.dates[-1] - self.dates[0]).astype(np.int64)) + 1

    def as_dict(self) -> dict[dt.date, float]:
        return {d.item(): float(v) for d, v in zip(self.dates, self.values)}

    def dense(self, start: np.datetime64, n_days: int) -> np.ndarray:
        """Values laid out on a contiguous calendar from ``start``; NaN where absent."""
        out = np.full(n_days, np.nan)
        idx = (self.dates - start).astype(np.int64)
        keep = (idx >= 0) & (idx < n_days)
        out[idx[keep]] = self.values[keep]
        return out

    def get(self, date) -> float:
        d = np.datetime64(date, "D")
        i = np.searchsorted(self.dates, d)
        if i < len(self.dates) and self.dates[i] == d:
            return float(self.values[i])
        raise MissingDateError(f"no value for {d}")


class DailyBoardingSeries(DailySeries):
    def __post_init__(self):
        super().__post_init__()
        if np.any((self.values < 0) | (self.values > 1)):
            raise DatasetError("breach fractions must lie in [0, 1]")


class CaseCountSeries(DailySeries):
    def __post_init__(self):
        super().__post_init__()
        if np.any(self.values < 0):
            raise DatasetError("case counts must be nonnegative")


@dataclass(frozen=True)
class PeriodSpec:
    name: str
    start: dt.date
    end: dt.date

    def __post_init__(self):
        if self.start > self.end:
            raise PeriodConfigError(f"period {self.name!r} starts after it ends")

    def contains(self, d: dt.date) -> bool:
        return self.start <= d <= self.end


CANONICAL_PERIODS = (
    PeriodSpec("pre-covid", dt.date(2018, 12, 31), dt.date(2020, 1, 22)),
    PeriodSpec("waves-1-4", dt.date(2020, 1, 23), dt.date(2021, 5, 21)),
    PeriodSpec("between-4-and-5", dt.date(2021, 5, 22), dt.date(2021, 12, 23)),
    PeriodSpec("wave-5", dt.date(2021, 12, 24), dt.date(2022, 7, 23)),
)


@dataclass(frozen=True)
class StaticFeature:
    """One time-invariant feature.

    Categorical features carry a one-hot ``encoding`` over ``response_levels``;
    continuous features have an empty ``response_levels`` and a length-1 encoding.
    """

    name: str
    level: str
    encoding: tuple[float, ...]
    response_levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.level not in LEVELS:
            raise DatasetError(f"feature {self.name!r}: level {self.level!r} not one of {LEVELS}")
        if self.categorical:
            if len(self.encoding) != len(self.response_levels):
                raise DatasetError(f"feature {self.name!r}: encoding/response-level length mismatch")
            if sorted(set(self.encoding)) not in ([1.0], [0.0, 1.0]) or sum(self.encoding) != 1.0:
                raise DatasetError(f"feature {self.name!r}: one-hot encoding must sum to exactly 1")
        elif len(self.encoding) != 1:
            raise DatasetError(f"continuous feature {self.name!r} must have a single value")

    @property
    def categorical(self) -> bool:
        return bool(self.response_levels)

    @property
    def slot_names(self) -> list[str]:
        if self.categorical:
            return [f"{self.name}={r}" for r in self.response_levels]
        return [self.name]


@dataclass
class StaticProfile:
    features: list[StaticFeature]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DatasetError("static feature names must be unique within a profile")

    def ordered(self) -> list[StaticFeature]:
        return sorted(self.features, key=lambda f: (LEVELS.index(f.level), f.name))

    def by_level(self) -> dict[str, list[StaticFeature]]:
        groups = {lvl: [] for lvl in LEVELS}
        for f in self.ordered():
            groups[f.level].append(f)
        return groups

    def flatten(self) -> np.ndarray:
        vals = [v for f in self.ordered() for v in f.encoding]
        return np.asarray(vals, dtype=np.float64)

    @property
    def flattened_length(self) -> int:
        return sum(len(f.encoding) for f in self.features)

    def level_widths(self) -> tuple[int, ...]:
        g = self.by_level()
        return tuple(sum(len(f.encoding) for f in g[lvl]) for lvl in LEVELS)

    def slot_names(self) -> list[str]:
        return [s for f in self.ordered() for s in f.slot_names]


@dataclass(frozen=True)
class LabelRule:
    horizon: int = 14
    cutoff: float = 17 / 24
    mode: str = "point"

    def __post_init__(self):
        if self.horizon < 1:
            raise DatasetError("horizon must be >= 1")
        if not 0 < self.cutoff < 1:
            raise DatasetError("cutoff must lie strictly between 0 and 1")
        if self.mode not in ("point", "any_in_horizon"):
            raise DatasetError(f"unknown label mode {self.mode!r}")


@dataclass
class WindowSample:
    temporal: np.ndarray  # [input_length, channels]
    static: np.ndarray
    label: int
    anchor_date: dt.date
    label_date: dt.date
    catchment: str = "default"

    @property
    def input_start(self) -> dt.date:
        return self.anchor_date - dt.timedelta(days=self.temporal.shape[0] - 1)


@dataclass
class SkipReport:
    """Samples skipped or dropped on the way from series to period buckets."""

    rows: list[tuple[str, str, str, str]] = field(default_factory=list)

    def add(self, catchment: str, anchor: dt.date, stage: str, reason: str):
        self.rows.append((catchment, anchor.isoformat(), stage, reason))

    def __len__(self):
        return len(self.rows)

    def write(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SKIPS_HEADER)
            w.writerows(self.rows)


# -- operations ---------------------------------------------------------------


def compute_daily_breach_fraction(
    records: Iterable[HourlyWaitRecord], report: SkipReport | None = None, catchment: str = "default"
) -> DailyBoardingSeries:
    """Share of recorded hours per day whose published wait exceeded four hours.

    Days with fewer than ``MIN_HOURS_PER_DAY`` recorded hours are excluded.
    """
    seen: set[tuple[dt.date, int]] = set()
    counts: dict[dt.date, list[int]] = {}
    for r in records:
        key = (r.date, r.hour)
        if key in seen:
            raise DuplicateRecordError(f"duplicate hourly record for date={r.date.isoformat()} hour={r.hour}")
        seen.add(key)
        c = counts.setdefault(r.date, [0, 0])
        c[0] += bool(r.breached)
        c[1] += 1
    dates, fracs = [], []
    for d in sorted(counts):
        k, n = counts[d]
        if n < MIN_HOURS_PER_DAY:
            if report is not None:
                report.add(catchment, d, "ingest", f"incomplete day: {n}/24 hours")
            continue
        dates.append(np.datetime64(d, "D"))
        fracs.append(k / n)
    return DailyBoardingSeries(np.array(dates, dtype="datetime64[D]"), np.array(fracs))


def _label_dates(rule: LabelRule, anchor: dt.date) -> list[dt.date]:
    if rule.mode == "point":
        return [anchor + dt.timedelta(days=rule.horizon)]
    return [anchor + dt.timedelta(days=k) for k in range(1, rule.horizon + 1)]


def binarize(series: DailySeries, rule: LabelRule, anchor: dt.date) -> int:
    """1 iff the breach fraction on the label date(s) attains the cutoff (inclusive)."""
    vals = [series.get(d) for d in _label_dates(rule, anchor)]
    return int(max(vals) >= rule.cutoff)


def _as_date(d: np.datetime64) -> dt.date:
    return d.astype("datetime64[D]").item()


def build_windows(
    boarding: DailyBoardingSeries,
    cases: CaseCountSeries | None,
    profile: StaticProfile | None,
    input_length: int = DEFAULT_INPUT_LENGTH,
    rule: LabelRule = LabelRule(),
    report: SkipReport | None = None,
    catchment: str = "default",
) -> list[WindowSample]:
    """One sample per anchor whose whole input window and label date(s) exist."""
    need = input_length + rule.horizon
    if boarding.span < need:
        raise InsufficientHistoryError(
            f"insufficient history: series spans {boarding.span} days, at least {need} required "
            f"(input_length {input_length} + horizon {rule.horizon})"
        )
    start = boarding.dates[0]
    n = boarding.span
    frac = boarding.dense(start, n)
    chans = [frac]
    if cases is not None:
        chans.append(cases.dense(start, n))
    grid = np.stack(chans, axis=1)
    static = profile.flatten() if profile is not None else np.zeros(0)
    out = []
    for a in range(input_length - 1, n - rule.horizon):
        anchor = _as_date(start + np.timedelta64(a, "D"))
        window = grid[a - input_length + 1 : a + 1]
        if rule.mode == "point":
            lab = frac[a + rule.horizon : a + rule.horizon + 1]
        else:
            lab = frac[a + 1 : a + rule.horizon + 1]
        if np.isnan(window).any():
            if report is not None:
                report.add(catchment, anchor, "windows", "missing date in input window")
            continue
        if np.isnan(lab).any():
            if report is not None:
                report.add(catchment, anchor, "windows", "missing label date")
            continue
        out.append(
            WindowSample(
                temporal=window.copy(),
                static=static.copy(),
                label=int(lab.max() >= rule.cutoff),
                anchor_date=anchor,
                label_date=anchor + dt.timedelta(days=rule.horizon),
                catchment=catchment,
            )
        )
    return out


def check_periods(periods: Sequence[PeriodSpec]) -> None:
    names = [p.name for p in periods]
    if len(set(names)) != len(names):
        raise PeriodConfigError("period names must be unique")
    ps = sorted(periods, key=lambda p: p.start)
    for a, b in zip(ps, ps[1:]):
        if b.start <= a.end:
            raise PeriodConfigError(f"periods {a.name!r} and {b.name!r} overlap")


def split_by_period(
    samples: Iterable[WindowSample], periods: Sequence[PeriodSpec], report: SkipReport | None = None
) -> dict[str, list[WindowSample]]:
    """Bucket samples by the period containing their anchor date.

    Samples whose label date falls beyond the end of that period are dropped,
    as are samples anchored outside every period.
    """
    check_periods(periods)
    out: dict[str, list[WindowSample]] = {p.name: [] for p in periods}
    for s in samples:
        home = next((p for p in periods if p.contains(s.anchor_date)), None)
        if home is None:
            if report is not None:
                report.add(s.catchment, s.anchor_date, "periods", "anchor outside all periods")
            continue
        if s.label_date > home.end:
            if report is not None:
                report.add(s.catchment, s.anchor_date, "periods", f"label date crosses end of {home.name}")
            continue
        out[home.name].append(s)
    return out


@dataclass
class ChannelNorm:
    mean: float
    std: float
    centered_only: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.centered_only:
            return x - self.mean
        return (x - self.mean) / self.std


def normalize_channels(train: Sequence[WindowSample], *others: Sequence[WindowSample]):
    """Z-score the case-count channel with training-split statistics.

    Returns ``(train, others, norm)`` where ``norm`` is ``None`` if the
    samples carry no case channel.  The breach-fraction channel is untouched.
    """
    if not train:
        raise DatasetError("cannot normalise against an empty training split")
    if train[0].temporal.shape[1] < 2:
        return list(train), [list(o) for o in others], None
    vals = np.concatenate([s.temporal[:, 1] for s in train])
    mean, std = float(vals.mean()), float(vals.std())
    if std == 0.0:
        warnings.warn("case-count channel has zero variance in the training split; centring only")
        norm = ChannelNorm(mean, 0.0, centered_only=True)
    else:
        norm = ChannelNorm(mean, std)

    def tx(group):
        res = []
        for s in group:
            t = s.temporal.copy()
            t[:, 1] = norm.apply(t[:, 1])
            res.append(dataclasses.replace(s, temporal=t))
        return res

    return tx(train), [tx(o) for o in others], norm


def stack(samples: Sequence[WindowSample]):
    """Samples as arrays ``(temporal [B, L, C], static [B, S], labels [B])``."""
    X = np.stack([s.temporal for s in samples])
    S = np.stack([s.static for s in samples]) if samples else np.zeros((0, 0))
    y = np.array([s.label for s in samples], dtype=np.float64)
    return X, S, y


# -- files --------------------------------------------------------------------


def _parse_date(s: str) -> dt.date:
    return dt.date.fromisoformat(s.strip())


def _read_rows(path: Path, header: list[str]) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != header:
            raise DatasetError(f"{path}: expected header {','.join(header)}, got {reader.fieldnames}")
        return list(reader)


def read_waits(path: Path) -> list[HourlyWaitRecord]:
    out = []
    for i, row in enumerate(_read_rows(path, WAITS_HEADER), start=2):
        try:
            b = int(row["breached"])
            if b not in (0, 1):
                raise ValueError(b)
            out.append(HourlyWaitRecord(_parse_date(row["date"]), int(row["hour"]), bool(b)))
        except (ValueError, TypeError) as e:
            raise DatasetError(f"{path}:{i}: bad row {row}: {e}") from None
    return out


def read_cases(path: Path) -> CaseCountSeries:
    rows = _read_rows(path, CASES_HEADER)
    pairs = sorted((_parse_date(r["date"]), int(r["count"])) for r in rows)
    return CaseCountSeries(
        np.array([np.datetime64(d, "D") for d, _ in pairs], dtype="datetime64[D]"),
        np.array([c for _, c in pairs], dtype=np.float64),
    )


def read_static_raw(path: Path) -> dict[str, tuple[str, list[str], list[float]]]:
    """feature -> (level, response levels, values); an empty response level marks a continuous feature."""
    feats: dict[str, tuple[str, list[str], list[float]]] = {}
    for i, row in enumerate(_read_rows(path, STATIC_HEADER), start=2):
        name, level = row["feature"].strip(), row["level"].strip()
        lvl, resp, vals = feats.setdefault(name, (level, [], []))
        if lvl != level:
            raise DatasetError(f"{path}:{i}: feature {name!r} listed under two levels")
        resp.append(row["response_level"].strip())
        vals.append(float(row["value"]))
    return feats


def read_periods(path: Path) -> list[PeriodSpec]:
    ps = [PeriodSpec(r["name"].strip(), _parse_date(r["start"]), _parse_date(r["end"])) for r in _read_rows(path, PERIODS_HEADER)]
    check_periods(ps)
    return ps


def profiles_from_raw(raw: dict[str, dict[str, tuple[str, list[str], list[float]]]]) -> dict[str, StaticProfile]:
    """Build profiles for all catchments, min-max scaling continuous features over the whole table."""
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    for feats in raw.values():
        for name, (_, resp, vals) in feats.items():
            if resp == [""]:
                lo[name] = min(lo.get(name, vals[0]), vals[0])
                hi[name] = max(hi.get(name, vals[0]), vals[0])
    out = {}
    for cname, feats in raw.items():
        fs = []
        for name, (level, resp, vals) in feats.items():
            if resp == [""]:
                span = hi[name] - lo[name]
                v = (vals[0] - lo[name]) / span if span > 0 else 0.0
                fs.append(StaticFeature(name, level, (v,)))
            else:
                fs.append(StaticFeature(name, level, tuple(vals), tuple(resp)))
        out[cname] = StaticProfile(fs)
    return out


@dataclass
class Catchment:
    name: str
    boarding: DailyBoardingSeries
    cases: CaseCountSeries
    profile: StaticProfile


@dataclass
class Dataset:
    catchments: dict[str, Catchment]
    periods: list[PeriodSpec]
    skips: SkipReport = field(default_factory=SkipReport)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.catchments):
            c = self.catchments[name]
            h.update(name.encode())
            for arr in (c.boarding.dates.astype(np.int64), c.boarding.values, c.cases.dates.astype(np.int64), c.cases.values, c.profile.flatten()):
                h.update(np.ascontiguousarray(arr).tobytes())
        for p in self.periods:
            h.update(f"{p.name}|{p.start}|{p.end}".encode())
        return h.hexdigest()

    def windows(
        self, rule: LabelRule, input_length: int = DEFAULT_INPUT_LENGTH, report: SkipReport | None = None
    ) -> dict[str, list[WindowSample]]:
        """Windows of every catchment, bucketed by period and sorted by (anchor, catchment)."""
        buckets: dict[str, list[WindowSample]] = {p.name: [] for p in self.periods}
        for name in sorted(self.catchments):
            c = self.catchments[name]
            ws = build_windows(c.boarding, c.cases, c.profile, input_length, rule, report, name)
            for k, v in split_by_period(ws, self.periods, report).items():
                buckets[k].extend(v)
        for v in buckets.values():
            v.sort(key=lambda s: (s.anchor_date, s.catchment))
        return buckets


def catchment_dirs(root: Path) -> dict[str, Path]:
    root = Path(root)
    if (root / "waits.csv").exists():
        return {"default": root}
    dirs = {p.name: p for p in sorted(root.iterdir()) if p.is_dir() and (p / "waits.csv").exists()}
    if not dirs:
        raise DatasetError(f"{root}: no waits.csv found at top level or in any subdirectory")
    return dirs


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    periods_path = root / "periods.csv"
    if not periods_path.exists():
        raise DatasetError(f"{periods_path} not found")
    periods = read_periods(periods_path)
    skips = SkipReport()
    boards, cases, raw = {}, {}, {}
    for name, d in catchment_dirs(root).items():
        boards[name] = compute_daily_breach_fraction(read_waits(d / "waits.csv"), skips, name)
        cases[name] = read_cases(d / "cases.csv")
        raw[name] = read_static_raw(d / "static.csv")
    profiles = profiles_from_raw(raw)
    cats = {n: Catchment(n, boards[n], cases[n], profiles[n]) for n in boards}
    return Dataset(cats, periods, skips)
