"""Synthetic district generator standing in for the proprietary ED data.

Each catchment has a fixed static profile.  Its daily breach propensity is
a logistic function of

* the lagged breach fraction (mean of the previous three days),
* the district case count averaged over lags 3 to 7 days, centred on its
  period mean,
* the catchment's static score, switched on per period by ``static_strength``,
* a persistent AR(1) daily shock.

Hourly breach indicators are Bernoulli draws around that propensity with a
hour-of-day cycle.  Case counts are Poisson per building, driven by
log-normal-shaped epidemic pulses, and summed to the district series.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from . import dataset as ds

CASE_LAGS = (3, 4, 5, 6, 7)
HISTORY_LAGS = 3
BURN_IN = 30


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthPeriod:
    name: str
    n_days: int
    baseline: float = 0.45  # breach probability at zero shock and mean covariates
    case_amplitude: float = 5.0  # scale of expected cases per building
    static_strength: float = 0.0  # multiplier on beta_static in this period
    n_pulses: int = 6  # district-wide waves
    outbreak_rate: float = 2.0  # local outbreaks per catchment per 100 days
    shock_scale: float = 1.0  # multiplier on shock_sd in this period


@dataclass(frozen=True)
class StaticSpec:
    name: str
    level: str
    n_levels: int = 0  # 0 marks a continuous feature


DEFAULT_SCHEMA = (
    StaticSpec("lift_absent", "building", 2),
    StaticSpec("flat_rooms", "building", 3),
    StaticSpec("building_age", "building"),
    StaticSpec("housing_type", "estate", 3),
    StaticSpec("resident_transiency", "estate"),
    StaticSpec("occupation", "tpu", 4),
    StaticSpec("rent_to_income", "tpu"),
)

# the static signal is planted in the most perturbed period only
DEFAULT_PERIODS = (
    SynthPeriod("waves-1-4", 200),
    SynthPeriod("between-4-and-5", 200, case_amplitude=10.0, static_strength=1.0),
    SynthPeriod("wave-5", 200),
)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_catchments: int = 24
    buildings_per_catchment: int = 8
    start: dt.date = dt.date(2020, 1, 23)
    periods: tuple[SynthPeriod, ...] = DEFAULT_PERIODS
    schema: tuple[StaticSpec, ...] = DEFAULT_SCHEMA
    dominant_feature: str | None = "resident_transiency"
    dominance: float = 3.0
    beta_history: float = 1.0
    beta_cases: float = 4.0
    beta_static: float = 2.0
    shock_persistence: float = 0.7
    shock_sd: float = 0.7
    shared_wave_weight: float = 2.0
    outbreak_days: tuple[float, float] = (4.0, 12.0)  # range of days from onset to peak
    case_reference: float = 10.0
    hour_amplitude: float = 1.0
    hour_sharpness: float = 3.0
    label_noise: float = 0.0
    missing_hour_rate: float = 0.0

    def __post_init__(self):
        if not self.periods or any(p.n_days <= 0 for p in self.periods):
            raise SynthConfigError("every period needs a positive number of days")
        if self.n_catchments < 1 or self.buildings_per_catchment < 1:
            raise SynthConfigError("need at least one catchment and one building")
        rates = [self.label_noise, self.missing_hour_rate, self.shock_persistence] + [p.baseline for p in self.periods]
        if any(not 0 <= r <= 1 for r in rates):
            raise SynthConfigError("rates must lie in [0, 1]")
        if any(not 0 < p.baseline < 1 for p in self.periods):
            raise SynthConfigError("period baselines must lie strictly inside (0, 1)")
        coefs = [self.beta_history, self.beta_cases, self.beta_static, self.dominance, self.shock_sd]
        if not np.all(np.isfinite(coefs)):
            raise SynthConfigError("coupling coefficients must be finite")
        if any(not (np.isfinite(p.shock_scale) and p.shock_scale >= 0) for p in self.periods):
            raise SynthConfigError("period shock_scale must be finite and nonnegative")
        names = [s.name for s in self.schema]
        if len(set(names)) != len(names):
            raise SynthConfigError("static feature names must be unique")
        if self.dominant_feature is not None and self.dominant_feature not in names:
            raise SynthConfigError(f"dominant feature {self.dominant_feature!r} not in schema")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["start"] = self.start.isoformat()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "start" in d and isinstance(d["start"], str):
            d["start"] = dt.date.fromisoformat(d["start"])
        if "periods" in d:
            d["periods"] = tuple(SynthPeriod(**p) for p in d["periods"])
        if "schema" in d:
            d["schema"] = tuple(StaticSpec(**s) for s in d["schema"])
        if "outbreak_days" in d:
            d["outbreak_days"] = tuple(float(x) for x in d["outbreak_days"])
        return cls(**d)


@dataclass
class Coefficients:
    """Generative coefficients; ``static_weights`` is indexed by flattened static slot."""

    beta_history: float
    beta_cases: float
    beta_static: float
    static_weights: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.beta_history, self.beta_cases, self.beta_static], self.static_weights])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Coefficients":
        return cls(float(v[0]), float(v[1]), float(v[2]), np.asarray(v[3:], dtype=np.float64))


@dataclass
class SynthDataset:
    config: SynthConfig
    coefficients: Coefficients
    periods: list[ds.PeriodSpec]
    waits: dict[str, list[ds.HourlyWaitRecord]]
    cases: dict[str, ds.CaseCountSeries]
    static_raw: dict[str, dict[str, tuple[str, list[str], list[float]]]]
    scores: dict[str, float]
    truth: dict = field(default_factory=dict)

    def catchment_names(self) -> list[str]:
        return sorted(self.waits)

    def to_dataset(self) -> ds.Dataset:
        """In-memory equivalent of writing the files and loading them back."""
        skips = ds.SkipReport()
        profiles = ds.profiles_from_raw(self.static_raw)
        cats = {}
        for n in self.catchment_names():
            b = ds.compute_daily_breach_fraction(self.waits[n], skips, n)
            cats[n] = ds.Catchment(n, b, self.cases[n], profiles[n])
        return ds.Dataset(cats, list(self.periods), skips)

    def write(self, out: Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "periods.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ds.PERIODS_HEADER)
            for p in self.periods:
                w.writerow([p.name, p.start.isoformat(), p.end.isoformat()])
        for n in self.catchment_names():
            d = out / n
            d.mkdir(exist_ok=True)
            with open(d / "waits.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(ds.WAITS_HEADER)
                for r in self.waits[n]:
                    w.writerow([r.date.isoformat(), r.hour, int(r.breached)])
            with open(d / "cases.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(ds.CASES_HEADER)
                c = self.cases[n]
                for day, v in zip(c.dates, c.values):
                    w.writerow([day.item().isoformat(), int(v)])
            with open(d / "static.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(ds.STATIC_HEADER)
                for fname, (level, resp, vals) in self.static_raw[n].items():
                    for r, v in zip(resp, vals):
                        w.writerow([fname, level, r, repr(float(v))])
        (out / "ground_truth.json").write_text(json.dumps(self.truth, indent=1, sort_keys=True))


# -- helpers ------------------------------------------------------------------


def _period_specs(cfg: SynthConfig) -> list[ds.PeriodSpec]:
    out, day = [], cfg.start
    for p in cfg.periods:
        end = day + dt.timedelta(days=p.n_days - 1)
        out.append(ds.PeriodSpec(p.name, day, end))
        day = end + dt.timedelta(days=1)
    return out


def _slot_layout(schema) -> list[tuple[str, str, int]]:
    """(feature, level, width) in the flattening order used by StaticProfile."""
    ordered = sorted(schema, key=lambda s: (ds.LEVELS.index(s.level), s.name))
    return [(s.name, s.level, s.n_levels if s.n_levels else 1) for s in ordered]


def _draw_static(cfg: SynthConfig, rng: np.random.Generator):
    """Raw static tables for every catchment."""
    raw = {}
    for c in range(cfg.n_catchments):
        feats = {}
        for s in cfg.schema:
            if s.n_levels:
                k = int(rng.integers(s.n_levels))
                resp = [f"l{j}" for j in range(s.n_levels)]
                feats[s.name] = (s.level, resp, [1.0 if j == k else 0.0 for j in range(s.n_levels)])
            else:
                feats[s.name] = (s.level, [""], [float(np.round(rng.uniform(0, 100), 3))])
        raw[f"c{c:03d}"] = feats
    return raw


def draw_coefficients(cfg: SynthConfig, rng: np.random.Generator) -> Coefficients:
    """Static slot weights at unit scale, the dominant feature scaled by ``dominance``."""
    parts = []
    for name, _, width in _slot_layout(cfg.schema):
        w = rng.normal(scale=0.3, size=width)
        if name == cfg.dominant_feature:
            if width == 1:
                w = np.array([cfg.dominance])
            else:
                w = w + cfg.dominance * np.where(np.arange(width) % 2 == 0, 1.0, -1.0)
        parts.append(w)
    return Coefficients(cfg.beta_history, cfg.beta_cases, cfg.beta_static, np.concatenate(parts))


def fresh_coefficients(cfg: SynthConfig, rng: np.random.Generator) -> Coefficients:
    """Independent coefficient draw: scalars uniform on [0, 2x] of the configured value."""
    base = draw_coefficients(cfg, rng)
    perm = rng.permutation(base.static_weights.size)
    return Coefficients(
        float(rng.uniform(0, 2 * cfg.beta_history)),
        float(rng.uniform(0, 2 * cfg.beta_cases)),
        float(rng.uniform(0, 2 * cfg.beta_static)),
        base.static_weights[perm] * rng.choice([-1.0, 1.0], size=perm.size),
    )


def _pulse_curve(n_days: int, n_pulses: int, rng: np.random.Generator, scale=(10, 30)) -> np.ndarray:
    t = np.arange(n_days, dtype=np.float64)
    curve = np.zeros(n_days)
    # one onset per equal stratum of [-0.2, 0.8] x n_days keeps waves spread across the period
    edges = np.linspace(-0.2 * n_days, 0.8 * n_days, n_pulses + 1)
    for k in range(n_pulses):
        t0 = rng.uniform(edges[k], edges[k + 1])
        mu = np.log(rng.uniform(*scale))
        sig = rng.uniform(0.4, 0.7)
        x = t - t0 + 1
        on = x > 0
        shape = np.zeros(n_days)
        shape[on] = np.exp(-((np.log(x[on]) - mu) ** 2) / (2 * sig**2))
        curve += shape * rng.uniform(0.5, 1.0)
    return curve


# -- generation ---------------------------------------------------------------


def generate(config: SynthConfig, coefficients: Coefficients | None = None, noise_seed: int | None = None) -> SynthDataset:
    """Deterministic synthetic dataset.

    ``coefficients`` defaults to a draw from ``config.seed``; ``noise_seed``
    (default ``config.seed``) drives everything else except the static tables
    and building susceptibilities, which always come from ``config.seed``.
    """
    root = np.random.SeedSequence(config.seed)
    s_static, s_coef, s_build = root.spawn(3)
    rng_static = np.random.default_rng(s_static)
    coef = coefficients if coefficients is not None else draw_coefficients(config, np.random.default_rng(s_coef))
    noise_root = np.random.SeedSequence([config.seed if noise_seed is None else noise_seed, 1])
    rng = np.random.default_rng(noise_root)

    raw = _draw_static(config, rng_static)
    profiles = ds.profiles_from_raw(raw)
    names = sorted(raw)
    flat = np.stack([profiles[n].flatten() for n in names])
    if flat.shape[1] != coef.static_weights.size:
        raise SynthConfigError("coefficient vector does not match the static schema")
    raw_score = flat @ coef.static_weights
    sd = raw_score.std()
    score = (raw_score - raw_score.mean()) / (sd if sd > 0 else 1.0)

    periods = _period_specs(config)
    n_total = sum(p.n_days for p in config.periods)
    n_sim = BURN_IN + n_total
    period_idx = np.concatenate([[0] * BURN_IN] + [[i] * p.n_days for i, p in enumerate(config.periods)])
    alpha = np.array([logit(p.baseline) for p in config.periods])[period_idx]
    strength = np.array([p.static_strength for p in config.periods])[period_idx]

    # expected cases per building: period amplitude x (shared waves + local outbreaks)
    C = len(names)
    curve = np.zeros((C, n_sim))
    pos = BURN_IN
    for p in config.periods:
        shared = _pulse_curve(p.n_days, p.n_pulses, rng)
        for ci in range(C):
            n_local = rng.poisson(p.outbreak_rate * p.n_days / 100)
            local = _pulse_curve(p.n_days, n_local, rng, config.outbreak_days)
            curve[ci, pos : pos + p.n_days] = p.case_amplitude * (config.shared_wave_weight * shared + local)
        pos += p.n_days
    curve[:, :BURN_IN] = curve[:, BURN_IN : BURN_IN + 1]
    rng_b = np.random.default_rng(s_build)
    suscept = rng_b.lognormal(0.0, 0.5, size=(C, config.buildings_per_catchment))
    lam = curve[:, :, None] * suscept[:, None, :]
    per_building = rng.poisson(lam)
    district = per_building.sum(axis=2).astype(np.float64)  # [catchment, day]
    # the case term is linear in counts, one unit per (reference amplitude x buildings) cases
    scaled = district / (config.case_reference * config.buildings_per_catchment)
    lagged_cases = np.zeros_like(scaled)
    for lag in CASE_LAGS:
        lagged_cases[:, lag:] += scaled[:, :-lag] / len(CASE_LAGS)
    lagged_cases[:, : max(CASE_LAGS)] = scaled[:, : max(CASE_LAGS)]
    # centred per period so ``baseline`` is the propensity at the period's mean case load
    for i in range(len(config.periods)):
        sel = period_idx == i
        lagged_cases[:, sel] -= lagged_cases[:, sel & (np.arange(n_sim) >= BURN_IN)].mean()
    case_term = coef.beta_cases * lagged_cases

    hours = np.arange(24)
    hour_effect = config.hour_amplitude * np.sin(2 * np.pi * (hours - 8) / 24)
    rho = config.shock_persistence
    sig = config.shock_sd * np.array([p.shock_scale for p in config.periods])[period_idx]
    shock = rng.normal(scale=sig[0], size=C)
    frac = np.full((C, n_sim), 0.5)
    hourly = np.zeros((C, n_sim, 24), dtype=bool)
    z_all = np.zeros((C, n_sim))
    for d in range(n_sim):
        if d > 0:
            shock = rho * shock + np.sqrt(1 - rho * rho) * sig[d] * rng.normal(size=C)
        hist = frac[:, max(0, d - HISTORY_LAGS) : d].mean(axis=1) if d > 0 else np.full(C, 0.5)
        z = alpha[d] + coef.beta_history * (hist - 0.5) + case_term[:, d] + coef.beta_static * strength[d] * score + shock
        z_all[:, d] = z
        p = expit(config.hour_sharpness * (z[:, None] + hour_effect[None, :]))
        b = rng.random((C, 24)) < p
        if config.label_noise > 0:
            flip = rng.random((C, 24)) < config.label_noise
            b = b ^ flip
        hourly[:, d] = b
        frac[:, d] = b.mean(axis=1)

    missing = rng.random((C, n_sim, 24)) < config.missing_hour_rate if config.missing_hour_rate > 0 else None
    dates = [config.start + dt.timedelta(days=i) for i in range(n_total)]
    waits, cases = {}, {}
    for ci, n in enumerate(names):
        recs = []
        for di, day in enumerate(dates):
            row = hourly[ci, BURN_IN + di]
            for h in range(24):
                if missing is not None and missing[ci, BURN_IN + di, h]:
                    continue
                recs.append(ds.HourlyWaitRecord(day, h, bool(row[h])))
        waits[n] = recs
        cases[n] = ds.CaseCountSeries(
            np.array([np.datetime64(d, "D") for d in dates], dtype="datetime64[D]"), district[ci, BURN_IN:]
        )

    slot_names = profiles[names[0]].slot_names()
    truth = {
        "config": config.to_dict(),
        "noise_seed": config.seed if noise_seed is None else noise_seed,
        "coefficients": {
            "beta_history": coef.beta_history,
            "beta_cases": coef.beta_cases,
            "beta_static": coef.beta_static,
            "static_weights": dict(zip(slot_names, coef.static_weights.tolist())),
        },
        "catchment_scores": dict(zip(names, score.tolist())),
        "history_lags": HISTORY_LAGS,
        "case_lags": list(CASE_LAGS),
    }
    return SynthDataset(config, coef, periods, waits, cases, raw, dict(zip(names, score.tolist())), truth)


def make_related_pair(config: SynthConfig, relatedness: float):
    """Source and target datasets whose coefficients differ by ``1 - relatedness``.

    Target coefficients are ``r * source + (1 - r) * fresh`` with ``fresh`` an
    independent draw.  Both share the catchments' static tables; their noise
    streams differ.
    """
    if not 0 <= relatedness <= 1:
        raise SynthConfigError("relatedness must lie in [0, 1]")
    seq = np.random.SeedSequence([config.seed, 7])
    s_src, s_fresh = seq.spawn(2)
    src = draw_coefficients(config, np.random.default_rng(s_src))
    fresh = fresh_coefficients(config, np.random.default_rng(s_fresh))
    tgt = Coefficients.from_vector(relatedness * src.vector() + (1 - relatedness) * fresh.vector())
    source = generate(config, src, noise_seed=config.seed)
    target = generate(config, tgt, noise_seed=config.seed + 100_003)
    return source, target
