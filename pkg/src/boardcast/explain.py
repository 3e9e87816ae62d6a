"""Shapley attribution over static slots and temporal channels.

The value of a coalition S is the mean model output over a background set,
with the players in S taken from the explained sample and the rest from
each background instance.  Players the model cannot read are dropped from
the coalition key before lookup, so their marginal contributions are exactly
zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import write_csv

MAX_EXACT_PLAYERS = 15
BACKGROUND_SIZE = 32
SHAP_HEADER = ["player", "kind", "mean_abs_shap", "rank"]
CHANNEL_NAMES = ("breach_fraction", "case_count")
KINDS = ("static_slot", "temporal_channel", "temporal_day")


class ExplainError(ValueError):
    pass


@dataclass(frozen=True)
class AttributionPlayer:
    id: int
    kind: str
    name: str
    channel: int | None = None  # temporal players
    day: int | None = None  # per-day temporal players
    slot: int | None = None  # static players

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ExplainError(f"unknown player kind {self.kind!r}")


@dataclass
class Attribution:
    players: list[AttributionPlayer]
    shapley: np.ndarray
    base_value: float
    explained_output: float
    method: str
    residual: float = 0.0  # sampled mode: amount redistributed to enforce efficiency
    n_evaluations: int = 0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {p.name: float(v) for p, v in zip(self.players, self.shapley)}


def make_players(
    static_slot_names: Sequence[str],
    n_channels: int = 2,
    input_length: int = 7,
    per_day: bool = False,
    channel_names: Sequence[str] = CHANNEL_NAMES,
) -> list[AttributionPlayer]:
    """Temporal players first (whole channels, or channel x day), then one player per static slot."""
    out: list[AttributionPlayer] = []
    for c in range(n_channels):
        cname = channel_names[c] if c < len(channel_names) else f"channel{c}"
        if per_day:
            for d in range(input_length):
                out.append(AttributionPlayer(len(out), "temporal_day", f"{cname}[t-{input_length - 1 - d}]", c, d))
        else:
            out.append(AttributionPlayer(len(out), "temporal_channel", cname, c))
    for j, name in enumerate(static_slot_names):
        out.append(AttributionPlayer(len(out), "static_slot", name, slot=j))
    return out


def players_for(model, sample, per_day: bool = False, static_slot_names: Sequence[str] | None = None):
    temporal, static = _arrays(sample)
    if static_slot_names is None:
        static_slot_names = [f"static[{j}]" for j in range(static.size)]
    if len(static_slot_names) != static.size:
        raise ExplainError(f"{len(static_slot_names)} static slot names for {static.size} static inputs")
    return make_players(static_slot_names, temporal.shape[1], temporal.shape[0], per_day)


def _arrays(sample) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(sample, "temporal"):
        t, s = sample.temporal, sample.static
    else:
        t, s = sample
    return np.asarray(t, dtype=np.float64), np.asarray(s, dtype=np.float64).reshape(-1)


def _predict_fn(model) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    if hasattr(model, "predict"):
        return model.predict
    if callable(model):
        return lambda X, S: np.asarray(model(X, S), dtype=np.float64).reshape(-1)
    raise ExplainError("model must have a predict(X, S) method or be callable")


def _readable(model, player: AttributionPlayer) -> bool:
    """False only when the model provably ignores every input the player owns."""
    arch = getattr(model, "arch", None)
    if arch is None:
        return True
    if player.kind == "static_slot":
        return arch.has_static
    return player.channel < arch.channels


def _check_partition(players: Sequence[AttributionPlayer], temporal: np.ndarray, static: np.ndarray):
    L, C = temporal.shape
    owner_t = np.zeros((L, C), dtype=int)
    owner_s = np.zeros(static.size, dtype=int)
    for p in players:
        if p.kind == "static_slot":
            if not 0 <= p.slot < static.size:
                raise ExplainError(f"player {p.name!r} points at static slot {p.slot} of {static.size}")
            owner_s[p.slot] += 1
        elif p.kind == "temporal_channel":
            if not 0 <= p.channel < C:
                raise ExplainError(f"player {p.name!r} points at channel {p.channel} of {C}")
            owner_t[:, p.channel] += 1
        else:
            if not (0 <= p.channel < C and 0 <= p.day < L):
                raise ExplainError(f"player {p.name!r} points outside the {L}x{C} temporal input")
            owner_t[p.day, p.channel] += 1
    if np.any(owner_t != 1) or np.any(owner_s != 1):
        raise ExplainError("players must partition the inputs: every scalar owned by exactly one player")


class ValueFunction:
    """Memoized interventional value function keyed by coalition bitmask."""

    def __init__(self, model, sample, background, players: Sequence[AttributionPlayer]):
        if len(background) == 0:
            raise ExplainError("background set is empty")
        self.players = list(players)
        self.f = _predict_fn(model)
        self.x_t, self.x_s = _arrays(sample)
        bg = [_arrays(b) for b in background]
        self.bg_t = np.stack([b[0] for b in bg])
        self.bg_s = np.stack([b[1] for b in bg])
        if self.bg_t.shape[1:] != self.x_t.shape or self.bg_s.shape[1:] != self.x_s.shape:
            raise ExplainError(
                f"background shapes {self.bg_t.shape[1:]}/{self.bg_s.shape[1:]} differ from sample "
                f"{self.x_t.shape}/{self.x_s.shape}"
            )
        _check_partition(self.players, self.x_t, self.x_s)
        self.readable_mask = sum(1 << i for i, p in enumerate(self.players) if _readable(model, p))
        self.cache: dict[int, float] = {}

    @property
    def n(self) -> int:
        return len(self.players)

    def __call__(self, mask: int) -> float:
        key = mask & self.readable_mask
        v = self.cache.get(key)
        if v is None:
            v = self._evaluate(key)
            self.cache[key] = v
        return v

    def _evaluate(self, mask: int) -> float:
        T = self.bg_t.copy()
        S = self.bg_s.copy()
        for i, p in enumerate(self.players):
            if not mask >> i & 1:
                continue
            if p.kind == "static_slot":
                S[:, p.slot] = self.x_s[p.slot]
            elif p.kind == "temporal_channel":
                T[:, :, p.channel] = self.x_t[:, p.channel]
            else:
                T[:, p.day, p.channel] = self.x_t[p.day, p.channel]
        return float(np.mean(self.f(T, S)))

    def output(self) -> float:
        return float(self.f(self.x_t[None], self.x_s[None])[0])


def exact_shapley(model, sample, background, players: Sequence[AttributionPlayer]) -> Attribution:
    """Shapley values by enumerating all 2^n coalitions; refuses above 15 players."""
    n = len(players)
    if n > MAX_EXACT_PLAYERS:
        raise ExplainError(
            f"exact Shapley over {n} players needs 2^{n} coalitions; the limit is {MAX_EXACT_PLAYERS}. "
            "Use sampled_shapley instead."
        )
    if n == 0:
        raise ExplainError("no players")
    v = ValueFunction(model, sample, background, players)
    masks = np.arange(1 << n)
    values = np.array([v(int(m)) for m in masks])
    sizes = np.array([bin(int(m)).count("1") for m in masks])
    weights = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = float(np.sum(weights[sizes[without]] * (values[without | bit] - values[without])))
    return Attribution(list(players), phi, v(0), v.output(), "exact", 0.0, len(v.cache))


def sampled_shapley(
    model,
    sample,
    background,
    players: Sequence[AttributionPlayer],
    n_permutations: int,
    seed: int,
) -> Attribution:
    """Permutation estimate; any efficiency residual is spread in proportion to |phi| and reported."""
    if n_permutations < 1:
        raise ExplainError("n_permutations must be >= 1")
    n = len(players)
    if n == 0:
        raise ExplainError("no players")
    v = ValueFunction(model, sample, background, players)
    rng = np.random.default_rng(seed)
    phi = np.zeros(n)
    empty = v(0)
    for _ in range(n_permutations):
        mask, prev = 0, empty
        for i in rng.permutation(n):
            mask |= 1 << int(i)
            cur = v(mask)
            phi[i] += cur - prev
            prev = cur
    phi /= n_permutations
    out = v.output()
    residual = out - empty - float(phi.sum())
    if residual != 0.0:
        mag = np.abs(phi)
        share = mag / mag.sum() if mag.sum() > 0 else np.full(n, 1.0 / n)
        phi = phi + residual * share
    return Attribution(list(players), phi, empty, out, "sampled", residual, len(v.cache), {"n_permutations": n_permutations, "seed": seed})


def draw_background(samples: Sequence, seed: int, size: int = BACKGROUND_SIZE) -> list:
    """Deterministic subset of ``size`` samples (all of them if fewer), kept in input order."""
    if not samples:
        raise ExplainError("cannot draw a background from an empty set")
    if len(samples) <= size:
        return list(samples)
    idx = np.sort(np.random.default_rng(seed).choice(len(samples), size=size, replace=False))
    return [samples[i] for i in idx]


@dataclass(frozen=True)
class RankedPlayer:
    name: str
    kind: str
    mean_abs_shap: float
    rank: int


def rank_features(attributions: Sequence[Attribution], k: int) -> list[RankedPlayer]:
    """Top ``k`` players by mean |phi|; ties go to the lexicographically smaller name."""
    if not attributions:
        raise ExplainError("no attributions to rank")
    if k < 1:
        raise ExplainError("k must be >= 1")
    names = [p.name for p in attributions[0].players]
    kinds = {p.name: p.kind for p in attributions[0].players}
    for a in attributions[1:]:
        if [p.name for p in a.players] != names:
            raise ExplainError("attributions disagree on the player set")
    mean_abs = np.mean(np.abs(np.stack([a.shapley for a in attributions])), axis=0)
    order = sorted(range(len(names)), key=lambda i: (-mean_abs[i], names[i]))
    return [RankedPlayer(names[i], kinds[names[i]], float(mean_abs[i]), r + 1) for r, i in enumerate(order[:k])]


def write_ranking(path: Path, ranking: Sequence[RankedPlayer]) -> None:
    write_csv(path, SHAP_HEADER, [[r.name, r.kind, r.mean_abs_shap, r.rank] for r in ranking])
