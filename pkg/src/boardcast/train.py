"""Chronological splitting, weighted BCE + Adam training with early stopping on validation AUC."""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .dataset import WindowSample, stack
from .metrics import auc, write_csv
from .model import HybridModel

log = logging.getLogger(__name__)

CURVE_HEADER = ["epoch", "train_loss", "val_auc"]
P_CLAMP = 1e-12


class SplitError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 10
    split_fraction: float = 0.8
    seed: int = 0
    freeze_mask: frozenset[str] = frozenset()
    imbalance_ratio: float = 3.0

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie strictly between 0 and 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs_max < 0:
            raise ValueError("batch_size must be >= 1 and epochs_max >= 0")
        object.__setattr__(self, "freeze_mask", frozenset(self.freeze_mask))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["freeze_mask"] = sorted(self.freeze_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "freeze_mask" in d:
            d["freeze_mask"] = frozenset(d["freeze_mask"])
        return cls(**d)


def split_chronological(samples: Sequence[WindowSample], fraction: float):
    """Train/validation split by anchor date with a purge gap.

    The last ``round((1 - fraction) * n_dates)`` anchor dates go to
    validation.  Training keeps only samples whose label date precedes the
    first day of every validation input window.
    """
    if not samples:
        raise SplitError("no samples to split")
    dates = sorted({s.anchor_date for s in samples})
    n_val = int(round((1.0 - fraction) * len(dates)))
    if n_val < 1:
        raise SplitError(f"validation split empty: {len(dates)} anchor dates at fraction {fraction}")
    val_start = dates[-n_val]
    val = [s for s in samples if s.anchor_date >= val_start]
    first_input = min(s.input_start for s in val)
    train = [s for s in samples if s.anchor_date < val_start and s.label_date < first_input]
    if not train:
        raise SplitError(
            f"training split empty after purging: validation starts {val_start}, "
            f"training label dates must precede {first_input}"
        )
    return train, val


def limit_budget(train: Sequence[WindowSample], days: int | None) -> list[WindowSample]:
    """Keep training samples anchored on the most recent ``days`` anchor dates."""
    if days is None:
        return list(train)
    dates = sorted({s.anchor_date for s in train})
    keep = set(dates[-days:])
    return [s for s in train if s.anchor_date in keep]


def bce_loss(probs, labels, pos_weight: float = 1.0) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), P_CLAMP, 1 - P_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"probabilities and labels differ in length ({p.size} vs {y.size})")
    w = np.where(y == 1, pos_weight, 1.0)
    return float(np.mean(-w * (y * np.log(p) + (1 - y) * np.log(1 - p))))


def class_weight(labels: np.ndarray, ratio: float) -> float:
    """Positive-class weight ``n_neg / n_pos`` once the class imbalance exceeds ``ratio``:1."""
    n_pos = float(np.sum(labels == 1))
    n_neg = float(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return 1.0
    if max(n_pos / n_neg, n_neg / n_pos) > ratio:
        return n_neg / n_pos
    return 1.0


class Adam:
    def __init__(self, layers: dict[str, nn.LayerParams], cfg: TrainConfig):
        self.layers = layers
        self.cfg = cfg
        self.t = 0
        self.m = {n: p.zeros_like() for n, p in layers.items() if n not in cfg.freeze_mask}
        self.v = {n: p.zeros_like() for n, p in layers.items() if n not in cfg.freeze_mask}

    def step(self, grads: dict[str, dict[str, np.ndarray]]):
        c = self.cfg
        self.t += 1
        corr1 = 1 - c.beta1**self.t
        corr2 = 1 - c.beta2**self.t
        for name, m in self.m.items():
            v = self.v[name]
            p = self.layers[name].tensors
            for k, g in grads[name].items():
                m[k] *= c.beta1
                m[k] += (1 - c.beta1) * g
                v[k] *= c.beta2
                v[k] += (1 - c.beta2) * g * g
                p[k] -= c.learning_rate * (m[k] / corr1) / (np.sqrt(v[k] / corr2) + c.adam_eps)


def fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    data_fingerprint: str
    n_train: int
    n_val: int
    pos_weight: float
    criterion: str = "val_auc"
    train_loss: list[float] = field(default_factory=list)
    val_auc: list[float | None] = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, reports: Path, name: str):
        reports = Path(reports)
        reports.mkdir(parents=True, exist_ok=True)
        (reports / f"run_{name}.json").write_text(json.dumps(self.to_dict(), indent=1, default=str))
        rows = [[i + 1, l, a] for i, (l, a) in enumerate(zip(self.train_loss, self.val_auc))]
        write_csv(reports / f"curve_{name}.csv", CURVE_HEADER, rows)


def evaluate(model: HybridModel, samples: Sequence[WindowSample], batch: int = 4096) -> np.ndarray:
    X, S, _ = stack(samples)
    return predict_arrays(model, X, S, batch)


def predict_arrays(model: HybridModel, X, S, batch: int = 4096) -> np.ndarray:
    out = [model.predict(X[i : i + batch], S[i : i + batch]) for i in range(0, len(X), batch)]
    return np.concatenate(out) if out else np.zeros(0)


def train(
    model: HybridModel,
    train_set: Sequence[WindowSample],
    val_set: Sequence[WindowSample],
    config: TrainConfig = TrainConfig(),
    extra: dict | None = None,
):
    """Fit a copy of ``model``; returns ``(trained_model, RunManifest)``.

    Layers in ``config.freeze_mask`` get gradients but no updates.  The
    parameters from the epoch with the best validation AUC are restored.
    """
    if not train_set or not val_set:
        raise SplitError("training and validation sets must be non-empty")
    unknown = config.freeze_mask - set(model.layers)
    if unknown:
        raise ValueError(f"freeze_mask names unknown layers: {sorted(unknown)}")
    t0 = time.perf_counter()
    m = model.copy()
    X, S, y = stack(train_set)
    Xv, Sv, yv = stack(val_set)
    # shape errors surface here rather than mid-epoch
    m.predict(X[:1], S[:1])
    pw = class_weight(y, config.imbalance_ratio)
    w = np.where(y == 1, pw, 1.0)
    man = RunManifest(
        config=config.to_dict(),
        data_fingerprint=fingerprint(X, S, y, Xv, Sv, yv),
        n_train=len(y),
        n_val=len(yv),
        pos_weight=pw,
        extra=dict(extra or {}),
    )
    if config.epochs_max == 0:
        man.wall_time = time.perf_counter() - t0
        return m, man

    rng = np.random.default_rng(config.seed)
    opt = Adam(m.layers, config)
    n = len(y)
    best_score, best_layers, since = None, None, 0
    for epoch in range(1, config.epochs_max + 1):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            tape = nn.GradientTape()
            p = m.predict(X[idx], S[idx], tape)
            yb, wb = y[idx], w[idx]
            pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)
            total += float(np.sum(-wb * (yb * np.log(pc) + (1 - yb) * np.log(1 - pc))))
            grads = m.backward(tape, dlogit=wb * (p - yb) / len(idx))
            opt.step(grads)
        loss = total / n
        if not np.isfinite(loss):
            raise NumericError(
                f"non-finite training loss at epoch {epoch}; try a smaller learning rate "
                f"(currently {config.learning_rate})"
            )
        pv = predict_arrays(m, Xv, Sv)
        res = auc(pv, yv)
        if res.defined:
            score = res.auc
        else:
            man.criterion = "neg_val_loss"
            score = -bce_loss(pv, yv)
        man.train_loss.append(loss)
        man.val_auc.append(res.auc)
        man.stop_epoch = epoch
        if best_score is None or score > best_score:
            best_score, since, man.best_epoch = score, 0, epoch
            best_layers = {k: v.copy() for k, v in m.layers.items()}
        else:
            since += 1
            if since >= config.early_stop_patience:
                break
    m.layers = best_layers
    man.wall_time = time.perf_counter() - t0
    m.manifest = {**m.manifest, "train": {"seed": config.seed, "best_epoch": man.best_epoch, **man.extra}}
    return m, man
