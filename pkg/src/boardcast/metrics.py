"""AUC with Mann-Whitney tie handling, performance bands and breach distributions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import DailySeries

AUC_HEADER = ["cutoff", "horizon", "variant", "auc", "band", "n_pos", "n_neg"]
DISTRIBUTION_HEADER = ["period", "threshold", "proportion", "n_days"]

BANDS = ((0.90, "excellent"), (0.80, "good"), (0.70, "acceptable"))


@dataclass(frozen=True)
class AucResult:
    auc: float | None
    n_pos: int
    n_neg: int

    @property
    def defined(self) -> bool:
        return self.auc is not None

    @property
    def band(self) -> str | None:
        return band(self.auc) if self.auc is not None else None


def auc(scores: Sequence[float], labels: Sequence[int]) -> AucResult:
    """Probability that a random positive outscores a random negative, ties counting half.

    Computed from the rank sum of the positives using mid-ranks for ties.  The
    result is ``None`` (with counts) when either class is absent.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return AucResult(None, n_pos, n_neg)
    ranks = rankdata(s, method="average")
    # rank sums are half-integers, so u is exact in float64
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2
    return AucResult(u / (n_pos * n_neg), n_pos, n_neg)


def band(value: float) -> str:
    for lo, name in BANDS:
        if value >= lo:
            return name
    return "below"


def breach_distribution(series: DailySeries | np.ndarray, thresholds: Sequence[float]) -> list[float]:
    """Proportion of days whose breach fraction attains each threshold."""
    v = np.asarray(series.values if isinstance(series, DailySeries) else series, dtype=np.float64)
    if v.size == 0:
        raise ValueError("breach distribution of an empty series")
    return [float(np.count_nonzero(v >= t)) / v.size for t in thresholds]


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(x) for x in r])


def auc_row(cutoff: float, horizon: int, variant: str, res: AucResult) -> list:
    return [cutoff, horizon, variant, res.auc, res.band or "undefined", res.n_pos, res.n_neg]
