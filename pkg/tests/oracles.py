"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np


def pair_count_auc(scores, labels) -> float | None:
    """O(n^2) Mann-Whitney count with half credit for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = 0
    ties = 0
    for p in pos:
        wins += int(np.count_nonzero(p > neg))
        ties += int(np.count_nonzero(p == neg))
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def random_auc_instance(rng: np.random.Generator, n_max: int = 1000):
    """Scores and labels with both classes present; about half the instances are tie-heavy."""
    n = int(rng.integers(2, n_max + 1))
    if rng.random() < 0.5:
        scores = rng.integers(0, int(rng.integers(1, 6)), size=n).astype(np.float64) / 4
    else:
        scores = rng.normal(size=n)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    return scores, labels
