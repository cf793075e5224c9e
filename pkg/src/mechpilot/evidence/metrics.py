"""AUROC, bootstrap replicates and sigma-unit effect sizes."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class EmptyClass(ValueError):
    pass


class NonFiniteScore(ValueError):
    pass


class ZeroVariance(ValueError):
    """Bootstrap replicates have zero spread while the rate moved."""

    def __init__(self, delta: float, n_replicates: int):
        super().__init__(f"baseline replicates have zero variance (delta {delta})")
        self.delta = delta
        self.n_replicates = n_replicates


def auroc(positive_scores: Sequence[float], negative_scores: Sequence[float]) -> float:
    """Rank-sum AUROC; ties between classes count one half."""
    pos = np.asarray(positive_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(negative_scores, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise EmptyClass("auroc needs at least one score in each class")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise NonFiniteScore("auroc scores must be finite")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks for ties
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def bootstrap_means(outcomes: Sequence[bool] | np.ndarray, n_resamples: int, seed: int) -> np.ndarray:
    """Means of ``n_resamples`` with-replacement resamples of a 0/1 outcome vector."""
    x = np.asarray(outcomes, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot bootstrap an empty sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    return x[idx].mean(axis=1)


def effect_size(baseline_rates: Sequence[float], ablated_rate: float) -> float:
    """``|mean(baseline) - ablated| / sd(baseline)`` with the sample standard deviation."""
    rates = np.asarray(baseline_rates, dtype=np.float64)
    if rates.size < 2:
        raise ValueError("effect_size needs at least 2 baseline replicates")
    delta = abs(float(rates.mean()) - float(ablated_rate))
    sd = float(rates.std(ddof=1))
    if sd == 0.0:
        if delta == 0.0:
            return 0.0
        raise ZeroVariance(delta, int(rates.size))
    return delta / sd


def jeffreys_sd(successes: int, n: int) -> float:
    """Sampling sd of a rate under a Jeffreys-smoothed proportion; never zero."""
    p = (successes + 0.5) / (n + 1.0)
    return math.sqrt(p * (1.0 - p) / n)
