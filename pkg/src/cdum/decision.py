"""Treatment decisions from preference and interest scores, and quota composition."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .fic import CLAMP_HIGH, CLAMP_LOW


@dataclass(frozen=True)
class DecisionConfig:
    threshold: float = 0.0
    clamp_low: float = CLAMP_LOW
    clamp_high: float = CLAMP_HIGH

    def __post_init__(self):
        if not 0 < self.clamp_low < self.clamp_high:
            raise ConfigError("clamp bounds must satisfy 0 < low < high")


@dataclass(frozen=True)
class TreatmentDecision:
    enabled: np.ndarray
    scores: np.ndarray


def decision_scores(prefs: np.ndarray, interests: np.ndarray) -> np.ndarray:
    """``score_k = r_k * y_k - y_0`` for ``k = 1..K``; works row-wise on batches."""
    prefs = np.asarray(prefs, dtype=np.float64)
    interests = np.asarray(interests, dtype=np.float64)
    if prefs.shape[-1] != interests.shape[-1] + 1:
        raise DimensionError(
            f"preference scores need K+1 entries for K interest scores, got {prefs.shape[-1]} and "
            f"{interests.shape[-1]}"
        )
    return interests * prefs[..., 1:] - prefs[..., :1]


def assign_treatments(scores: np.ndarray, cfg: DecisionConfig = DecisionConfig()) -> TreatmentDecision:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite decision score")
    return TreatmentDecision(scores > cfg.threshold, scores)


def compose_shares(base: np.ndarray, deltas: np.ndarray, enabled: np.ndarray) -> np.ndarray:
    """Category exposure shares after applying every enabled treatment.

    Enabled categories get ``base + delta``; the mass left over is spread
    over the remaining categories in proportion to their base shares. When
    every category is enabled, or the boosted shares alone exceed the slate,
    the boosted shares are renormalized and the rest get nothing.
    """
    base = np.asarray(base, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    enabled = np.asarray(enabled, dtype=bool)
    squeeze = enabled.ndim == 1
    enabled = np.atleast_2d(enabled)
    boosted = base + deltas
    fixed = np.where(enabled, boosted, 0.0)
    remaining = 1.0 - fixed.sum(axis=1, keepdims=True)
    free_base = np.where(enabled, 0.0, base).sum(axis=1, keepdims=True)
    all_on = enabled.all(axis=1, keepdims=True) | (remaining < 0)
    spread = np.where(enabled, fixed, base * np.divide(remaining, free_base, out=np.zeros_like(remaining),
                                                       where=free_base > 0))
    if np.any(fixed < 0):
        raise ConfigError("quota composition produced a negative category share")
    renorm = fixed / np.maximum(fixed.sum(axis=1, keepdims=True), 1e-300)
    shares = np.where(all_on, renorm, spread)
    if np.any(shares < -1e-12):
        raise ConfigError("quota composition produced a negative category share")
    shares = np.maximum(shares, 0.0)
    return shares[0] if squeeze else shares


def validate_quotas(base: np.ndarray, deltas: np.ndarray) -> None:
    """Raise unless every subset of enabled treatments composes to valid shares."""
    base = np.asarray(base, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    k = base.size
    if deltas.size != k:
        raise ConfigError(f"need one quota delta per category ({k}), got {deltas.size}")
    if np.any(base < 0) or abs(base.sum() - 1.0) > 1e-9:
        raise ConfigError("base exposure shares must be non-negative and sum to 1")
    if np.any(base + deltas < 0):
        raise ConfigError("a quota delta drives its category share negative")
    for r in range(1, k + 1):
        for subset in combinations(range(k), r):
            mask = np.zeros(k, dtype=bool)
            mask[list(subset)] = True
            compose_shares(base, deltas, mask)


def quota_counts(shares: np.ndarray, slate_size: int) -> np.ndarray:
    """Integer per-category quotas summing to ``slate_size`` (largest remainder, ties to lower index)."""
    shares = np.atleast_2d(shares)
    raw = shares * slate_size
    counts = np.floor(raw + 1e-9).astype(np.int64)
    short = slate_size - counts.sum(axis=1)
    rem = raw - counts
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(shares.shape[1])[None, :].repeat(shares.shape[0], 0), axis=1)
    counts += rank < short[:, None]
    return counts
