"""Lifetime distribution tracking and dynamic TTL thresholds.

Two power-of-two bucket histograms observe key lifetimes (ground-truth
lifetimes from compaction, elapsed ages from garbage collection).  From those
and a smoothed garbage-collection invalid ratio the engine derives three TTLs:

  default_ttl  - value files created by flush
  short_ttl    - files holding values predicted to die soon
  long_ttl     - files holding values predicted to live long

The percentage fed into each histogram quantile shrinks as the invalid ratio
rises, so heavy garbage pushes all TTLs toward zero and clean collections let
them grow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

EDWC_WINDOW_BASE = 19  # counter window i covers 2**(19+i) sequence units
EDWC_COUNT = 10


class EmptyJob(Exception):
    """A ratio update was attempted for a job that scanned nothing."""


def sigmoid(x: float) -> float:
    """Numerically stable logistic 1 / (1 + e^-x)."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class LifetimeParams:
    """Threshold-shaping constants (percent units for the *_pct fields)."""

    alpha_short: float = 10.0
    alpha_long: float = 10.0
    beta_low: float = 0.25
    beta_high: float = 0.75
    short_base_pct: float = 60.0
    short_extra_pct: float = 40.0
    long_base_pct: float = 80.0
    long_extra_pct: float = 20.0
    initial_default_ttl: int = 1 << 22
    ratio_ewma_weight: float = 0.3

    def validate(self) -> None:
        if not (0.0 < self.beta_low < self.beta_high < 1.0):
            raise ValueError("need 0 < beta_low < beta_high < 1")
        if self.short_base_pct + self.short_extra_pct > 100.0:
            raise ValueError("short percentages exceed 100")
        if self.long_base_pct + self.long_extra_pct > 100.0:
            raise ValueError("long percentages exceed 100")
        if self.initial_default_ttl <= 0:
            raise ValueError("initial_default_ttl must be positive")


@dataclass
class LifetimeThresholds:
    """Current TTLs (sequence units) plus the counter windows covering them."""

    default_ttl: int
    short_ttl: int
    long_ttl: int
    short_idx: int
    long_idx: int


class LifetimeHistogram:
    """64 power-of-two buckets; bucket b counts lifetimes in [2^b, 2^(b+1))."""

    __slots__ = ("buckets", "total")

    def __init__(self):
        self.buckets = [0] * 64
        self.total = 0

    def record(self, lifetime: int) -> None:
        b = max(lifetime, 1).bit_length() - 1
        if b > 63:
            b = 63
        self.buckets[b] += 1
        self.total += 1

    def quantile(self, percent: float, default: int) -> int:
        """Upper bound of the smallest bucket where the CDF reaches `percent`.

        Empty histogram falls back to `default`.
        """
        if self.total == 0:
            return default
        target = percent / 100.0 * self.total
        cum = 0
        for b, count in enumerate(self.buckets):
            cum += count
            if cum >= target:
                return 1 << (b + 1)
        return 1 << 64

    def reset(self) -> None:
        self.buckets = [0] * 64
        self.total = 0


class GcRatioTracker:
    """EWMA of per-job invalid fractions; starts at an uninformed 0.5."""

    __slots__ = ("invalid_ratio", "weight")

    def __init__(self, weight: float = 0.3):
        self.invalid_ratio = 0.5
        self.weight = weight

    @property
    def valid_ratio(self) -> float:
        return 1.0 - self.invalid_ratio

    def update(self, invalid_count: int, total_count: int) -> float:
        if total_count == 0:
            raise EmptyJob("gc job scanned no records")
        job = invalid_count / total_count
        self.invalid_ratio = (1.0 - self.weight) * self.invalid_ratio + self.weight * job
        return self.invalid_ratio


def compute_lifetime_point(hist: LifetimeHistogram, gc_ratio: float, alpha: float,
                           beta_low: float, beta_high: float, base_pct: float,
                           extra_pct: float, default: int) -> int:
    """Histogram quantile at a ratio-steered percentage.

    The base term keeps the point near zero when the invalid ratio is high;
    the extra term only kicks in once the ratio drops below 1 - beta_high.
    """
    p0 = base_pct * sigmoid(alpha * (1.0 - gc_ratio - beta_low))
    p1 = extra_pct * sigmoid(alpha * (1.0 - gc_ratio - beta_high))
    return hist.quantile(p0 + p1, default)


def compute_default_ttl(short_ttl: int, long_ttl: int, gc_ratio: float,
                        beta_high: float) -> int:
    """Interpolate between the short and long TTLs, leaning long when clean."""
    return int(short_ttl + (long_ttl - short_ttl) * sigmoid(1.0 - gc_ratio - beta_high))


def edwc_index_for(point: int) -> int:
    """Smallest counter window whose span covers `point`, clamped to the last."""
    for i in range(EDWC_COUNT):
        if (1 << (EDWC_WINDOW_BASE + i)) >= point:
            return i
    return EDWC_COUNT - 1


def compute_thresholds(h_short: LifetimeHistogram, h_long: LifetimeHistogram,
                       gc_ratio: float, params: LifetimeParams) -> LifetimeThresholds:
    """Recompute all three TTLs and window indices from current observations."""
    short_ttl = compute_lifetime_point(
        h_short, gc_ratio, params.alpha_short, params.beta_low, params.beta_high,
        params.short_base_pct, params.short_extra_pct, params.initial_default_ttl)
    long_ttl = compute_lifetime_point(
        h_long, gc_ratio, params.alpha_long, params.beta_low, params.beta_high,
        params.long_base_pct, params.long_extra_pct, params.initial_default_ttl)
    if short_ttl > long_ttl:
        short_ttl = long_ttl
    default_ttl = compute_default_ttl(short_ttl, long_ttl, gc_ratio, params.beta_high)
    s_idx = edwc_index_for(short_ttl)
    l_idx = edwc_index_for(long_ttl)
    if s_idx > l_idx:
        s_idx = l_idx
    return LifetimeThresholds(default_ttl, short_ttl, long_ttl, s_idx, l_idx)


def initial_thresholds(params: LifetimeParams) -> LifetimeThresholds:
    ttl = params.initial_default_ttl
    idx = edwc_index_for(ttl)
    return LifetimeThresholds(ttl, ttl, ttl, idx, idx)
