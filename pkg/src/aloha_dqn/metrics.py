"""Throughput, age-of-packet (AoP) and discard statistics over slot logs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsLog:
    """Slot-level record of one episode.

    All per-user arrays have shape ``(horizon, n_users)``. ``aop[k, n]`` is the
    age of the packet held by user ``n`` at the end of slot ``k`` (after the
    buffer update of that slot).
    """

    n_users: int
    total_arrival_rate: float
    horizon: int
    seed: int
    policy_id: str
    successes: np.ndarray
    aop: np.ndarray
    arrivals: np.ndarray
    discarded: np.ndarray
    feedback: np.ndarray
    extra: dict = field(default_factory=dict)

    @classmethod
    def allocate(cls, n_users, total_arrival_rate, horizon, seed, policy_id):
        shape = (horizon, n_users)
        return cls(
            n_users=n_users,
            total_arrival_rate=total_arrival_rate,
            horizon=horizon,
            seed=seed,
            policy_id=policy_id,
            successes=np.zeros(shape, dtype=np.uint8),
            aop=np.zeros(shape, dtype=np.int32),
            arrivals=np.zeros(shape, dtype=np.int16),
            discarded=np.zeros(shape, dtype=np.int16),
            feedback=np.zeros(horizon, dtype=np.uint8),
        )

    def check_shapes(self):
        shape = (self.horizon, self.n_users)
        for name in ("successes", "aop", "arrivals", "discarded"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.feedback.shape != (self.horizon,):
            raise ValueError("feedback must have one entry per slot")


def update_aop(w_prev: int, buffer_now: int) -> int:
    """One step of the AoP recursion: reset on an empty buffer, else +1."""
    if w_prev < 0:
        raise ValueError("AoP cannot be negative")
    return 0 if buffer_now == 0 else w_prev + 1


def throughput(log: MetricsLog) -> float:
    return float(log.successes.sum(dtype=np.int64)) / log.horizon


def per_user_throughput(log: MetricsLog) -> np.ndarray:
    return log.successes.sum(axis=0, dtype=np.int64) / log.horizon


def average_aop(log: MetricsLog) -> tuple[np.ndarray, float]:
    """Per-user time-averaged AoP and the system AoP.

    The system value is the *sum* of the per-user averages, not their mean;
    use ``per_user.mean()`` when a per-user scale is wanted. The sum is
    exactly rounded so that re-adding the stored per-user values reproduces it.
    """
    per_user = log.aop.sum(axis=0, dtype=np.int64) / log.horizon
    return per_user, math.fsum(per_user.tolist())


def discard_rate(log: MetricsLog) -> np.ndarray:
    """Discarded packets per slot, for each user."""
    return log.discarded.sum(axis=0, dtype=np.int64) / log.horizon


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile of an ascending array (``pct`` in [0, 100])."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("percentile of an empty series")
    if not 0 <= pct <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[rank - 1])


@dataclass(frozen=True)
class BoxStats:
    p25: float
    p50: float
    p75: float
    whisker_low: float
    whisker_high: float
    mean: float


def box_stats(series) -> BoxStats:
    """Quartiles (nearest rank) and 1.5-IQR whiskers clipped to the data."""
    values = np.sort(np.asarray(series).ravel())
    if values.size == 0:
        raise ValueError("percentile of an empty series")
    p25 = nearest_rank(values, 25)
    p50 = nearest_rank(values, 50)
    p75 = nearest_rank(values, 75)
    iqr = p75 - p25
    lo = values[np.searchsorted(values, p25 - 1.5 * iqr, side="left")]
    hi = values[np.searchsorted(values, p75 + 1.5 * iqr, side="right") - 1]
    return BoxStats(p25, p50, p75, float(lo), float(hi), float(values.mean()))


def percentile_stats(per_user_aop_series: np.ndarray) -> list[BoxStats]:
    """Box statistics for each column (user) of a ``(K, N)`` AoP array."""
    series = np.asarray(per_user_aop_series)
    if series.ndim == 1:
        series = series[:, None]
    return [box_stats(series[:, n]) for n in range(series.shape[1])]


def summarize(log: MetricsLog) -> dict:
    """Scalar summary of one episode, as written to ``summary.json``."""
    per_user, system = average_aop(log)
    discards = discard_rate(log)
    return {
        "policy": log.policy_id,
        "lambda": log.total_arrival_rate,
        "seed": log.seed,
        "n_users": log.n_users,
        "slots": log.horizon,
        "throughput": throughput(log),
        "system_aop": system,
        "per_user_aop": per_user.tolist(),
        "per_user_throughput": per_user_throughput(log).tolist(),
        "discard_rate": discards.tolist(),
        "mean_discard_rate": float(discards.mean()),
    }
