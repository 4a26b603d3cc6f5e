"""Correlations, jump histograms, barcodes and bit-rate accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .codec import DenseCodes, EventSequence


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    return float(np.clip((dx @ dy) / math.sqrt((dx @ dx) * (dy @ dy)), -1.0, 1.0))


def correlation(xs, ys) -> tuple[float, float]:
    """Pearson and Spearman (average ranks for ties) correlation coefficients."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("inputs must be 1-D and of equal length")
    if len(x) < 2:
        raise ValueError("need at least two points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("correlation is undefined for a constant input")
    return _pearson(x, y), _pearson(rankdata(x), rankdata(y))


def jump_histogram(codes: DenseCodes) -> np.ndarray:
    """Counts of nonzero |level change| per channel step; index i holds jumps of size i + 1."""
    levels = codes.levels
    if levels.shape[0] < 2:
        raise ValueError("need at least two time steps")
    jumps = np.abs(np.diff(levels, axis=0)).ravel()
    return np.bincount(jumps[jumps > 0] - 1, minlength=2 * codes.k)[:2 * codes.k]


def barcode(events: EventSequence, bin_width_s: float, duration_s: float | None = None) -> np.ndarray:
    """Events per time bin, each attributed to the bin holding its start time."""
    if bin_width_s <= 0:
        raise ValueError("bin width must be positive")
    offsets = events.with_structure().offsets
    times = offsets / events.base_rate_hz
    end = duration_s if duration_s is not None else (times.max() + 1e-12 if len(times) else 0.0)
    n_bins = max(1, math.ceil(end / bin_width_s))
    idx = np.minimum((times / bin_width_s).astype(np.int64), n_bins - 1)
    return np.bincount(idx, minlength=n_bins)


# -- bit rates ------------------------------------------------------------------------------------

def pcm_bps(sample_rate_hz: float, bits_per_sample: int, channels: int = 1) -> float:
    return float(sample_rate_hz * bits_per_sample * channels)


def bits_per_event(k: int, max_run_length: int) -> float:
    return math.log2(2 * k + 1) + math.log2(max_run_length)


def event_code_bps(events_per_s: float, k: int = 7, max_run_length: int = 256) -> float:
    """Raw rate of an event stream coded with uniform value and length symbols."""
    return events_per_s * bits_per_event(k, max_run_length)


def reference_bit_rates() -> dict[str, float]:
    return {
        "pcm_16bit_24khz": pcm_bps(24_000, 16),
        "pcm_8bit_24khz": pcm_bps(24_000, 8),
        "events_75hz_k7_run256": event_code_bps(75.0, 7, 256),
    }


@dataclass
class MetricsReport:
    pearson: float | None
    spearman: float | None
    jump_histogram: list[int]
    event_density: list[int]
    bit_rates: dict[str, float] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"pearson": self.pearson, "spearman": self.spearman, "jump_histogram": self.jump_histogram,
                "event_density": self.event_density, "bit_rates": self.bit_rates, **self.extras}
