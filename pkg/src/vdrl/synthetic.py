"""Piecewise-stationary synthetic signals with known change points.

Each clip is a sequence of regimes. A regime is either silent (exact zeros)
or a mixture of one to three sinusoids plus Gaussian noise. Regime lengths
are a fixed minimum plus a geometric excess, so boundaries form a renewal
process whose statistics depend on the source class. Consecutive silent
regimes are indistinguishable and are merged; every other boundary is a
recorded change point, and index 0 always is one.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClassProfile:
    mean_regime_s: float
    min_regime_s: float
    silence_prob: float
    freq_range_hz: tuple[float, float]
    amp_range: tuple[float, float] = (0.2, 0.7)
    noise_range: tuple[float, float] = (0.005, 0.03)


DEFAULT_PROFILES = (
    ClassProfile(0.25, 0.06, 0.25, (40.0, 200.0)),
    ClassProfile(0.15, 0.04, 0.30, (80.0, 400.0)),
    ClassProfile(0.35, 0.08, 0.20, (30.0, 150.0)),
    ClassProfile(0.20, 0.05, 0.25, (60.0, 300.0)),
)


@dataclass
class SyntheticSignal:
    samples: np.ndarray
    true_change_points: np.ndarray
    class_id: int
    sample_rate_hz: int = 2000

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def profile_for(class_id: int, profiles=DEFAULT_PROFILES) -> ClassProfile:
    return profiles[class_id % len(profiles)]


def regime_params(profile: ClassProfile, sample_rate_hz: int) -> tuple[int, float]:
    """Minimum regime length in samples and the per-sample stop probability."""
    min_len = max(1, int(round(profile.min_regime_s * sample_rate_hz)))
    excess = max(profile.mean_regime_s * sample_rate_hz - min_len, 0.0)
    return min_len, 1.0 / (excess + 1.0)


def generate_synthetic(seed, duration_s: float, class_id: int, sample_rate_hz: int = 2000,
                       profiles=DEFAULT_PROFILES) -> SyntheticSignal:
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    profile = profile_for(class_id, profiles)
    n = int(round(duration_s * sample_rate_hz))
    min_len, p = regime_params(profile, sample_rate_hz)

    samples = np.zeros(n)
    change_points = []
    t = np.arange(n) / sample_rate_hz
    start, prev_silent = 0, None
    while start < n:
        length = min_len + int(rng.geometric(p)) - 1
        stop = min(start + length, n)
        silent = bool(rng.random() < profile.silence_prob)
        if not (silent and prev_silent):
            change_points.append(start)
        if not silent:
            span = t[start:stop]
            count = int(rng.integers(1, 4))
            freqs = rng.uniform(*profile.freq_range_hz, size=count)
            amps = rng.dirichlet(np.ones(count)) * rng.uniform(*profile.amp_range)
            phases = rng.uniform(0, 2 * np.pi, size=count)
            tone = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * span + phases[:, None])).sum(0)
            samples[start:stop] = tone + rng.normal(0.0, rng.uniform(*profile.noise_range), size=len(span))
        prev_silent = silent
        start = stop
    return SyntheticSignal(np.clip(samples, -1.0, 1.0), np.array(change_points, dtype=np.int64),
                           class_id, sample_rate_hz)


def make_corpus(seed: int, count: int, duration_s: float, num_classes: int = 4,
                sample_rate_hz: int = 2000, profiles=DEFAULT_PROFILES) -> list[SyntheticSignal]:
    """``count`` clips with classes cycling through ``range(num_classes)``."""
    return [
        generate_synthetic([seed, i], duration_s, i % num_classes, sample_rate_hz, profiles)
        for i in range(count)
    ]


def save_corpus(path, signals: list[SyntheticSignal]) -> None:
    """Write an ``.npz`` archive with fixed entry timestamps, so equal corpora give equal bytes."""
    cps = [s.true_change_points for s in signals]
    arrays = {
        "samples": np.stack([s.samples for s in signals]),
        "class_ids": np.array([s.class_id for s in signals], dtype=np.int64),
        "change_points": np.concatenate(cps) if cps else np.zeros(0, dtype=np.int64),
        "change_point_counts": np.array([len(c) for c in cps], dtype=np.int64),
        "sample_rate_hz": np.array(signals[0].sample_rate_hz if signals else 2000, dtype=np.int64),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as archive:
        for name, array in arrays.items():
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, array, allow_pickle=False)
            archive.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buffer.getvalue())


def load_corpus(path) -> list[SyntheticSignal]:
    with np.load(path) as data:
        bounds = np.concatenate([[0], np.cumsum(data["change_point_counts"])])
        rate = int(data["sample_rate_hz"])
        return [
            SyntheticSignal(data["samples"][i].copy(), data["change_points"][bounds[i]:bounds[i + 1]].copy(),
                            int(data["class_ids"][i]), rate)
            for i in range(len(data["class_ids"]))
        ]
