"""Average event rate estimation and multiplicative slowness-weight control."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ControllerState:
    lambda_: float = 1e-6
    target_rate_hz: float = 75.0
    epsilon: float = 1e-2
    delta: float = 1e-3
    lambda_min: float = 1e-8
    lambda_max: float = 1e8

    def __post_init__(self):
        if self.epsilon <= 0 or self.delta <= 0:
            raise ValueError("epsilon and delta must be positive")
        if self.target_rate_hz <= 0:
            raise ValueError("target rate must be positive")
        if not 0 < self.lambda_min <= self.lambda_max:
            raise ValueError("invalid lambda caps")
        object.__setattr__(self, "lambda_", float(np.clip(self.lambda_, self.lambda_min, self.lambda_max)))

    @property
    def band(self) -> tuple[float, float]:
        return self.target_rate_hz / (1 + self.epsilon), self.target_rate_hz * (1 + self.epsilon)


def count_events(levels) -> np.ndarray:
    """Events per example: one initial event per channel plus every value change.

    ``levels`` is (T, C) or (B, T, C); returns an array of shape () or (B,).
    """
    levels = np.asarray(levels)
    if levels.ndim == 1:
        levels = levels[:, None]
    changes = (levels[..., 1:, :] != levels[..., :-1, :]).sum(axis=(-2, -1))
    return changes + levels.shape[-1]


def estimate_aer(levels, base_rate_hz: float) -> float:
    """Average event rate in Hz; batched input gives the batch mean."""
    levels = np.asarray(levels)
    if levels.ndim == 1:
        levels = levels[:, None]
    if levels.shape[-2] < 1:
        raise ValueError("need at least one time step")
    duration = levels.shape[-2] / base_rate_hz
    return float(np.mean(count_events(levels)) / duration)


def update_lambda(state: ControllerState, measured_rate: float) -> ControllerState:
    if measured_rate < 0:
        raise ValueError("measured rate must be non-negative")
    low, high = state.band
    lam = state.lambda_
    if measured_rate > high:
        lam = lam * (1 + state.delta)
    elif measured_rate < low:
        lam = lam / (1 + state.delta)
    return dataclasses.replace(state, lambda_=min(max(lam, state.lambda_min), state.lambda_max))


class TrajectoryLog:
    """Appends (step, lambda, aer) rows to a CSV file."""

    header = ("step", "lambda", "aer")

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.header)

    def append(self, step: int, lam: float, aer: float) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow((step, repr(float(lam)), repr(float(aer))))

    def read(self) -> list[tuple[int, float, float]]:
        with open(self.path, newline="") as f:
            rows = list(csv.reader(f))[1:]
        return [(int(s), float(lam), float(r)) for s, lam, r in rows]


def sign_flip_fraction(lambdas) -> float:
    """Fraction of consecutive nonzero lambda moves that reverse direction."""
    moves = np.sign(np.diff(np.log(np.asarray(lambdas, dtype=np.float64))))
    moves = moves[moves != 0]
    if len(moves) < 2:
        return 0.0
    return float(np.mean(moves[1:] != moves[:-1]))


def oscillation_fraction(lambdas) -> float:
    """Fraction of consecutive update pairs that move lambda in opposite directions.

    Unlike ``sign_flip_fraction``, a held update (no change) sits between
    its neighbours, so up-hold-down is not counted as a reversal.
    """
    moves = np.sign(np.diff(np.log(np.asarray(lambdas, dtype=np.float64))))
    if len(moves) < 2:
        return 0.0
    return float(np.mean(moves[1:] * moves[:-1] < 0))
