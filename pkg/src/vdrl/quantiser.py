"""Scalar and Schmitt-trigger quantisation, margin penalty and mu-law companding.

Quantised values live on the grid {-k, ..., k} / k. Rounding is half away
from zero everywhere so results do not depend on the platform's tie rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

MU = 255


@dataclass(frozen=True)
class QuantiserConfig:
    k: int = 7
    margin: float | None = None  # None -> 1/k
    boundary: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be a positive integer")
        if self.margin is not None and self.margin < 0:
            raise ValueError("margin must be non-negative")

    @property
    def m(self) -> float:
        return 1.0 / self.k if self.margin is None else self.margin


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _finite(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("quantiser input contains NaN or Inf")
    return z


def scalar_levels(z, k: int, boundary: float = 1.0) -> np.ndarray:
    """Memoryless quantisation to integer levels in [-k, k]."""
    z = _finite(z)
    top = int(np.floor(boundary * k + 1e-9))
    return np.clip(round_half_away(k * z), -top, top).astype(np.int64)


def scalar_quantise(z, k: int, boundary: float = 1.0) -> np.ndarray:
    return scalar_levels(z, k, boundary) / k


def stq_levels(z, cfg: QuantiserConfig) -> np.ndarray:
    """Schmitt-trigger quantisation along axis -2 (time) of a (..., T, C) array.

    The held level only moves once the input strays more than ``cfg.m`` from
    it; the first step is quantised without memory.
    """
    z = _finite(z)
    if z.ndim == 1:
        return stq_levels(z[:, None], cfg)[:, 0]
    rounded = scalar_levels(z, cfg.k, cfg.boundary)
    out = np.empty_like(rounded)
    held = rounded[..., 0, :]
    out[..., 0, :] = held
    for t in range(1, z.shape[-2]):
        jump = np.abs(held / cfg.k - z[..., t, :]) > cfg.m
        held = np.where(jump, rounded[..., t, :], held)
        out[..., t, :] = held
    return out


def stq(z, cfg: QuantiserConfig) -> np.ndarray:
    return stq_levels(z, cfg) / cfg.k


def straight_through(z: torch.Tensor, quantised: torch.Tensor) -> torch.Tensor:
    """Forward value ``quantised``; gradient passes to ``z`` unchanged."""
    return z + (quantised - z).detach()


def stq_torch(z: torch.Tensor, cfg: QuantiserConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """STQ on a (B, T, C) tensor with straight-through gradients.

    Returns the quantised values (differentiable w.r.t. ``z``) and the integer
    levels.
    """
    levels = torch.from_numpy(stq_levels(z.detach().cpu().double().numpy(), cfg)).to(z.device)
    return straight_through(z, (levels.to(z.dtype) / cfg.k)), levels


def margin_penalty(z) -> float:
    z = _finite(z)
    return float(np.sum(np.maximum(np.abs(z) - 1.0, 0.0) ** 2))


def margin_gradient(z) -> np.ndarray:
    z = _finite(z)
    return 2.0 * np.sign(z) * np.maximum(np.abs(z) - 1.0, 0.0)


def margin_penalty_torch(z: torch.Tensor) -> torch.Tensor:
    """Per-example margin penalty of a (B, T, C) tensor, in float64."""
    excess = torch.clamp(z.double().abs() - 1.0, min=0.0)
    return (excess ** 2).sum(dim=(-2, -1))


# -- mu-law ---------------------------------------------------------------------------------------

def mu_law_compand(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(MU * np.abs(x)) / np.log1p(MU)


def mu_law_expand(y):
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(MU)) / MU


def mu_law_encode(x) -> np.ndarray:
    """Map samples in [-1, 1] to 8-bit codes 0..255 (0 maps to 128)."""
    x = np.asarray(x, dtype=np.float64)
    if (np.abs(x) > 1.0).any() or not np.isfinite(x).all():
        raise ValueError("mu-law input must lie in [-1, 1]")
    return np.floor((mu_law_compand(x) + 1.0) / 2.0 * MU + 0.5).astype(np.int64)


def mu_law_decode(code) -> np.ndarray:
    code = np.asarray(code)
    return mu_law_expand(code / MU * 2.0 - 1.0)


def mu_law_bin_width(x) -> np.ndarray:
    """Width, in signal units, of the mu-law bin containing ``x``."""
    code = mu_law_encode(x)
    lo = mu_law_expand(np.maximum(code - 0.5, 0) / MU * 2.0 - 1.0)
    hi = mu_law_expand(np.minimum(code + 0.5, MU) / MU * 2.0 - 1.0)
    return hi - lo
