"""Slowness penalties on the continuous code sequence z (T x C).

All three variants are normalised by (T - 1) * C. The group-sparse variant
squares the sum of per-step group norms before normalising; pass
``squared=False`` for the unsquared alternative.
"""

from __future__ import annotations

import enum

import numpy as np
import torch


class PenaltyKind(str, enum.Enum):
    L2 = "l2"
    L1 = "l1"
    GROUP_SPARSE = "gs"

    @classmethod
    def parse(cls, name) -> "PenaltyKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"group_sparse": "gs", "groupsparse": "gs"}
        return cls(aliases.get(key, key))


def _as_grid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] < 2:
        raise ValueError("slowness needs at least two time steps")
    return z


def slowness_penalty(z, kind=PenaltyKind.GROUP_SPARSE, squared: bool = True) -> float:
    z = _as_grid(z)
    kind = PenaltyKind.parse(kind)
    steps, channels = z.shape
    diff = np.diff(z, axis=0)
    norm = (steps - 1) * channels
    if kind is PenaltyKind.L2:
        return float(np.sum(diff ** 2) / norm)
    if kind is PenaltyKind.L1:
        return float(np.sum(np.abs(diff)) / norm)
    total = np.sum(np.sqrt(np.sum(diff ** 2, axis=1)))
    return float((total ** 2 if squared else total) / norm)


def slowness_gradient(z, kind=PenaltyKind.GROUP_SPARSE, squared: bool = True) -> np.ndarray:
    """Analytic (sub)gradient of :func:`slowness_penalty`, shaped like ``z``.

    Where |.| or the group norm is zero the subgradient 0 is used.
    """
    z_in = np.asarray(z, dtype=np.float64)
    z = _as_grid(z_in)
    kind = PenaltyKind.parse(kind)
    steps, channels = z.shape
    diff = np.diff(z, axis=0)
    norm = (steps - 1) * channels
    if kind is PenaltyKind.L2:
        g_diff = 2.0 * diff / norm
    elif kind is PenaltyKind.L1:
        g_diff = np.sign(diff) / norm
    else:
        groups = np.sqrt(np.sum(diff ** 2, axis=1, keepdims=True))
        unit = np.divide(diff, groups, out=np.zeros_like(diff), where=groups > 0)
        scale = 2.0 * groups.sum() if squared else 1.0
        g_diff = scale * unit / norm
    grad = np.zeros_like(z)
    grad[1:] += g_diff
    grad[:-1] -= g_diff
    return grad.reshape(z_in.shape)


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def slowness_penalty_torch(z: torch.Tensor, kind=PenaltyKind.GROUP_SPARSE,
                           squared: bool = True) -> torch.Tensor:
    """Per-example penalty for a (B, T, C) tensor, computed in float64."""
    kind = PenaltyKind.parse(kind)
    z = z.double()
    steps, channels = z.shape[-2:]
    if steps < 2:
        raise ValueError("slowness needs at least two time steps")
    diff = z[..., 1:, :] - z[..., :-1, :]
    norm = (steps - 1) * channels
    if kind is PenaltyKind.L2:
        return (diff ** 2).sum(dim=(-2, -1)) / norm
    if kind is PenaltyKind.L1:
        return diff.abs().sum(dim=(-2, -1)) / norm
    total = _safe_sqrt((diff ** 2).sum(dim=-1)).sum(dim=-1)
    return (total ** 2 if squared else total) / norm
