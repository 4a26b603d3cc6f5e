"""PNG figures for the CLI report paths.

Uses the non-interactive Agg backend and strips PNG metadata so the same
inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_training(history: list[dict], target_rate_hz: float, band: tuple[float, float], path) -> Path:
    steps = np.array([r["step"] for r in history])
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    axes[0].plot(steps, [r["nll"] for r in history], lw=0.8)
    axes[0].set_ylabel("NLL (nats/step)")
    axes[1].semilogy(steps, [r["lambda"] for r in history], lw=0.8)
    axes[1].set_ylabel("lambda")
    axes[2].plot(steps, [r["aer"] for r in history], lw=0.6, label="batch AER")
    axes[2].axhline(target_rate_hz, color="k", lw=0.8)
    axes[2].axhspan(*band, color="k", alpha=0.1)
    axes[2].set_ylabel("events / s")
    axes[2].set_xlabel("step")
    fig.tight_layout()
    return _save(fig, path)


def plot_correlation(event_counts, change_points, pearson: float | None, spearman: float | None, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(change_points, event_counts, s=8, alpha=0.6)
    ax.set_xlabel("true change points per clip")
    ax.set_ylabel("events per clip")
    if pearson is not None:
        ax.set_title(f"Pearson {pearson:.3f}, Spearman {spearman:.3f}")
    fig.tight_layout()
    return _save(fig, path)


def plot_jump_histogram(counts, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(np.arange(1, len(counts) + 1), counts)
    ax.set_xlabel("|level jump|")
    ax.set_ylabel("count")
    fig.tight_layout()
    return _save(fig, path)


def plot_barcode(samples, sample_rate_hz: float, event_times, change_points, path) -> Path:
    t = np.arange(len(samples)) / sample_rate_hz
    fig, axes = plt.subplots(2, 1, figsize=(8, 3.5), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    axes[0].plot(t, samples, lw=0.4)
    for cp in change_points:
        axes[0].axvline(cp / sample_rate_hz, color="r", lw=0.6, alpha=0.6)
    axes[0].set_ylabel("signal")
    axes[1].vlines(event_times, 0, 1, lw=0.8)
    axes[1].set_yticks([])
    axes[1].set_xlabel("time (s)")
    fig.tight_layout()
    return _save(fig, path)


def plot_curves(curves: dict[str, list[dict]], path, key: str = "holdout_nll") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curve in curves.items():
        rows = [r for r in curve if key in r]
        ax.plot([r["step"] for r in rows], [r[key] for r in rows], label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(key.replace("_", " ") + " (nats/event)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
