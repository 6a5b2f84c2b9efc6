#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

"""Figure files: daily mean curves, inter-arrival histogram, anomaly-map panels, score timelines."""

from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from core import DaySequence, Label, atomic_write_bytes  # noqa: E402

logger = logging.getLogger("forecastad.plots")


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    fig.savefig(buf, format=path.suffix.lstrip(".") or "png", dpi=120, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    logger.info("Wrote %s", path)
    return path


def plot_daily_means(days: Sequence[DaySequence], path: str | Path, max_days: int = 12) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for day in list(days)[:max_days]:
        if not len(day):
            continue
        hours = (day.timestamps - day.t0) / 3600.0
        means = [s.frame.mean() for s in day.samples]
        anomalous = (day.labels == Label.ANOMALOUS).any()
        ax.plot(hours, means, lw=1, ls="--" if anomalous else "-", label=day.day_id)
    ax.set_xlabel("Hours since first frame")
    ax.set_ylabel("Mean temperature (°C)")
    ax.set_title("Daily mean temperature")
    ax.legend(fontsize=6, ncol=2)
    return _save(fig, path)


def plot_interarrival_histogram(days: Sequence[DaySequence], path: str | Path, bins: int = 40) -> Path:
    gaps = np.concatenate([np.diff(d.timestamps) for d in days if len(d) > 1] or [np.empty(0)]) / 60.0
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(gaps, bins=bins, color="tab:blue", alpha=0.8)
    ax.set_xlabel("Inter-arrival time (minutes)")
    ax.set_ylabel("Count")
    ax.set_title("Histogram of inter-arrival times")
    return _save(fig, path)


def plot_anomaly_maps(panels: Sequence[dict], path: str | Path) -> Path:
    """panels: dicts with frame, forecast, map (2D arrays) and a title."""
    n = max(len(panels), 1)
    fig, axes = plt.subplots(n, 3, figsize=(9, 3 * n), squeeze=False)
    for row, panel in zip(axes, panels):
        row[0].imshow(panel["frame"], cmap="inferno")
        row[0].set_title(panel.get("title", ""), fontsize=8)
        row[1].imshow(panel["forecast"], cmap="inferno")
        row[1].set_title("forecast", fontsize=8)
        row[2].imshow(panel["map"], cmap="jet", vmin=0.0, vmax=1.0)
        row[2].set_title("anomaly map", fontsize=8)
        for ax in row:
            ax.axis("off")
    return _save(fig, path)


def plot_score_timeline(day: DaySequence, scores: np.ndarray, path: str | Path,
                        threshold: float | None = None) -> Path:
    hours = (day.timestamps - day.t0) / 3600.0
    labels = day.labels
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(hours, scores, lw=1, color="tab:gray")
    hit = labels == Label.ANOMALOUS
    ax.scatter(hours[hit], np.asarray(scores)[hit], s=12, color="tab:red", label="anomalous", zorder=3)
    if threshold is not None and np.isfinite(threshold):
        ax.axhline(threshold, color="tab:orange", ls="--", lw=1, label="λ_f")
    ax.set_xlabel("Hours since first frame")
    ax.set_ylabel("Anomaly score")
    ax.set_title(f"Scores for {day.day_id}")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_training_history(history: dict, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("pretrain_loss", "train_loss", "val_loss"):
        values = history.get(key) or []
        if values:
            ax.plot(range(1, len(values) + 1), values, marker="o", ms=3, label=key)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    return _save(fig, path)
