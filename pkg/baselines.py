#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

"""
Comparison detectors: four single-feature scores and the temporal-blind
autoencoder (reconstruction error of the pre-trained encoder/decoder).
"""

from __future__ import annotations

import logging
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from core import DaySequence, Sample
from errors import ConfigError
from model import Forecaster, ModelCheckpoint

logger = logging.getLogger("forecastad.baselines")


class FeatureKind(str, Enum):
    TIME_OF_DAY = "time_of_day"
    NEGATIVE_MEAN = "negative_mean"
    NEGATIVE_MAX = "negative_max"
    NEGATIVE_STD = "negative_std"


def feature_score(sample: Sample, kind: FeatureKind | str, t0: float | None = None) -> float:
    """Single-sample feature used directly as an anomaly score.

    time_of_day needs the day's first timestamp t0; the others read pixels only.
    """
    try:
        kind = FeatureKind(kind)
    except ValueError:
        raise ConfigError(f"Unknown feature baseline: {kind!r}") from None
    px = sample.frame.pixels.astype(np.float64)
    if kind == FeatureKind.TIME_OF_DAY:
        if t0 is None:
            raise ValueError("time_of_day needs the day's first timestamp")
        return float(sample.t - t0)
    if kind == FeatureKind.NEGATIVE_MEAN:
        return float(-px.mean())
    if kind == FeatureKind.NEGATIVE_MAX:
        return float(-px.max())
    return float(-px.std(ddof=0))


class FeatureDetector:
    def __init__(self, kind: FeatureKind | str) -> None:
        self.kind = FeatureKind(kind)
        self.name = self.kind.value

    def prepare(self, seed: int) -> None:
        pass

    def score_days(self, days: Sequence[DaySequence]) -> list[np.ndarray]:
        return [
            np.array([feature_score(s, self.kind, day.t0) for s in day.samples], dtype=np.float64)
            for day in days
        ]


def autoencoder_score(sample: Sample, checkpoint: ModelCheckpoint) -> float:
    x, x_hat = Forecaster(checkpoint).reconstruct(sample.frame.pixels[None])
    return float(((x - x_hat) ** 2).sum())


class AutoencoderDetector:
    """Reconstruction error of the pre-trained autoencoder, no temporal context."""

    def __init__(self, checkpoint_for_seed: Callable[[int], ModelCheckpoint], name: str = "Autoencoder") -> None:
        self.name = name
        self._checkpoint_for_seed = checkpoint_for_seed
        self._forecaster: Forecaster | None = None

    def prepare(self, seed: int) -> None:
        self._forecaster = Forecaster(self._checkpoint_for_seed(seed))

    def score_days(self, days: Sequence[DaySequence]) -> list[np.ndarray]:
        if self._forecaster is None:
            raise RuntimeError("prepare(seed) must be called before score_days")
        out = []
        batch = self._forecaster.batch_size
        for day in days:
            if not len(day):
                out.append(np.empty(0))
                continue
            pixels = day.stack()
            scores = []
            for a in range(0, len(pixels), batch):
                x, x_hat = self._forecaster.reconstruct(pixels[a:a + batch])
                scores.append(((x - x_hat) ** 2).reshape(len(x), -1).sum(axis=1))
            out.append(np.concatenate(scores))
        return out


def feature_detectors() -> list[FeatureDetector]:
    return [FeatureDetector(k) for k in FeatureKind]
