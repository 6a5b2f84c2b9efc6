#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

"""
Parametric simulator of operational days.

Each day ramps up (S), holds a plateau with a left-to-right gradient along the
flow direction (M), then ramps down (E). Samples arrive at uniform random
intervals and a fraction of them get one of four injected anomalies.

Usage:
    from simulate import SimConfig, simulate_dataset
    days, manifest_path = simulate_dataset(SimConfig(seed=7), 30, "out/data")
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from core import (
    DAY_FILE_SUFFIX,
    AnomalyKind,
    DaySequence,
    Label,
    Sample,
    Segment,
    ThermalFrame,
    write_day,
    write_manifest,
)
from errors import ConfigError

logger = logging.getLogger("forecastad.simulate")

DAY_SECONDS = 86400.0
DAY_START_OFFSET = 6 * 3600.0  # first sample of day k at k*86400 + 06:00

DEFAULT_KIND_WEIGHTS = {
    "freeze_streak": 0.25,
    "cold_patch": 0.25,
    "global_drop": 0.25,
    "hot_spot": 0.25,
}


@dataclass
class SimConfig:
    H: int = 64
    W: int = 64
    n_days: int = 30
    day_length: float = 10 * 3600.0
    interarrival_min: float = 60.0
    interarrival_max: float = 300.0
    base_temp: float = 40.0
    peak_temp: float = 400.0
    ramp_fraction: float = 0.15
    gradient_span: float = 60.0
    pixel_noise_sd: float = 2.0
    anomaly_rate: float = 0.08
    anomalous_day_rate: float = 0.5
    cluster_persistence: float = 0.0
    anomaly_delta: float = 80.0
    kind_weights: dict = field(default_factory=lambda: dict(DEFAULT_KIND_WEIGHTS))
    seed: int = 0

    def __post_init__(self) -> None:
        if self.H < 4 or self.W < 4:
            raise ConfigError("sim.H and sim.W must be >= 4")
        if not 0 < self.interarrival_min <= self.interarrival_max:
            raise ConfigError("Need 0 < sim.interarrival_min <= sim.interarrival_max")
        if not 0 < self.ramp_fraction < 0.5:
            raise ConfigError("sim.ramp_fraction must lie in (0, 0.5)")
        if not self.peak_temp > self.base_temp:
            raise ConfigError("sim.peak_temp must exceed sim.base_temp")
        if self.base_temp < 0 or self.pixel_noise_sd < 0 or self.day_length <= 0:
            raise ConfigError("sim.base_temp, sim.pixel_noise_sd must be >= 0 and sim.day_length > 0")
        for name in ("anomaly_rate", "anomalous_day_rate", "cluster_persistence"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"sim.{name} must lie in [0, 1]")
        unknown = set(self.kind_weights) - set(DEFAULT_KIND_WEIGHTS)
        if unknown:
            raise ConfigError(f"Unknown anomaly kinds in sim.kind_weights: {sorted(unknown)}")
        weights = np.array([self.kind_weights.get(k, 0.0) for k in DEFAULT_KIND_WEIGHTS], dtype=np.float64)
        if np.any(weights < 0) or weights.sum() <= 0:
            raise ConfigError("sim.kind_weights must be non-negative with a positive sum")

    def kind_probabilities(self) -> tuple[list[AnomalyKind], np.ndarray]:
        kinds = [AnomalyKind[k.upper()] for k in DEFAULT_KIND_WEIGHTS]
        w = np.array([self.kind_weights.get(k, 0.0) for k in DEFAULT_KIND_WEIGHTS], dtype=np.float64)
        return kinds, w / w.sum()

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def day_rng(seed: int, day_index: int) -> np.random.Generator:
    """Independent stream per (seed, day_index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(day_index)]))


def day_id_for(day_index: int) -> str:
    return f"day_{day_index:04d}"


# ---------------------------
# Clean template
# ---------------------------

def segment_at(config: SimConfig, rel_time: float) -> Segment:
    f = rel_time / config.day_length
    if f < config.ramp_fraction:
        return Segment.S
    if f > 1.0 - config.ramp_fraction:
        return Segment.E
    return Segment.M


def mean_temperature_at(config: SimConfig, rel_time: float) -> float:
    f = min(max(rel_time / config.day_length, 0.0), 1.0)
    r = config.ramp_fraction
    span = config.peak_temp - config.base_temp
    if f < r:
        return config.base_temp + span * (f / r)
    if f > 1.0 - r:
        return config.base_temp + span * ((1.0 - f) / r)
    return config.peak_temp


def template_frame(config: SimConfig, rel_time: float) -> np.ndarray:
    """Noise-free frame: uniform mean plus a width-axis gradient scaled by plateau progress."""
    mean = mean_temperature_at(config, rel_time)
    progress = (mean - config.base_temp) / (config.peak_temp - config.base_temp)
    ramp = np.linspace(-0.5, 0.5, config.W, dtype=np.float64) * config.gradient_span * progress
    return np.broadcast_to(mean + ramp, (config.H, config.W)).astype(np.float64)


# ---------------------------
# Anomaly injection
# ---------------------------

def inject_anomaly(
    frame: ThermalFrame,
    kind: AnomalyKind,
    rng: np.random.Generator,
    delta: float = 80.0,
    base_temp: float = 40.0,
) -> ThermalFrame:
    try:
        kind = AnomalyKind(kind)
    except ValueError:
        raise ValueError(f"Unknown anomaly kind: {kind!r}") from None
    px = frame.pixels.astype(np.float64)
    h, w = px.shape

    if kind == AnomalyKind.FREEZE_STREAK:
        for _ in range(int(rng.integers(1, 4))):
            width = int(min(rng.integers(2, 6), w))
            start = int(rng.integers(0, w - width + 1))
            px[:, start:start + width] += delta
    elif kind == AnomalyKind.COLD_PATCH:
        area = rng.uniform(0.05, 0.15) * h * w
        aspect = rng.uniform(0.5, 2.0)
        ph = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
        pw = int(np.clip(round(area / ph), 1, w))
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
        px[top:top + ph, left:left + pw] -= delta
    elif kind == AnomalyKind.GLOBAL_DROP:
        factor = rng.uniform(0.5, 0.8)
        px -= factor * max(px.mean() - base_temp, 0.0)
    elif kind == AnomalyKind.HOT_SPOT:
        radius = int(rng.integers(2, max(3, min(h, w) // 8) + 1))
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        yy, xx = np.ogrid[:h, :w]
        px[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] += delta
    else:
        raise ValueError(f"Unknown anomaly kind: {kind!r}")

    return ThermalFrame(np.clip(px, 0.0, None).astype(np.float32))


# ---------------------------
# Days and datasets
# ---------------------------

def sample_timestamps(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Relative times: 0, then accumulated uniform gaps while within day_length."""
    times = [0.0]
    while True:
        nxt = times[-1] + rng.uniform(config.interarrival_min, config.interarrival_max)
        if nxt > config.day_length:
            break
        times.append(nxt)
    return np.array(times, dtype=np.float64)


def simulate_day(config: SimConfig, day_index: int) -> DaySequence:
    rng = day_rng(config.seed, day_index)
    day_id = day_id_for(day_index)
    rel_times = sample_timestamps(config, rng)
    day_start = day_index * DAY_SECONDS + DAY_START_OFFSET
    anomalous_day = rng.random() < config.anomalous_day_rate
    kinds, probs = config.kind_probabilities()

    samples = []
    previous_kind = AnomalyKind.NONE
    for rel in rel_times:
        clean = template_frame(config, rel)
        noise = rng.normal(0.0, 1.0, clean.shape) * config.pixel_noise_sd
        frame = ThermalFrame(np.clip(clean + noise, 0.0, None).astype(np.float32))

        kind = AnomalyKind.NONE
        persist_draw = rng.random()
        rate_draw = rng.random()
        kind_draw = kinds[int(rng.choice(len(kinds), p=probs))]
        if anomalous_day:
            if previous_kind != AnomalyKind.NONE and persist_draw < config.cluster_persistence:
                kind = previous_kind
            elif rate_draw < config.anomaly_rate:
                kind = kind_draw
        if kind != AnomalyKind.NONE:
            frame = inject_anomaly(frame, kind, rng, config.anomaly_delta, config.base_temp)
        previous_kind = kind

        samples.append(Sample(
            frame=frame,
            t=float(day_start + rel),
            y=Label.ANOMALOUS if kind != AnomalyKind.NONE else Label.NORMAL,
            segment=segment_at(config, rel),
            day_id=day_id,
            anomaly_kind=kind,
        ))
    return DaySequence(day_id, samples)


def simulate_dataset(
    config: SimConfig,
    n_days: int,
    out_dir: str | Path,
    jobs: int = 1,
    extra_manifest: dict | None = None,
) -> tuple[list[DaySequence], Path]:
    """Simulate n_days and write day files plus manifest.json into out_dir."""
    if n_days < 1:
        raise ConfigError("n_days must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def _one(day_index: int) -> DaySequence:
        day = simulate_day(config, day_index)
        write_day(out_dir / f"{day.day_id}{DAY_FILE_SUFFIX}", day)
        return day

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            days = list(pool.map(_one, range(n_days)))
    else:
        days = [_one(i) for i in range(n_days)]

    n_samples = sum(len(d) for d in days)
    n_anomalous = sum(int((d.labels == Label.ANOMALOUS).sum()) for d in days)
    manifest = {
        "days": [f"{d.day_id}{DAY_FILE_SUFFIX}" for d in days],
        "train": [],
        "validation": [],
        "test": [],
        "setup": None,
        "height": config.H,
        "width": config.W,
        "seed": config.seed,
        "sim_config_hash": config.config_hash(),
        "n_samples": n_samples,
        "n_anomalous": n_anomalous,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, manifest)
    logger.info(
        "Simulated %d days (%d samples, %d anomalous) into %s",
        len(days), n_samples, n_anomalous, out_dir,
    )
    return days, manifest_path
