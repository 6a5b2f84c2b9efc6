#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

"""
Core data model: frames, samples, days, splits and context windows.

Also owns the on-disk formats (binary day files, JSON manifest) and the
atomic-write helpers every other module uses.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from errors import ConfigError, DayFileError, OrderingError

logger = logging.getLogger("forecastad.core")

EPSILON = 1e-5
DAY_FILE_MAGIC = b"FCAD"
DAY_FILE_VERSION = 1
DAY_FILE_SUFFIX = ".fcad"

_HEADER = struct.Struct("<4sHHHI")
_FRAME_HEADER = struct.Struct("<dbbB")


class Label(IntEnum):
    UNLABELED = -1
    NORMAL = 0
    ANOMALOUS = 1


class Segment(IntEnum):
    UNASSIGNED = -1
    S = 0
    M = 1
    E = 2


class AnomalyKind(IntEnum):
    NONE = 0
    FREEZE_STREAK = 1
    COLD_PATCH = 2
    GLOBAL_DROP = 3
    HOT_SPOT = 4


class SplitSetup(str, Enum):
    TR1 = "Tr#1"
    TR2 = "Tr#2"


# ---------------------------
# Domain types
# ---------------------------

@dataclass(frozen=True, eq=False)
class ThermalFrame:
    """One H×W grid of non-negative temperatures (°C), stored as float32."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"Frame must be a non-empty 2D grid, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("Frame contains non-finite pixels")
        if np.any(px < 0):
            raise ValueError("Frame contains negative temperatures")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def mean(self) -> float:
        return float(self.pixels.astype(np.float64).mean())


@dataclass(frozen=True, eq=False)
class Sample:
    frame: ThermalFrame
    t: float
    y: Label = Label.UNLABELED
    segment: Segment = Segment.UNASSIGNED
    day_id: str = ""
    anomaly_kind: AnomalyKind = AnomalyKind.NONE
    # Offsets taken from the full day when the sample was cut out of it.
    tau: float | None = None
    delta: float | None = None


@dataclass(eq=False)
class DaySequence:
    day_id: str
    samples: list[Sample] = field(default_factory=list)
    origin: float | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def t0(self) -> float:
        """Timestamp of the day's first sample, including samples cut away by a segment filter."""
        return self.origin if self.origin is not None else self.samples[0].t

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([s.t for s in self.samples], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(s.y) for s in self.samples], dtype=np.int64)

    @property
    def segments(self) -> np.ndarray:
        return np.array([int(s.segment) for s in self.samples], dtype=np.int64)

    def stack(self) -> np.ndarray:
        """All frames as an (n, H, W) float32 array."""
        return np.stack([s.frame.pixels for s in self.samples])

    def validate(self) -> None:
        ts = self.timestamps
        for i in range(1, len(ts)):
            if not ts[i] > ts[i - 1]:
                raise OrderingError(i, float(ts[i - 1]), float(ts[i]))
        for s in self.samples:
            if s.day_id != self.day_id:
                raise ValueError(f"Sample day_id {s.day_id!r} differs from day {self.day_id!r}")

    def with_samples(self, samples: Iterable[Sample]) -> "DaySequence":
        return DaySequence(self.day_id, list(samples), self.origin)


@dataclass(eq=False)
class DatasetSplit:
    train: list[DaySequence]
    validation: list[DaySequence]
    test: list[DaySequence]
    setup: SplitSetup = SplitSetup.TR2

    def validate(self) -> None:
        ids = [{d.day_id for d in part} for part in (self.train, self.validation, self.test)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise ConfigError("Train, validation and test days must be disjoint")
        for day in self.train:
            if any(s.y != Label.NORMAL for s in day.samples):
                raise ConfigError(f"Training day {day.day_id} contains non-normal samples")
        if self.setup == SplitSetup.TR1:
            for day in self.train + self.validation:
                if any(s.segment != Segment.M for s in day.samples):
                    raise ConfigError(f"Tr#1 day {day.day_id} contains samples outside M")


class TimedSample(NamedTuple):
    sample: Sample
    tau: float
    delta: float


@dataclass(frozen=True, eq=False)
class ContextWindow:
    context: tuple[TimedSample, ...]
    target: TimedSample
    n_padding: int = 0

    @property
    def K(self) -> int:
        return len(self.context)


@dataclass
class CoreConfig:
    K: int = 30
    epsilon: float = EPSILON

    def __post_init__(self) -> None:
        if int(self.K) < 1:
            raise ConfigError("core.K must be >= 1")
        if not self.epsilon > 0:
            raise ConfigError("core.epsilon must be > 0")
        self.K = int(self.K)


# ---------------------------
# Time offsets and windows
# ---------------------------

def compute_time_offsets(day: DaySequence, epsilon: float = EPSILON) -> list[tuple[float, float]]:
    """(τ, δ) in seconds per sample. The first sample of a day gets (ε, ε).

    Samples cut out of a longer day keep the offsets they had in that day.
    """
    if not day.samples:
        return []
    day.validate()
    if all(s.tau is not None and s.delta is not None for s in day.samples):
        return [(float(s.tau), float(s.delta)) for s in day.samples]
    ts = day.timestamps
    offsets = [(epsilon, epsilon)]
    for i in range(1, len(ts)):
        offsets.append((float(ts[i] - ts[i - 1]), float(ts[i] - ts[0])))
    return offsets


def window_indices(n: int, K: int) -> np.ndarray:
    """Context indices per target: row i holds i-K..i-1, clipped to 0."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    idx = np.arange(n)[:, None] - K + np.arange(K)[None, :]
    return np.clip(idx, 0, None)


def build_context_windows(day: DaySequence, K: int, epsilon: float = EPSILON) -> list[ContextWindow]:
    if K < 1:
        raise ConfigError("K must be >= 1")
    if not day.samples:
        return []
    offsets = compute_time_offsets(day, epsilon)
    timed = [TimedSample(s, tau, delta) for s, (tau, delta) in zip(day.samples, offsets)]
    windows = []
    for i, row in enumerate(window_indices(len(timed), K)):
        windows.append(ContextWindow(
            context=tuple(timed[j] for j in row),
            target=timed[i],
            n_padding=max(0, K - i),
        ))
    return windows


# ---------------------------
# Label source
# ---------------------------

def apply_label_source(day: DaySequence, source: str) -> DaySequence:
    """`labels` keeps the stored labels; `ground_truth` derives y from anomaly_kind."""
    if source == "labels":
        return day
    if source != "ground_truth":
        raise ConfigError(f"Unknown label source: {source}")
    samples = [
        replace(s, y=Label.ANOMALOUS if s.anomaly_kind != AnomalyKind.NONE else Label.NORMAL)
        for s in day.samples
    ]
    return day.with_samples(samples)


def restrict_to_segment(day: DaySequence, segment: Segment, epsilon: float = EPSILON) -> DaySequence:
    """Keep one segment's samples, stamped with the (τ, δ) they have in the full day."""
    if not day.samples:
        return day
    offsets = compute_time_offsets(day, epsilon)
    kept = [
        replace(s, tau=tau, delta=delta)
        for s, (tau, delta) in zip(day.samples, offsets)
        if s.segment == segment
    ]
    return DaySequence(day.day_id, kept, day.t0)


# ---------------------------
# Atomic writes
# ---------------------------

def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str | os.PathLike, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, default=str) + "\n")


# ---------------------------
# Binary day files
# ---------------------------

def encode_day(day: DaySequence) -> bytes:
    day.validate()
    if day.samples:
        h, w = day.samples[0].frame.pixels.shape
    else:
        h, w = 0, 0
    parts = [_HEADER.pack(DAY_FILE_MAGIC, DAY_FILE_VERSION, h, w, len(day.samples))]
    for s in day.samples:
        if s.frame.pixels.shape != (h, w):
            raise DayFileError(f"Day {day.day_id}: mixed frame sizes {s.frame.pixels.shape} vs {(h, w)}")
        parts.append(_FRAME_HEADER.pack(float(s.t), int(s.y), int(s.segment), int(s.anomaly_kind)))
        parts.append(s.frame.pixels.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def decode_day(data: bytes, day_id: str, source: str = "<bytes>") -> DaySequence:
    if len(data) < _HEADER.size:
        raise DayFileError(f"{source}: truncated header")
    magic, version, h, w, count = _HEADER.unpack_from(data, 0)
    if magic != DAY_FILE_MAGIC:
        raise DayFileError(f"{source}: bad magic {magic!r}")
    if version != DAY_FILE_VERSION:
        raise DayFileError(f"{source}: unsupported format version {version}")
    n_px = h * w
    stride = _FRAME_HEADER.size + 4 * n_px
    expected = _HEADER.size + count * stride
    if len(data) != expected:
        raise DayFileError(f"{source}: expected {expected} bytes, found {len(data)}")
    samples = []
    offset = _HEADER.size
    for _ in range(count):
        t, y, seg, kind = _FRAME_HEADER.unpack_from(data, offset)
        offset += _FRAME_HEADER.size
        px = np.frombuffer(data, dtype="<f4", count=n_px, offset=offset).reshape(h, w)
        offset += 4 * n_px
        samples.append(Sample(
            frame=ThermalFrame(px.astype(np.float32)),
            t=t,
            y=Label(y),
            segment=Segment(seg),
            day_id=day_id,
            anomaly_kind=AnomalyKind(kind),
        ))
    return DaySequence(day_id, samples)


def write_day(path: str | os.PathLike, day: DaySequence) -> None:
    try:
        atomic_write_bytes(path, encode_day(day))
    except OSError as e:
        raise DayFileError(f"Failed to write {path}: {e}") from e


def read_day(path: str | os.PathLike) -> DaySequence:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DayFileError(f"Failed to read {path}: {e}") from e
    return decode_day(data, path.stem, source=str(path))


# ---------------------------
# Manifest
# ---------------------------

def write_manifest(path: str | os.PathLike, manifest: dict) -> None:
    atomic_write_json(path, manifest)


def read_manifest(path: str | os.PathLike) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DayFileError(f"Failed to read manifest {path}: {e}") from e


def read_days(data_dir: str | os.PathLike, files: Sequence[str]) -> list[DaySequence]:
    return [read_day(Path(data_dir) / name) for name in files]


def load_split(manifest_path: str | os.PathLike, label_source: str = "labels",
               epsilon: float = EPSILON) -> DatasetSplit:
    """Read a split manifest. Tr#1 keeps only M samples in train and validation, with full-day offsets."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    setup = manifest.get("setup")
    if setup not in (SplitSetup.TR1.value, SplitSetup.TR2.value):
        raise ConfigError(f"{manifest_path}: manifest has no split setup (got {setup!r})")
    data_dir = manifest_path.parent
    parts = {}
    for key in ("train", "validation", "test"):
        days = [apply_label_source(d, label_source) for d in read_days(data_dir, manifest.get(key, []))]
        if setup == SplitSetup.TR1.value and key != "test":
            days = [restrict_to_segment(d, Segment.M, epsilon) for d in days]
            days = [d for d in days if d.samples]
        parts[key] = days
    split = DatasetSplit(parts["train"], parts["validation"], parts["test"], SplitSetup(setup))
    split.validate()
    return split
