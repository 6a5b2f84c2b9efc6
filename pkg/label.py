#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

"""
Rule-based labelling engine.

Days are filtered, split into S/M/E segments, the M segment is checked with
rules R1-R4 and the S/E segments with the trend rule. A sample is anomalous
when any rule that applies to its segment flags it.

Percentiles use linear interpolation between order statistics throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import convolve2d

from core import AnomalyKind, DaySequence, Label, Segment, ThermalFrame
from errors import ConfigError

logger = logging.getLogger("forecastad.label")

SOBEL_VERTICAL = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SMOOTHING_WINDOW = 5
LOW_M_TEMPERATURE_FACTOR = 0.5


@dataclass
class LabelConfig:
    r1_pair_percentile: float = 95.0
    r1_dataset_percentile: float = 99.9
    r2_percentile: float = 1.0
    r3_template_count: int = 5
    r4_horizontal_threshold: float | None = None
    r4_vertical_threshold: float | None = None
    r4_calibration_percentile: float = 99.5
    trend_threshold: float = 5.0
    trend_window: int = 3
    min_day_samples: int = 20
    m_plateau_fraction: float = 0.9

    def __post_init__(self) -> None:
        for name in ("r1_pair_percentile", "r1_dataset_percentile", "r2_percentile", "r4_calibration_percentile"):
            if not 0.0 < getattr(self, name) < 100.0:
                raise ConfigError(f"label.{name} must lie in (0, 100)")
        for name in ("r4_horizontal_threshold", "r4_vertical_threshold"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"label.{name} must be > 0 (or null to calibrate)")
        if not self.trend_threshold > 0:
            raise ConfigError("label.trend_threshold must be > 0")
        if int(self.r3_template_count) < 1 or int(self.trend_window) < 1:
            raise ConfigError("label.r3_template_count and label.trend_window must be >= 1")
        if not 0.0 < self.m_plateau_fraction <= 1.0:
            raise ConfigError("label.m_plateau_fraction must lie in (0, 1]")

    @property
    def r4_calibrated(self) -> bool:
        return self.r4_horizontal_threshold is not None and self.r4_vertical_threshold is not None


@dataclass
class RuleResult:
    """Per-day scores (NaN where a rule does not apply) and flags for one rule."""

    name: str
    scores: dict[str, np.ndarray]
    flags: dict[str, np.ndarray]
    threshold: float

    @property
    def flag_count(self) -> int:
        return int(sum(f.sum() for f in self.flags.values()))

    @property
    def scored_count(self) -> int:
        return int(sum(np.isfinite(s).sum() for s in self.scores.values()))


@dataclass
class R4Verdict:
    horizontal_score: float
    vertical_score: float
    flag: bool


@dataclass
class RuleVerdict:
    """Everything the rules said about one day."""

    day_id: str
    segments: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    r4: np.ndarray
    trend: np.ndarray
    scores: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def any_m_rule(self) -> np.ndarray:
        return self.r1 | self.r2 | self.r3 | self.r4


def frame_means(day: DaySequence) -> np.ndarray:
    return np.array([s.frame.mean() for s in day.samples], dtype=np.float64)


def _percentile(values: np.ndarray, q: float) -> float:
    return float(np.percentile(values, q, method="linear"))


def _collect(scores: dict[str, np.ndarray]) -> np.ndarray:
    if not scores:
        return np.empty(0)
    flat = np.concatenate([s for s in scores.values()])
    return flat[np.isfinite(flat)]


def _m_indices(day: DaySequence) -> np.ndarray:
    return np.flatnonzero(day.segments == Segment.M)


def _squared_diff_percentile(a: np.ndarray, b: np.ndarray, q: float) -> float:
    diff = a.astype(np.float64) - b.astype(np.float64)
    return _percentile(diff * diff, q)


# ---------------------------
# Segmentation and filtering
# ---------------------------

def smoothed_means(means: np.ndarray, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Centered moving average, truncated at the edges."""
    kernel = np.ones(window)
    sums = np.convolve(means, kernel, mode="same")
    counts = np.convolve(np.ones_like(means), kernel, mode="same")
    return sums / counts


def longest_run(mask: np.ndarray) -> tuple[int, int]:
    """[start, stop) of the longest run of True; the earliest wins ties. (0, 0) if none."""
    edges = np.diff(np.concatenate(([0], np.asarray(mask, dtype=np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    if not len(starts):
        return 0, 0
    i = int(np.argmax(stops - starts))
    return int(starts[i]), int(stops[i])


def segment_day(day: DaySequence, config: LabelConfig) -> DaySequence:
    """M is the longest contiguous run with smoothed mean >= m_plateau_fraction * peak."""
    if not day.samples:
        return day
    smooth = smoothed_means(frame_means(day))
    start, stop = longest_run(smooth >= config.m_plateau_fraction * smooth.max())
    segments = np.full(len(day), Segment.S, dtype=np.int64)
    if stop > start:
        segments[start:stop] = Segment.M
        segments[stop:] = Segment.E
    return day.with_samples(
        replace(s, segment=Segment(int(seg))) for s, seg in zip(day.samples, segments)
    )


def _ensure_segmented(day: DaySequence, config: LabelConfig) -> DaySequence:
    if any(s.segment == Segment.UNASSIGNED for s in day.samples):
        return segment_day(day, config)
    return day


def filter_days(
    days: Sequence[DaySequence], config: LabelConfig
) -> tuple[list[DaySequence], list[tuple[DaySequence, str]]]:
    kept, dropped = [], []
    candidates = []
    for day in days:
        if len(day) < config.min_day_samples:
            dropped.append((day, "too_few_samples"))
        else:
            candidates.append(_ensure_segmented(day, config))

    m_means = {}
    for day in candidates:
        idx = _m_indices(day)
        m_means[day.day_id] = float(frame_means(day)[idx].mean()) if len(idx) else float("nan")
    finite = [v for v in m_means.values() if np.isfinite(v)]
    median = float(np.median(finite)) if finite else float("nan")

    for day in candidates:
        value = m_means[day.day_id]
        if not np.isfinite(value) or (np.isfinite(median) and value < LOW_M_TEMPERATURE_FACTOR * median):
            dropped.append((day, "low_M_temperature"))
        else:
            kept.append(day)
    for day, reason in dropped:
        logger.info("Dropping %s: %s", day.day_id, reason)
    return kept, dropped


# ---------------------------
# Rules R1-R4
# ---------------------------

def _flag_above(name: str, scores: dict[str, np.ndarray], q: float) -> RuleResult:
    values = _collect(scores)
    threshold = _percentile(values, q) if len(values) else float("nan")
    flags = {
        day_id: np.isfinite(s) & (s > threshold) if len(values) else np.zeros(len(s), dtype=bool)
        for day_id, s in scores.items()
    }
    return RuleResult(name, scores, flags, threshold)


def rule_r1(days: Sequence[DaySequence], config: LabelConfig) -> RuleResult:
    """95th percentile of squared differences to the previous M frame."""
    scores = {}
    for day in days:
        s = np.full(len(day), np.nan)
        idx = _m_indices(day)
        for prev, cur in zip(idx[:-1], idx[1:]):
            s[cur] = _squared_diff_percentile(
                day.samples[cur].frame.pixels, day.samples[prev].frame.pixels, config.r1_pair_percentile
            )
        scores[day.day_id] = s
    return _flag_above("R1", scores, config.r1_dataset_percentile)


def rule_r2(days: Sequence[DaySequence], config: LabelConfig) -> RuleResult:
    """Frame mean minus the day's mean of M frame means; flags the low tail."""
    scores = {}
    for day in days:
        s = np.full(len(day), np.nan)
        idx = _m_indices(day)
        if len(idx):
            means = frame_means(day)[idx]
            s[idx] = means - means.mean()
        scores[day.day_id] = s
    values = _collect(scores)
    threshold = _percentile(values, config.r2_percentile) if len(values) else float("nan")
    flags = {
        day_id: np.isfinite(s) & (s < threshold) if len(values) else np.zeros(len(s), dtype=bool)
        for day_id, s in scores.items()
    }
    return RuleResult("R2", scores, flags, threshold)


def rule_r3(days: Sequence[DaySequence], config: LabelConfig) -> RuleResult:
    """Mean over the day's first M frames (templates) of R1-style scores."""
    scores = {}
    for day in days:
        s = np.full(len(day), np.nan)
        idx = _m_indices(day)
        if len(idx):
            templates = [day.samples[j].frame.pixels for j in idx[:config.r3_template_count]]
            if len(templates) < config.r3_template_count:
                logger.warning(
                    "%s: only %d M samples for %d templates, using all available",
                    day.day_id, len(templates), config.r3_template_count,
                )
            for i in idx:
                px = day.samples[i].frame.pixels
                s[i] = float(np.mean([
                    _squared_diff_percentile(px, tpl, config.r1_pair_percentile) for tpl in templates
                ]))
        scores[day.day_id] = s
    return _flag_above("R3", scores, config.r1_dataset_percentile)


def r4_scores(pixels: np.ndarray) -> tuple[float, float]:
    """(horizontal, vertical): largest signed step between consecutive rows, mean |Sobel| of column steps."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.shape[0] < 4 or px.shape[1] < 4:
        raise ValueError(f"R4 needs frames of at least 4x4, got {px.shape}")
    horizontal = float(np.diff(px, axis=0).max())
    column_diffs = np.diff(px, axis=1)
    edges = convolve2d(column_diffs, SOBEL_VERTICAL, mode="valid")
    vertical = float(np.abs(edges).mean())
    return horizontal, vertical


def rule_r4(frame: ThermalFrame, config: LabelConfig) -> R4Verdict:
    if not config.r4_calibrated:
        raise ConfigError("R4 thresholds are not set; calibrate them first")
    horizontal, vertical = r4_scores(frame.pixels)
    flag = horizontal > config.r4_horizontal_threshold or vertical > config.r4_vertical_threshold
    return R4Verdict(horizontal, vertical, bool(flag))


def calibrate_r4_thresholds(frames: Iterable[ThermalFrame], percentile: float = 99.5) -> tuple[float, float]:
    """Thresholds at the given percentile of clean-frame R4 scores."""
    pairs = np.array([r4_scores(f.pixels) for f in frames], dtype=np.float64)
    if not len(pairs):
        raise ConfigError("No frames to calibrate R4 thresholds on")
    h = max(_percentile(pairs[:, 0], percentile), np.finfo(np.float64).tiny)
    v = max(_percentile(pairs[:, 1], percentile), np.finfo(np.float64).tiny)
    logger.info("Calibrated R4 thresholds: horizontal=%.4f vertical=%.4f", h, v)
    return h, v


def rule_r4_days(days: Sequence[DaySequence], config: LabelConfig) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    out = {}
    for day in days:
        h = np.full(len(day), np.nan)
        v = np.full(len(day), np.nan)
        f = np.zeros(len(day), dtype=bool)
        for i in _m_indices(day):
            verdict = rule_r4(day.samples[i].frame, config)
            h[i], v[i], f[i] = verdict.horizontal_score, verdict.vertical_score, verdict.flag
        out[day.day_id] = (h, v, f)
    return out


# ---------------------------
# S/E trend rule
# ---------------------------

def label_se_segments(day: DaySequence, config: LabelConfig) -> np.ndarray:
    """Flags for S/E samples that break the expected rise (S) or decline (E)."""
    means = frame_means(day)
    segments = day.segments
    flags = np.zeros(len(day), dtype=bool)
    for segment, rising in ((Segment.S, True), (Segment.E, False)):
        idx = np.flatnonzero(segments == segment)
        if not len(idx):
            continue
        start = idx[0]
        for i in idx:
            j = max(i - config.trend_window, start)
            if j == i:
                continue
            change = means[i] - means[j]
            normal = change > config.trend_threshold if rising else change < -config.trend_threshold
            flags[i] = not normal
    return flags


# ---------------------------
# Combination
# ---------------------------

def combine_labels(verdicts: Iterable[RuleVerdict]) -> dict[str, np.ndarray]:
    labels = {}
    for v in verdicts:
        in_m = v.segments == Segment.M
        flagged = np.where(in_m, v.any_m_rule, v.trend)
        labels[v.day_id] = flagged.astype(np.int64)
    return labels


def _agreement(days: Sequence[DaySequence], labelled: Sequence[DaySequence]) -> dict:
    truth_y, truth_seg, got_y, got_seg = [], [], [], []
    for before, after in zip(days, labelled):
        truth_y.extend(int(s.anomaly_kind != AnomalyKind.NONE) for s in before.samples)
        truth_seg.extend(int(s.segment) for s in before.samples)
        got_y.extend(int(s.y) for s in after.samples)
        got_seg.extend(int(s.segment) for s in after.samples)
    if not truth_y:
        return {}
    truth_y, got_y = np.array(truth_y), np.array(got_y)
    out = {"label": float((truth_y == got_y).mean())}
    truth_seg, got_seg = np.array(truth_seg), np.array(got_seg)
    known = truth_seg != Segment.UNASSIGNED
    if known.any():
        out["segment"] = float((truth_seg[known] == got_seg[known]).mean())
    return out


def label_dataset(
    days: Sequence[DaySequence], config: LabelConfig
) -> tuple[list[DaySequence], list[tuple[DaySequence, str]], dict]:
    """Run the whole rule engine. Returns labelled kept days, dropped days and a report."""
    if not config.r4_calibrated:
        raise ConfigError("R4 thresholds are not set; calibrate them first")
    raw_by_id = {d.day_id: d for d in days}
    segmented = [segment_day(d, config) for d in days]
    kept, dropped = filter_days(segmented, config)

    r1, r2, r3 = rule_r1(kept, config), rule_r2(kept, config), rule_r3(kept, config)
    r4 = rule_r4_days(kept, config)
    verdicts = []
    for day in kept:
        h, v, f4 = r4[day.day_id]
        verdicts.append(RuleVerdict(
            day_id=day.day_id,
            segments=day.segments,
            r1=r1.flags[day.day_id],
            r2=r2.flags[day.day_id],
            r3=r3.flags[day.day_id],
            r4=f4,
            trend=label_se_segments(day, config),
            scores={
                "r1": r1.scores[day.day_id], "r2": r2.scores[day.day_id], "r3": r3.scores[day.day_id],
                "r4_horizontal": h, "r4_vertical": v,
            },
        ))
    labels = combine_labels(verdicts)
    labelled = [
        day.with_samples(replace(s, y=Label(int(y))) for s, y in zip(day.samples, labels[day.day_id]))
        for day in kept
    ]

    trend_flags = int(sum(v.trend.sum() for v in verdicts))
    r4_flags = int(sum(v.r4.sum() for v in verdicts))
    report = {
        "days_in": len(days),
        "days_kept": len(kept),
        "dropped": [{"day_id": d.day_id, "reason": reason} for d, reason in dropped],
        "samples_labelled": int(sum(len(d) for d in labelled)),
        "anomalous": int(sum(labels[d.day_id].sum() for d in labelled)),
        "rules": {
            "R1": {"flags": r1.flag_count, "scored": r1.scored_count, "threshold": r1.threshold},
            "R2": {"flags": r2.flag_count, "scored": r2.scored_count, "threshold": r2.threshold},
            "R3": {"flags": r3.flag_count, "scored": r3.scored_count, "threshold": r3.threshold},
            "R4": {
                "flags": r4_flags,
                "horizontal_threshold": config.r4_horizontal_threshold,
                "vertical_threshold": config.r4_vertical_threshold,
            },
            "trend": {"flags": trend_flags, "threshold": config.trend_threshold, "window": config.trend_window},
        },
        "agreement_with_ground_truth": _agreement([raw_by_id[d.day_id] for d in labelled], labelled),
    }
    logger.info(
        "Labelled %d samples over %d days: R1=%d R2=%d R3=%d R4=%d trend=%d",
        report["samples_labelled"], len(kept), r1.flag_count, r2.flag_count, r3.flag_count, r4_flags, trend_flags,
    )
    return labelled, dropped, report
