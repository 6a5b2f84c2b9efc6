#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

"""
Metrics, threshold selection, per-setup evaluation over seeds, per-period
breakdowns and deployment-set cleaning.

Scores follow "higher means more anomalous" and a sample is predicted
anomalous when s >= λ. Samples labelled UNLABELED stay in their days as
context but never enter a metric.
"""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Protocol, Sequence

import numpy as np
import torch
from sklearn.metrics import accuracy_score, average_precision_score, f1_score, roc_auc_score

from core import DatasetSplit, DaySequence, Label, Segment
from errors import ConfigError, UndefinedMetricError
from model import Forecaster, ModelCheckpoint

logger = logging.getLogger("forecastad.evaluation")

SECONDS_PER_DAY = 86400.0
METRICS = ("auroc", "aupr", "accuracy_f", "f1_f", "accuracy_g", "f1_g")
LABEL_SOURCE_NAMES = {"labels": "rule labels", "ground_truth": "simulator ground truth"}


class TestFilter(str, Enum):
    TS1 = "Ts#1"
    TS2 = "Ts#2"
    TS3 = "Ts#3"

    @property
    def segments(self) -> tuple[Segment, ...]:
        return {
            TestFilter.TS1: (Segment.M,),
            TestFilter.TS2: (Segment.S, Segment.E),
            TestFilter.TS3: (Segment.S, Segment.M, Segment.E),
        }[self]


class Detector(Protocol):
    name: str

    def prepare(self, seed: int) -> None: ...

    def score_days(self, days: Sequence[DaySequence]) -> list[np.ndarray]: ...


# ---------------------------
# Scored sets and metrics
# ---------------------------

@dataclass
class ScoredSet:
    scores: np.ndarray
    y: np.ndarray
    segment: np.ndarray
    day_id: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)

    @classmethod
    def from_days(cls, days: Sequence[DaySequence], scores: Sequence[np.ndarray]) -> "ScoredSet":
        parts = {"scores": [], "y": [], "segment": [], "day_id": [], "t": []}
        for day, s in zip(days, scores):
            labelled = day.labels != Label.UNLABELED
            parts["scores"].append(np.asarray(s, dtype=np.float64)[labelled])
            parts["y"].append(day.labels[labelled])
            parts["segment"].append(day.segments[labelled])
            parts["day_id"].append(np.full(int(labelled.sum()), day.day_id, dtype=object))
            parts["t"].append(day.timestamps[labelled])
        if not days:
            return cls(np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                       np.empty(0, dtype=object), np.empty(0))
        return cls(**{k: np.concatenate(v) for k, v in parts.items()})

    def subset(self, mask: np.ndarray) -> "ScoredSet":
        return ScoredSet(self.scores[mask], self.y[mask], self.segment[mask], self.day_id[mask], self.t[mask])

    def filter(self, ts: TestFilter) -> "ScoredSet":
        return self.subset(np.isin(self.segment, [int(s) for s in ts.segments]))

    @property
    def n_anomalous(self) -> int:
        return int((self.y == Label.ANOMALOUS).sum())

    @property
    def has_both_classes(self) -> bool:
        return 0 < self.n_anomalous < len(self)


def _check_binary(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("Labels must be binary (0 normal, 1 anomalous)")
    return y.astype(np.int64)


def auroc(scores: np.ndarray, y: np.ndarray) -> float:
    """Rank AUROC; tied pairs count one half."""
    y = _check_binary(y)
    if len(np.unique(y)) < 2:
        raise UndefinedMetricError("AUROC needs both normal and anomalous samples")
    return float(roc_auc_score(y, np.asarray(scores, dtype=np.float64)))


def aupr(scores: np.ndarray, y: np.ndarray) -> float:
    """Step-wise area under precision-recall: Σ (R_k − R_{k−1})·P_k."""
    y = _check_binary(y)
    if not (y == 1).any():
        raise UndefinedMetricError("AUPR needs at least one anomalous sample")
    return float(average_precision_score(y, np.asarray(scores, dtype=np.float64)))


def classify(scores: np.ndarray, threshold: float) -> np.ndarray:
    return (np.asarray(scores, dtype=np.float64) >= threshold).astype(np.int64)


@dataclass
class ThresholdChoice:
    lambda_f: float
    f1: float
    lambda_g: float
    g_mean: float
    degenerate: bool = False


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """−∞, midpoints of consecutive distinct scores, +∞ (ascending)."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.concatenate(([-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]))


def _confusion(scores: np.ndarray, y: np.ndarray, thresholds: np.ndarray):
    pos = np.sort(scores[y == 1])
    neg = np.sort(scores[y == 0])
    tp = len(pos) - np.searchsorted(pos, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg, thresholds, side="left")
    fn = len(pos) - tp
    tn = len(neg) - fp
    return tp, fp, fn, tn


def select_thresholds(scores: np.ndarray, y: np.ndarray) -> ThresholdChoice:
    """λ_f = argmax F1, λ_g = argmax G-Mean over the candidate set; ties go to the smaller λ."""
    scores = np.asarray(scores, dtype=np.float64)
    y = _check_binary(y)
    if len(np.unique(y)) < 2:
        raise UndefinedMetricError("Threshold selection needs both classes in the validation set")
    cands = candidate_thresholds(scores)
    tp, fp, fn, tn = _confusion(scores, y, cands)
    f1 = 2 * tp / np.maximum(2 * tp + fp + fn, 1)
    g = np.sqrt((tp / (tp + fn)) * (tn / (tn + fp)))
    i_f, i_g = int(np.argmax(f1)), int(np.argmax(g))
    choice = ThresholdChoice(float(cands[i_f]), float(f1[i_f]), float(cands[i_g]), float(g[i_g]))
    choice.degenerate = bool(np.isinf(choice.lambda_f) or np.isinf(choice.lambda_g))
    if choice.degenerate:
        logger.warning(
            "Degenerate thresholds (λ_f=%s, λ_g=%s): the detector does not separate validation classes",
            choice.lambda_f, choice.lambda_g,
        )
    return choice


def _safe(fn, *args) -> float | None:
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def setup_metrics(test: ScoredSet, thresholds: ThresholdChoice) -> dict[str, dict[str, float | None]]:
    """Metrics per test filter; empty filters and undefined metrics come back as None."""
    out = {}
    for ts in TestFilter:
        part = test.filter(ts)
        if not len(part):
            out[ts.value] = {m: None for m in METRICS}
            continue
        y = part.y.astype(np.int64)
        row = {
            "auroc": _safe(auroc, part.scores, y),
            "aupr": _safe(aupr, part.scores, y),
        }
        for suffix, lam in (("f", thresholds.lambda_f), ("g", thresholds.lambda_g)):
            pred = classify(part.scores, lam)
            row[f"accuracy_{suffix}"] = float(accuracy_score(y, pred))
            row[f"f1_{suffix}"] = float(f1_score(y, pred, zero_division=0))
        out[ts.value] = row
    return out


# ---------------------------
# Reports
# ---------------------------

def mean_and_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


@dataclass
class EvalReport:
    detector: str
    setup: str
    seeds: list[int]
    per_seed: list[dict] = field(default_factory=list)
    thresholds: list[dict] = field(default_factory=list)
    config_hash: str = ""
    # Test metrics against the other label source, at the same thresholds.
    cross_label_source: str | None = None
    per_seed_cross: list[dict] = field(default_factory=list)

    @property
    def aggregate(self) -> dict[str, dict[str, dict | None]]:
        return _aggregate(self.per_seed)

    @property
    def cross_aggregate(self) -> dict[str, dict[str, dict | None]] | None:
        return _aggregate(self.per_seed_cross) if self.per_seed_cross else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregate"] = self.aggregate
        d["cross_aggregate"] = self.cross_aggregate
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["detector"], d["setup"], list(d["seeds"]), d.get("per_seed", []),
                   d.get("thresholds", []), d.get("config_hash", ""),
                   d.get("cross_label_source"), d.get("per_seed_cross", []))


def _aggregate(per_seed: Sequence[dict]) -> dict[str, dict[str, dict | None]]:
    out = {}
    for ts in TestFilter:
        row = {}
        for m in METRICS:
            values = [r[ts.value][m] for r in per_seed if r[ts.value][m] is not None]
            if not values:
                row[m] = None
                continue
            mean, se = mean_and_stderr(values)
            row[m] = {"mean": mean, "se": se, "n": len(values)}
        out[ts.value] = row
    return out


def _fmt(cell: dict | None) -> str:
    if cell is None:
        return "-"
    return f"{100 * cell['mean']:6.2f} ± {100 * cell['se']:.2f}"


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table: one row per detector/setup, AUROC and AUPR per test filter, then λ metrics."""
    ranking = [(ts.value, m) for ts in TestFilter for m in ("auroc", "aupr")]
    sections = [
        ("AUROC / AUPR", ranking, False),
        ("Accuracy / F1 at λ_f", [(ts.value, m) for ts in TestFilter for m in ("accuracy_f", "f1_f")], False),
        ("Accuracy / F1 at λ_g", [(ts.value, m) for ts in TestFilter for m in ("accuracy_g", "f1_g")], False),
    ]
    cross = next((r.cross_label_source for r in reports if r.cross_aggregate), None)
    if cross:
        sections.append((f"AUROC / AUPR against {LABEL_SOURCE_NAMES.get(cross, cross)}", ranking, True))
    label_w = max([len("Detector (setup)")] + [len(f"{r.detector} ({r.setup})") for r in reports])
    lines = []
    for title, cols, use_cross in sections:
        headers = [f"{ts} {m.split('_')[0].upper()}" for ts, m in cols]
        widths = [max(len(h), 15) for h in headers]
        lines.append(f"── {title} " + "─" * 20)
        lines.append("  ".join([f"{'Detector (setup)':<{label_w}}"] + [f"{h:>{w}}" for h, w in zip(headers, widths)]))
        for r in reports:
            agg = r.cross_aggregate if use_cross else r.aggregate
            if agg is None:
                continue
            cells = [_fmt(agg[ts][m]) for ts, m in cols]
            lines.append("  ".join([f"{f'{r.detector} ({r.setup})':<{label_w}}"]
                                   + [f"{c:>{w}}" for c, w in zip(cells, widths)]))
        lines.append("")
    return "\n".join(lines)


# ---------------------------
# Evaluation
# ---------------------------

def _evaluate_seed(detector: Detector, split: DatasetSplit, seed: int,
                   cross_test: Sequence[DaySequence] | None = None) -> tuple[dict, dict, dict | None]:
    detector.prepare(seed)
    validation = ScoredSet.from_days(split.validation, detector.score_days(split.validation))
    test_scores = detector.score_days(split.test)
    test = ScoredSet.from_days(split.test, test_scores)
    thresholds = select_thresholds(validation.scores, validation.y)
    metrics = setup_metrics(test, thresholds)
    logger.info(
        "%s seed %d: Ts#1 AUROC=%s Ts#2 AUROC=%s Ts#3 AUROC=%s",
        detector.name, seed, *(metrics[ts.value]["auroc"] for ts in TestFilter),
    )
    cross = setup_metrics(ScoredSet.from_days(cross_test, test_scores), thresholds) if cross_test else None
    return metrics, {"seed": seed, **asdict(thresholds)}, cross


def evaluate_setup(detector: Detector, split: DatasetSplit, seeds: Sequence[int], jobs: int = 1,
                   cross_test: Sequence[DaySequence] | None = None,
                   cross_label_source: str | None = None) -> EvalReport:
    """Score validation and test per seed, pick λ on validation, report per test filter.

    cross_test holds the test days with the other label source; their metrics reuse
    the test scores and the validation thresholds.
    """
    if not seeds:
        raise ConfigError("evaluate_setup needs at least one seed")
    if cross_test is not None and [len(d) for d in cross_test] != [len(d) for d in split.test]:
        raise ConfigError("cross_test must hold the same days and samples as the test set")
    seeds = [int(s) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda s: _evaluate_seed(copy.copy(detector), split, s, cross_test), seeds))
    else:
        results = [_evaluate_seed(detector, split, s, cross_test) for s in seeds]
    return EvalReport(
        detector=detector.name,
        setup=split.setup.value,
        seeds=seeds,
        per_seed=[m for m, _, _ in results],
        thresholds=[t for _, t, _ in results],
        cross_label_source=cross_label_source if cross_test else None,
        per_seed_cross=[c for _, _, c in results if c is not None],
    )


def evaluate_by_period(days: Sequence[DaySequence], scores: Sequence[np.ndarray],
                       period_days: int = 30) -> list[dict]:
    """AUROC/AUPR per block of period_days calendar days (deployment-month analogue)."""
    if period_days < 1:
        raise ConfigError("period_days must be >= 1")
    scored = ScoredSet.from_days(days, scores)
    if not len(scored):
        return []
    origin = min(d.t0 for d in days if len(d))
    period = np.floor((scored.t - origin) / (period_days * SECONDS_PER_DAY)).astype(np.int64)
    rows = []
    for p in np.unique(period):
        part = scored.subset(period == p)
        row = {"period": int(p), "n": len(part), "anomalous": part.n_anomalous}
        for ts in TestFilter:
            sub = part.filter(ts)
            row[ts.value] = {
                "auroc": _safe(auroc, sub.scores, sub.y) if len(sub) else None,
                "aupr": _safe(aupr, sub.scores, sub.y) if len(sub) else None,
            }
        rows.append(row)
    return rows


# ---------------------------
# Deployment cleaning
# ---------------------------

@dataclass
class CleaningResult:
    days: list[DaySequence]
    removed: list[dict]
    xi: np.ndarray
    threshold: float

    def summary(self) -> dict:
        xi = self.xi
        return {
            "threshold": self.threshold,
            "n_candidates": int(len(xi)),
            "n_removed": len(self.removed),
            "xi": {
                "min": float(xi.min()) if len(xi) else None,
                "median": float(np.median(xi)) if len(xi) else None,
                "p95": float(np.percentile(xi, 95)) if len(xi) else None,
                "max": float(xi.max()) if len(xi) else None,
            },
        }


def _nn_distances(query: np.ndarray, memory: np.ndarray, exclude_self: bool = False) -> np.ndarray:
    q = torch.from_numpy(np.ascontiguousarray(query, dtype=np.float64))
    m = torch.from_numpy(np.ascontiguousarray(memory, dtype=np.float64))
    d = torch.cdist(q, m, p=2, compute_mode="donot_use_mm_for_euclid_dist")
    if exclude_self:
        d.fill_diagonal_(float("inf"))
    return d.min(dim=1).values.numpy()


def leave_one_out_threshold(train_embeddings: np.ndarray, percentile: float = 99.0) -> float:
    if len(train_embeddings) < 2:
        logger.warning("Fewer than two training embeddings, cleaning threshold falls back to +inf")
        return float("inf")
    return float(np.percentile(_nn_distances(train_embeddings, train_embeddings, exclude_self=True), percentile))


def clean_deployment(
    deployment: Sequence[DaySequence],
    train_days: Sequence[DaySequence],
    checkpoint: ModelCheckpoint,
    threshold: float | None = None,
    percentile: float = 99.0,
) -> CleaningResult:
    """Drop deployment normals whose context embedding is far from every training context.

    ξ_i = min_j ‖c_i − c_j‖₂ over training samples j. Removed samples become
    UNLABELED: they stay in their day as context for later samples.
    """
    forecaster = Forecaster(checkpoint)
    train_emb = [e for e in forecaster.context_embeddings(train_days) if len(e)]
    if not train_emb:
        raise ConfigError("clean_deployment needs a non-empty training set")
    memory = np.concatenate(train_emb)
    if threshold is None:
        threshold = leave_one_out_threshold(memory, percentile)
    logger.info("Cleaning threshold ξ > %.4f", threshold)

    cleaned, removed, all_xi = [], [], []
    for day, emb in zip(deployment, forecaster.context_embeddings(deployment)):
        candidates = np.flatnonzero(day.labels == Label.NORMAL)
        if not len(candidates):
            cleaned.append(day)
            continue
        xi = _nn_distances(emb[candidates], memory)
        all_xi.append(xi)
        drop = set(candidates[xi > threshold].tolist())
        for i, v in zip(candidates, xi):
            if i in drop:
                removed.append({"day_id": day.day_id, "index": int(i), "t": day.samples[i].t, "xi": float(v)})
        cleaned.append(day.with_samples(
            replace(s, y=Label.UNLABELED) if i in drop else s for i, s in enumerate(day.samples)
        ))
    xi = np.concatenate(all_xi) if all_xi else np.empty(0)
    logger.info("Removed %d of %d deployment normals", len(removed), len(xi))
    return CleaningResult(cleaned, removed, xi, float(threshold))
