import itertools
from dataclasses import replace

import numpy as np
import pytest
import torch

from baselines import FeatureDetector
from conftest import make_day
from core import DatasetSplit, DaySequence, Label, Sample, Segment, ThermalFrame
from errors import ConfigError, UndefinedMetricError
from evaluation import TestFilter as Ts
from evaluation import (
    EvalReport,
    ScoredSet,
    ThresholdChoice,
    _nn_distances,
    aupr,
    auroc,
    candidate_thresholds,
    classify,
    clean_deployment,
    evaluate_by_period,
    evaluate_setup,
    leave_one_out_threshold,
    mean_and_stderr,
    render_table,
    select_thresholds,
    setup_metrics,
)
from model import ForecastAD, ModelCheckpoint, NormStats, TrainConfig, spec_for_profile


# ---------------------------
# Oracles
# ---------------------------

def auroc_oracle(scores, y):
    pos = [s for s, t in zip(scores, y) if t == 1]
    neg = [s for s, t in zip(scores, y) if t == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def aupr_oracle(scores, y):
    scores, y = np.asarray(scores), np.asarray(y)
    n_pos = (y == 1).sum()
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = (pred & (y == 1)).sum()
        precision = tp / pred.sum()
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def threshold_oracle(scores, y):
    scores, y = np.asarray(scores, dtype=float), np.asarray(y)
    best_f, best_g = (-1.0, None), (-1.0, None)
    for lam in candidate_thresholds(scores):
        pred = scores >= lam
        tp = int((pred & (y == 1)).sum())
        fp = int((pred & (y == 0)).sum())
        fn = int((~pred & (y == 1)).sum())
        tn = int((~pred & (y == 0)).sum())
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        g = np.sqrt(tp / (tp + fn) * tn / (tn + fp))
        # strict improvement keeps the smallest λ on ties
        if f1 > best_f[0]:
            best_f = (f1, lam)
        if g > best_g[0]:
            best_g = (g, lam)
    return best_f, best_g


# ---------------------------
# Metrics
# ---------------------------

def test_auroc_and_aupr_match_brute_force(rng):
    for _ in range(20):
        n = int(rng.integers(4, 30))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        scores = np.round(rng.normal(size=n), 1)
        assert auroc(scores, y) == pytest.approx(auroc_oracle(scores, y))
        assert aupr(scores, y) == pytest.approx(aupr_oracle(scores, y))


def test_auroc_depends_only_on_ranking(rng):
    y = rng.integers(0, 2, 200)
    y[:2] = [0, 1]
    scores = np.round(rng.normal(size=200), 1)
    base = auroc(scores, y)
    assert auroc(np.exp(scores), y) == pytest.approx(base, abs=1e-12)
    assert auroc(3.0 * scores + 7.0, y) == pytest.approx(base, abs=1e-12)
    assert base + auroc(-scores, y) == pytest.approx(1.0, abs=1e-12)


def test_perfect_and_inverted_ranking():
    y = np.array([0, 0, 1, 1])
    assert auroc(np.array([0.1, 0.2, 0.8, 0.9]), y) == 1.0
    assert auroc(np.array([0.9, 0.8, 0.2, 0.1]), y) == 0.0
    assert aupr(np.array([0.1, 0.2, 0.8, 0.9]), y) == 1.0


def test_metrics_undefined_for_single_class():
    with pytest.raises(UndefinedMetricError):
        auroc(np.array([0.1, 0.2]), np.array([0, 0]))
    with pytest.raises(UndefinedMetricError):
        aupr(np.array([0.1, 0.2]), np.array([0, 0]))
    with pytest.raises(UndefinedMetricError):
        select_thresholds(np.array([0.1, 0.2]), np.array([1, 1]))


def test_classify_is_inclusive():
    assert classify(np.array([0.5, 0.49, 0.51]), 0.5).tolist() == [1, 0, 1]


def test_candidate_thresholds():
    c = candidate_thresholds(np.array([3.0, 1.0, 1.0, 2.0]))
    assert c[0] == -np.inf and c[-1] == np.inf
    np.testing.assert_allclose(c[1:-1], [1.5, 2.5])


def test_select_thresholds_matches_brute_force(rng):
    for _ in range(20):
        n = int(rng.integers(4, 25))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        scores = np.round(rng.normal(size=n) + y, 1)
        choice = select_thresholds(scores, y)
        (f1, lam_f), (g, lam_g) = threshold_oracle(scores, y)
        assert choice.f1 == pytest.approx(f1)
        assert choice.lambda_f == lam_f
        assert choice.g_mean == pytest.approx(g)
        assert choice.lambda_g == lam_g


def test_separable_scores_pick_a_separating_threshold():
    choice = select_thresholds(np.array([0.1, 0.2, 0.3, 0.9, 1.0]), np.array([0, 0, 0, 1, 1]))
    assert choice.lambda_f == pytest.approx(0.6)
    assert choice.f1 == 1.0 and choice.g_mean == 1.0
    assert not choice.degenerate


def test_inverted_scores_are_degenerate():
    choice = select_thresholds(np.array([0.0, 1.0, 2.0, 3.0]), np.array([1, 0, 0, 0]))
    assert choice.lambda_f == -np.inf
    assert choice.degenerate


def test_scored_set_drops_unlabeled_and_filters_segments():
    day = make_day(
        times=[0.0, 60.0, 120.0, 180.0],
        labels=[Label.NORMAL, Label.UNLABELED, Label.ANOMALOUS, Label.NORMAL],
        segments=[Segment.S, Segment.M, Segment.M, Segment.E],
    )
    scored = ScoredSet.from_days([day], [np.array([1.0, 2.0, 3.0, 4.0])])
    assert scored.scores.tolist() == [1.0, 3.0, 4.0]
    assert scored.filter(Ts.TS1).scores.tolist() == [3.0]
    assert scored.filter(Ts.TS2).scores.tolist() == [1.0, 4.0]
    assert len(scored.filter(Ts.TS3)) == 3
    assert scored.has_both_classes


def test_all_segments_filter_is_union_of_m_and_s_e(rng):
    days = [
        make_day(f"day_{d:04d}", times=[60.0 * i for i in range(12)],
                 labels=rng.integers(0, 2, 12).tolist(),
                 segments=rng.choice([Segment.S, Segment.M, Segment.E], 12).tolist())
        for d in range(3)
    ]
    scored = ScoredSet.from_days(days, [rng.normal(size=12) for _ in days])
    ts1, ts2, ts3 = (scored.filter(ts) for ts in (Ts.TS1, Ts.TS2, Ts.TS3))
    assert len(ts1) + len(ts2) == len(ts3) == len(scored)
    union = sorted(zip(ts1.day_id.tolist() + ts2.day_id.tolist(), ts1.t.tolist() + ts2.t.tolist()))
    assert union == sorted(zip(ts3.day_id.tolist(), ts3.t.tolist()))


def test_setup_metrics_leave_single_class_filters_undefined():
    day = make_day(
        times=[0.0, 60.0, 120.0, 180.0],
        labels=[Label.NORMAL, Label.NORMAL, Label.ANOMALOUS, Label.NORMAL],
        segments=[Segment.S, Segment.M, Segment.M, Segment.E],
    )
    scored = ScoredSet.from_days([day], [np.array([0.1, 0.2, 0.9, 0.3])])
    metrics = setup_metrics(scored, ThresholdChoice(0.5, 1.0, 0.5, 1.0))
    assert metrics["Ts#1"]["auroc"] == 1.0
    assert metrics["Ts#2"]["auroc"] is None
    assert metrics["Ts#2"]["aupr"] is None
    assert metrics["Ts#2"]["accuracy_f"] == 1.0
    assert metrics["Ts#2"]["f1_f"] == 0.0
    assert metrics["Ts#3"]["f1_g"] == 1.0


def test_mean_and_stderr():
    assert mean_and_stderr([0.5]) == (0.5, 0.0)
    mean, se = mean_and_stderr([1.0, 2.0, 3.0])
    assert mean == pytest.approx(2.0)
    assert se == pytest.approx(1.0 / np.sqrt(3.0))


def _row(auroc_value):
    cell = {"auroc": auroc_value, "aupr": auroc_value, "accuracy_f": 1.0, "f1_f": 1.0,
            "accuracy_g": 1.0, "f1_g": 1.0}
    return {"Ts#1": dict(cell), "Ts#2": {**cell, "auroc": None}, "Ts#3": dict(cell)}


def test_report_aggregate_and_table():
    report = EvalReport("ForecastAD", "Tr#2", [0, 1], per_seed=[_row(0.8), _row(0.9)])
    agg = report.aggregate
    assert agg["Ts#1"]["auroc"]["mean"] == pytest.approx(0.85)
    assert agg["Ts#1"]["auroc"]["n"] == 2
    assert agg["Ts#2"]["auroc"] is None
    back = EvalReport.from_dict(report.to_dict())
    assert back.aggregate == agg
    table = render_table([report])
    assert "ForecastAD (Tr#2)" in table
    assert " 85.00 ± 5.00" in table
    assert "-" in table.splitlines()[2]


# ---------------------------
# Evaluation over a split
# ---------------------------

def _cold_day(day_id, day_index, cold=(), n=8):
    """M-only day at 400 °C; indices in cold are anomalous and 100 °C colder."""
    means = [300.0 if i in cold else 400.0 for i in range(n)]
    labels = [Label.ANOMALOUS if i in cold else Label.NORMAL for i in range(n)]
    segments = [Segment.S] + [Segment.M] * (n - 2) + [Segment.E]
    times = [day_index * 86400.0 + 60.0 * i for i in range(n)]
    return make_day(day_id, times=times, means=means, labels=labels, segments=segments)


def test_evaluate_setup_with_a_perfect_feature():
    split = DatasetSplit(
        train=[_cold_day("day_0000", 0)],
        validation=[_cold_day("day_0001", 1, cold={3})],
        test=[_cold_day("day_0002", 2, cold={0, 4}), _cold_day("day_0003", 3)],
    )
    report = evaluate_setup(FeatureDetector("negative_mean"), split, seeds=[0, 1], jobs=2)
    assert report.detector == "negative_mean"
    assert report.setup == "Tr#2"
    assert len(report.per_seed) == 2
    agg = report.aggregate
    assert agg["Ts#1"]["auroc"]["mean"] == 1.0
    assert agg["Ts#3"]["auroc"]["mean"] == 1.0
    assert agg["Ts#3"]["f1_f"]["mean"] == 1.0
    assert report.thresholds[0]["lambda_f"] == pytest.approx(-350.0)


def test_evaluate_setup_reports_other_label_source_at_same_thresholds():
    split = DatasetSplit(
        train=[_cold_day("day_0000", 0)],
        validation=[_cold_day("day_0001", 1, cold={3})],
        test=[_cold_day("day_0002", 2, cold={0, 4}), _cold_day("day_0003", 3)],
    )
    # Other labels: one cold sample normal, one warm sample anomalous.
    relabelled = [_cold_day("day_0002", 2, cold={0, 4}), _cold_day("day_0003", 3)]
    relabelled[0].samples[4] = replace(relabelled[0].samples[4], y=Label.NORMAL)
    relabelled[1].samples[2] = replace(relabelled[1].samples[2], y=Label.ANOMALOUS)
    report = evaluate_setup(FeatureDetector("negative_mean"), split, seeds=[0],
                            cross_test=relabelled, cross_label_source="labels")
    assert report.aggregate["Ts#1"]["auroc"]["mean"] == 1.0
    assert report.cross_label_source == "labels"
    cross = report.cross_aggregate
    # anomalous scores -300 and -400; normals: one at -300, thirteen at -400
    assert cross["Ts#3"]["auroc"]["mean"] == pytest.approx(auroc(
        np.array([-300.0, -400.0] + [-300.0] + [-400.0] * 13), np.array([1, 1] + [0] * 14)))
    assert report.per_seed_cross[0]["Ts#3"]["accuracy_f"] < 1.0
    table = render_table([report])
    assert "── AUROC / AUPR against rule labels" in table

    with pytest.raises(ConfigError):
        evaluate_setup(FeatureDetector("negative_mean"), split, seeds=[0], cross_test=relabelled[:1])


def test_evaluate_setup_needs_seeds():
    split = DatasetSplit([], [], [])
    with pytest.raises(ConfigError):
        evaluate_setup(FeatureDetector("negative_mean"), split, seeds=[])


def test_evaluate_by_period_splits_calendar_blocks():
    days = [_cold_day("day_0000", 0, cold={2}), _cold_day("day_0040", 40, cold={3}), _cold_day("day_0041", 41)]
    scores = [-(d.stack().mean(axis=(1, 2))) for d in days]
    rows = evaluate_by_period(days, scores, period_days=30)
    assert [r["period"] for r in rows] == [0, 1]
    assert rows[0]["n"] == 8 and rows[1]["n"] == 16
    assert rows[1]["Ts#1"]["auroc"] == 1.0
    assert rows[0]["Ts#2"]["auroc"] is None


# ---------------------------
# Deployment cleaning
# ---------------------------

def test_nn_distances_match_brute_force(rng):
    q = rng.normal(size=(5, 3))
    m = rng.normal(size=(7, 3))
    expected = [min(np.linalg.norm(a - b) for b in m) for a in q]
    np.testing.assert_allclose(_nn_distances(q, m), expected)


def test_leave_one_out_threshold_excludes_self(rng):
    e = rng.normal(size=(10, 4))
    loo = [min(np.linalg.norm(e[i] - e[j]) for j in range(10) if j != i) for i in range(10)]
    assert leave_one_out_threshold(e, 99.0) == pytest.approx(np.percentile(loo, 99.0))
    assert leave_one_out_threshold(e[:1]) == np.inf


@pytest.fixture
def forecast_checkpoint():
    torch.manual_seed(0)
    spec = spec_for_profile("tiny")
    net = ForecastAD(spec, seed=0).eval()
    return ModelCheckpoint("forecast", spec, TrainConfig(batch_size=4), NormStats(40.0, 400.0),
                           {k: v.clone() for k, v in net.state_dict().items()}, K=3)


def _random_day(rng, day_id, labels):
    return DaySequence(day_id, [
        Sample(ThermalFrame(rng.uniform(40, 400, (8, 8))), t=60.0 * i, y=Label(y), segment=Segment.M,
               day_id=day_id)
        for i, y in enumerate(labels)
    ])


def test_clean_deployment_keeps_training_like_samples(forecast_checkpoint, rng):
    train_day = _random_day(rng, "day_0000", [Label.NORMAL] * 6)
    copy_day = DaySequence("day_0009", [replace(s, day_id="day_0009") for s in train_day.samples])
    result = clean_deployment([copy_day], [train_day], forecast_checkpoint, threshold=1e-6)
    assert result.removed == []
    np.testing.assert_allclose(result.xi, 0.0, atol=1e-6)


def test_clean_deployment_unlabels_far_normals_only(forecast_checkpoint, rng):
    train_day = _random_day(rng, "day_0000", [Label.NORMAL] * 6)
    deployment = _random_day(rng, "day_0001", [Label.NORMAL, Label.ANOMALOUS, Label.NORMAL, Label.NORMAL])
    result = clean_deployment([deployment], [train_day], forecast_checkpoint, threshold=-1.0)
    cleaned = result.days[0]
    assert cleaned.labels.tolist() == [Label.UNLABELED, Label.ANOMALOUS, Label.UNLABELED, Label.UNLABELED]
    assert len(cleaned) == len(deployment)
    assert [r["index"] for r in result.removed] == [0, 2, 3]
    assert result.summary()["n_removed"] == 3
