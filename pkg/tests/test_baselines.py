import numpy as np
import pytest
import torch

from baselines import (
    AutoencoderDetector,
    FeatureDetector,
    FeatureKind,
    autoencoder_score,
    feature_detectors,
    feature_score,
)
from conftest import make_day
from core import Sample, ThermalFrame
from errors import ConfigError
from model import ForecastAD, ModelCheckpoint, NormStats, TrainConfig, spec_for_profile


def _sample(pixels, t=0.0):
    return Sample(ThermalFrame(np.asarray(pixels, dtype=np.float64)), t=t)


def test_feature_scores_by_hand():
    s = _sample([[1.0, 2.0], [3.0, 6.0]], t=500.0)
    assert feature_score(s, "negative_mean") == pytest.approx(-3.0)
    assert feature_score(s, FeatureKind.NEGATIVE_MAX) == pytest.approx(-6.0)
    # population std of 1, 2, 3, 6
    assert feature_score(s, "negative_std") == pytest.approx(-np.sqrt(3.5))
    assert feature_score(s, "time_of_day", t0=200.0) == pytest.approx(300.0)


def test_time_of_day_needs_t0():
    with pytest.raises(ValueError):
        feature_score(_sample([[1.0]]), "time_of_day")


def test_unknown_feature_is_a_config_error():
    with pytest.raises(ConfigError):
        feature_score(_sample([[1.0]]), "negative_median")


def test_feature_detector_scores_days():
    day = make_day(times=[100.0, 160.0, 400.0], means=[300.0, 200.0, 350.0])
    (scores,) = FeatureDetector("time_of_day").score_days([day])
    assert scores.tolist() == [0.0, 60.0, 300.0]
    (scores,) = FeatureDetector("negative_mean").score_days([day])
    assert scores.tolist() == [-300.0, -200.0, -350.0]


def test_feature_detectors_cover_every_kind():
    assert [d.name for d in feature_detectors()] == ["time_of_day", "negative_mean", "negative_max", "negative_std"]


@pytest.fixture
def ae_checkpoint():
    torch.manual_seed(0)
    spec = spec_for_profile("tiny")
    net = ForecastAD(spec, seed=0).eval()
    return ModelCheckpoint("pretrain", spec, TrainConfig(batch_size=3), NormStats(40.0, 400.0),
                           {k: v.clone() for k, v in net.state_dict().items()})


def test_autoencoder_detector_matches_single_sample_scores(ae_checkpoint, rng):
    day = make_day(times=[60.0 * i for i in range(7)], shape=(8, 8))
    day = day.with_samples(
        Sample(ThermalFrame(rng.uniform(40, 400, (8, 8))), t=s.t, day_id=s.day_id) for s in day.samples
    )
    detector = AutoencoderDetector(lambda seed: ae_checkpoint)
    with pytest.raises(RuntimeError):
        detector.score_days([day])
    detector.prepare(0)
    (scores,) = detector.score_days([day])
    assert len(scores) == 7
    for sample, value in zip(day.samples, scores):
        assert value == pytest.approx(autoencoder_score(sample, ae_checkpoint), rel=1e-5)


def test_autoencoder_ignores_timestamps(ae_checkpoint, rng):
    frames = [rng.uniform(40, 400, (8, 8)) for _ in range(4)]
    a = make_day(times=[0.0, 60.0, 120.0, 180.0], shape=(8, 8))
    b = make_day(times=[0.0, 1000.0, 5000.0, 9000.0], shape=(8, 8))
    a = a.with_samples(Sample(ThermalFrame(f), t=s.t, day_id=s.day_id) for f, s in zip(frames, a.samples))
    b = b.with_samples(Sample(ThermalFrame(f), t=s.t, day_id=s.day_id) for f, s in zip(frames, b.samples))
    detector = AutoencoderDetector(lambda seed: ae_checkpoint)
    detector.prepare(0)
    sa, sb = detector.score_days([a, b])
    np.testing.assert_allclose(sa, sb)
