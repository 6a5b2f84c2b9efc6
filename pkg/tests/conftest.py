import numpy as np
import pytest

from core import AnomalyKind, DaySequence, Label, Sample, Segment, ThermalFrame
from simulate import SimConfig


def make_day(
    day_id: str = "day_0000",
    times=(0.0, 60.0, 180.0),
    means=None,
    shape=(4, 4),
    labels=None,
    segments=None,
    kinds=None,
) -> DaySequence:
    """Hand-built day with constant frames at the given means."""
    n = len(times)
    means = means if means is not None else [100.0] * n
    labels = labels if labels is not None else [Label.NORMAL] * n
    segments = segments if segments is not None else [Segment.M] * n
    kinds = kinds if kinds is not None else [AnomalyKind.NONE] * n
    samples = [
        Sample(
            frame=ThermalFrame(np.full(shape, m, dtype=np.float32)),
            t=float(t),
            y=Label(y),
            segment=Segment(seg),
            day_id=day_id,
            anomaly_kind=AnomalyKind(k),
        )
        for t, m, y, seg, k in zip(times, means, labels, segments, kinds)
    ]
    return DaySequence(day_id, samples)


@pytest.fixture
def day_factory():
    return make_day


@pytest.fixture
def tiny_sim():
    return SimConfig(
        H=8,
        W=8,
        n_days=6,
        day_length=7200.0,
        interarrival_min=60.0,
        interarrival_max=180.0,
        pixel_noise_sd=1.0,
        anomaly_rate=0.15,
        seed=0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
