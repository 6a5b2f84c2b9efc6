from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import make_day
from core import Label, ThermalFrame, build_context_windows
from errors import ConfigError, MissingArtifactError, NumericalError
from model import (
    MAP_SIGMA,
    ForecastAD,
    Forecaster,
    MapStats,
    ModelCheckpoint,
    ModelSpec,
    NormStats,
    TrainConfig,
    _forecast_chunk,
    _prepare_day,
    anomaly_map,
    encode_time,
    error_map,
    load_checkpoint,
    preprocess_batch,
    pretrain,
    save_checkpoint,
    spec_for_profile,
    squared_error,
    train,
)
from simulate import simulate_day

TINY = spec_for_profile("tiny")


def bilinear_oracle(img, out_size):
    """Half-pixel-centre bilinear resize, edges clamped."""
    h, w = img.shape
    out = np.zeros((out_size, out_size))

    def src(i, n_in):
        s = (i + 0.5) * n_in / out_size - 0.5
        s = max(s, 0.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, s - i0

    for i in range(out_size):
        y0, y1, ly = src(i, h)
        for j in range(out_size):
            x0, x1, lx = src(j, w)
            top = img[y0, x0] * (1 - lx) + img[y0, x1] * lx
            bottom = img[y1, x0] * (1 - lx) + img[y1, x1] * lx
            out[i, j] = top * (1 - ly) + bottom * ly
    return out


def random_day(rng, n=12, size=8, day_id="day_0000"):
    times = np.cumsum(rng.uniform(60, 300, n))
    day = make_day(day_id, times=times.tolist(), shape=(size, size))
    return day.with_samples(
        replace(s, frame=ThermalFrame(rng.uniform(40, 400, (size, size)))) for s in day.samples
    )


def tiny_checkpoint(net, stats, **kw):
    cfg = TrainConfig(batch_size=4, use_tau=net.use_tau, use_delta=net.use_delta, **kw)
    return ModelCheckpoint("forecast", net.spec, cfg, stats,
                           {k: v.clone() for k, v in net.state_dict().items()}, seed=0, K=3)


# ---------------------------
# Specs and preprocessing
# ---------------------------

@pytest.mark.parametrize("profile", ["full", "desk", "tiny"])
def test_profiles_build_consistent_shapes(profile):
    spec = spec_for_profile(profile)
    net = ForecastAD(spec, zero_state=True).eval()
    x = torch.rand(2, 3, spec.input_size, spec.input_size)
    with torch.no_grad():
        z = net.encoder(x)
        assert z.shape == (2, spec.latent_dim)
        assert net.reconstruct(x).shape == x.shape


def test_full_profile_dimensions():
    spec = spec_for_profile("full")
    assert spec.encoder_output_size == 1
    assert spec.flatten_dim == 128
    assert spec.decoder_stem_size == 16
    assert spec.joint_dim == 144


def test_spec_rejects_undivisible_input():
    with pytest.raises(ConfigError):
        ModelSpec(input_size=60)
    with pytest.raises(ConfigError):
        spec_for_profile("huge")


def test_batch_size_must_allow_batch_norm():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)


def test_norm_stats_reject_degenerate_range():
    with pytest.raises(NumericalError):
        NormStats(5.0, 5.0)


def test_preprocess_matches_bilinear_oracle(rng):
    img = rng.uniform(0, 100, (4, 5))
    out = preprocess_batch(img[None], NormStats(0.0, 100.0), 8)
    assert out.shape == (1, 3, 8, 8)
    expected = bilinear_oracle(img, 8) / 100.0
    for c in range(3):
        np.testing.assert_allclose(out[0, c].numpy(), expected, atol=1e-5)


def test_preprocess_upsamples_two_by_two_by_hand():
    out = preprocess_batch(np.array([[[0.0, 1.0], [2.0, 3.0]]]), NormStats(0.0, 3.0), 4)[0, 0].numpy()
    w = np.array([0.0, 0.25, 0.75, 1.0])
    expected = (2.0 * w[:, None] + w[None, :]) / 3.0
    np.testing.assert_allclose(out, expected, atol=1e-6)
    np.testing.assert_allclose(out, bilinear_oracle(np.array([[0.0, 1.0], [2.0, 3.0]]), 4) / 3.0, atol=1e-6)


def test_preprocess_clamps_to_unit_range():
    out = preprocess_batch(np.array([[[0.0, 50.0], [150.0, 100.0]]]), NormStats(10.0, 110.0), 2)
    assert out.min().item() == 0.0
    assert out.max().item() == 1.0


# ---------------------------
# Time encoding
# ---------------------------

def test_encode_time_at_zero():
    e = encode_time(0.0)
    assert e.shape == (16,)
    np.testing.assert_allclose(e[0::2], 0.0)
    np.testing.assert_allclose(e[1::2], 1.0)


def test_encode_time_known_values():
    e = encode_time(3.0, dim=4, period=100.0)
    np.testing.assert_allclose(e, [np.sin(3.0), np.cos(3.0), np.sin(0.3), np.cos(0.3)])


def test_encode_time_is_injective_within_a_day():
    s = np.linspace(0.0, 600.0, 2001)
    slowest = encode_time(s)[:, 15]
    assert np.all(np.diff(slowest) < 0)


def test_encode_time_rejects_negative():
    with pytest.raises(ValueError):
        encode_time(-1.0)


def test_time_encoder_module_matches_numpy():
    net = ForecastAD(TINY)
    s = np.array([0.0, 1.5, 47.0, 600.0])
    got = net.time_encoder(torch.tensor(s, dtype=torch.float64).float()).double().numpy()
    np.testing.assert_allclose(got, encode_time(s), atol=1e-4)


# ---------------------------
# Gradient check
# ---------------------------

def _relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-3)


def _check_gradients(net, loss_fn, n_params=100, h=1e-6, seed=0):
    """Worst relative error over n_params entries of the parameters the loss reaches."""
    net.zero_grad(set_to_none=True)
    loss_fn().backward()
    params = [p for p in net.parameters() if p.requires_grad and p.grad is not None]
    analytic = [p.grad.detach().clone().view(-1) for p in params]
    assert sum(p.numel() for p in params) >= n_params

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            k = int(flat - offsets[pi])
            view = params[pi].data.view(-1)
            original = view[k].item()
            view[k] = original + h
            plus = loss_fn().item()
            view[k] = original - h
            minus = loss_fn().item()
            view[k] = original
            numeric = (plus - minus) / (2 * h)
            worst = max(worst, _relative_error(analytic[pi][k].item(), numeric))
    return worst


def test_forecast_loss_gradients_match_finite_differences(rng):
    torch.manual_seed(0)
    net = ForecastAD(TINY, seed=0).double().eval()
    data = _prepare_day(random_day(rng, n=6), K=3, epsilon=1e-5)
    stats = NormStats(40.0, 400.0)

    def loss():
        x, x_hat = _forecast_chunk(net, data, 0, data.n, stats)
        return squared_error(x, x_hat).mean()

    assert _check_gradients(net, loss) <= 1e-4


def test_reconstruction_loss_gradients_match_finite_differences(rng):
    torch.manual_seed(1)
    net = ForecastAD(TINY, seed=1).double().eval()
    x = preprocess_batch(rng.uniform(40, 400, (4, 8, 8)), NormStats(40.0, 400.0), 8).double()

    def loss():
        return squared_error(x, net.reconstruct(x)).mean()

    assert _check_gradients(net, loss) <= 1e-4
    reached = {name.split(".")[0] for name, p in net.named_parameters() if p.grad is not None}
    assert reached == {"encoder", "decoder"}


def test_forecast_loss_reaches_every_parameter(rng):
    torch.manual_seed(2)
    net = ForecastAD(TINY, seed=2).double().eval()
    data = _prepare_day(random_day(rng, n=6), K=3, epsilon=1e-5)
    x, x_hat = _forecast_chunk(net, data, 0, data.n, NormStats(40.0, 400.0))
    net.zero_grad(set_to_none=True)
    squared_error(x, x_hat).mean().backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        assert p.grad.abs().sum().item() > 0, name


# ---------------------------
# Inference behaviour
# ---------------------------

def test_time_toggles_off_ignore_timestamps(rng):
    torch.manual_seed(0)
    net = ForecastAD(TINY, seed=0, use_tau=False, use_delta=False).eval()
    forecaster = Forecaster(tiny_checkpoint(net, NormStats(40.0, 400.0)), net)
    day = random_day(rng, n=10)
    shifted = day.with_samples(replace(s, t=s.t * 3.0 + 500.0) for s in day.samples)
    a, b = forecaster.score_days([day, shifted])
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_time_toggles_on_depend_on_timestamps(rng):
    torch.manual_seed(0)
    net = ForecastAD(TINY, seed=0).eval()
    forecaster = Forecaster(tiny_checkpoint(net, NormStats(40.0, 400.0)), net)
    day = random_day(rng, n=10)
    shifted = day.with_samples(replace(s, t=s.t * 3.0 + 500.0) for s in day.samples)
    a, b = forecaster.score_days([day, shifted])
    assert not np.allclose(a[1:], b[1:])


def test_single_window_score_matches_batched_scores(rng):
    torch.manual_seed(0)
    net = ForecastAD(TINY, seed=0).eval()
    forecaster = Forecaster(tiny_checkpoint(net, NormStats(40.0, 400.0)), net)
    day = random_day(rng, n=9)
    batched = forecaster.score_days([day])[0]
    windows = build_context_windows(day, K=3)
    for i in (0, 4, 8):
        assert forecaster.score(day.samples[i], windows[i]) == pytest.approx(batched[i], rel=1e-4)
    assert np.all(batched >= 0)


def test_single_window_context_matches_batched_embeddings(rng):
    torch.manual_seed(0)
    net = ForecastAD(TINY, seed=0).eval()
    forecaster = Forecaster(tiny_checkpoint(net, NormStats(40.0, 400.0)), net)
    day = random_day(rng, n=7)
    batched = forecaster.context_embeddings([day])[0]
    assert batched.shape == (7, TINY.latent_dim)
    windows = build_context_windows(day, K=3)
    for i in (0, 3, 6):
        np.testing.assert_allclose(forecaster.encode_context(windows[i]), batched[i], rtol=1e-4, atol=1e-5)


def test_zero_state_and_seeded_state_differ():
    a = ForecastAD(TINY, seed=3)
    b = ForecastAD(TINY, seed=3)
    c = ForecastAD(TINY, zero_state=True)
    assert torch.equal(a.h0, b.h0)
    assert torch.count_nonzero(c.h0) == 0


def test_checkpoint_round_trip(tmp_path, rng):
    torch.manual_seed(0)
    net = ForecastAD(TINY, seed=0).eval()
    checkpoint = tiny_checkpoint(net, NormStats(40.0, 400.0))
    checkpoint.map_stats = MapStats(0.0, 0.5)
    checkpoint.history = {"train_loss": [1.0, 0.5]}
    path = tmp_path / "ck.pt"
    save_checkpoint(path, checkpoint)
    back = load_checkpoint(path)
    assert back.spec == checkpoint.spec
    assert back.map_stats == checkpoint.map_stats
    assert back.history == checkpoint.history
    day = random_day(rng, n=6)
    np.testing.assert_allclose(Forecaster(back).score_days([day])[0],
                               Forecaster(checkpoint, net).score_days([day])[0], rtol=1e-6)


def test_missing_checkpoint_names_producer(tmp_path):
    with pytest.raises(MissingArtifactError, match="pretrain"):
        load_checkpoint(tmp_path / "nope.pt", producer="pretrain")


# ---------------------------
# Training
# ---------------------------

def test_pretrain_and_train_on_clean_days(tiny_sim):
    clean = replace(tiny_sim, anomaly_rate=0.0)
    days = [simulate_day(clean, i) for i in range(2)]
    cfg = TrainConfig(batch_size=8, pretrain_epochs=1, train_epochs=4)
    pre = pretrain(days, TINY, cfg, seed=0)
    assert len(pre.history["pretrain_loss"]) == 1
    checkpoint = train(days, TINY, cfg, K=3, seed=0, pretrained=pre, validation=days[:1])
    assert len(checkpoint.history["train_loss"]) == 4
    assert np.isfinite(checkpoint.history["val_loss"]).all()
    assert checkpoint.history["train_loss"][-1] < checkpoint.history["initial_loss"]
    assert checkpoint.map_stats is not None and checkpoint.map_stats.max > checkpoint.map_stats.min
    scores = Forecaster(checkpoint).score_days(days)
    assert all(np.isfinite(s).all() and (s >= 0).all() for s in scores)


def _fifty_clean_frames(tiny_sim):
    day = simulate_day(replace(tiny_sim, anomaly_rate=0.0), 0)
    assert len(day) >= 50
    return day.with_samples(day.samples[:50])


def test_pretrain_halves_reconstruction_loss(tiny_sim):
    day = _fifty_clean_frames(tiny_sim)
    pre = pretrain([day], TINY, TrainConfig(batch_size=8, pretrain_epochs=40), seed=0)
    losses = pre.history["pretrain_loss"]
    assert all(v >= 0 for v in losses)
    assert losses[-1] <= 0.5 * pre.history["pretrain_initial_loss"]


def test_pretrained_weights_start_training_lower(tiny_sim):
    day = _fifty_clean_frames(tiny_sim)
    cfg = TrainConfig(batch_size=8, pretrain_epochs=40, train_epochs=1)
    pre = pretrain([day], TINY, cfg, seed=0)
    warm = train([day], TINY, cfg, K=3, seed=0, pretrained=pre)
    cold = train([day], TINY, replace(cfg, use_pretrained=False), K=3, seed=0)
    assert warm.history["initial_loss"] < cold.history["initial_loss"]


def test_train_rejects_anomalous_days():
    day = make_day(labels=[Label.NORMAL, Label.ANOMALOUS, Label.NORMAL])
    with pytest.raises(ConfigError):
        train([day], TINY, TrainConfig(use_pretrained=False), K=2)


# ---------------------------
# Anomaly maps
# ---------------------------

def test_error_map_blurs_an_impulse_with_truncated_gaussian():
    x = np.zeros((33, 33))
    x[16, 16] = 1.0
    out = error_map(x, np.zeros_like(x), sigma=MAP_SIGMA)
    radius = int(2.0 * MAP_SIGMA + 0.5)
    k = np.arange(-radius, radius + 1)
    g = np.exp(-k ** 2 / (2 * MAP_SIGMA ** 2))
    g /= g.sum()
    expected = np.zeros_like(x)
    expected[16 - radius:16 + radius + 1, 16 - radius:16 + radius + 1] = np.outer(g, g)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_error_map_averages_channels():
    x = np.zeros((3, 9, 9))
    x[0] = 3.0
    out = error_map(x, np.zeros_like(x), sigma=1.0)
    np.testing.assert_allclose(out, 3.0, rtol=1e-9)


def test_anomaly_map_normalises_and_clips():
    x = np.zeros((9, 9))
    x[4, 4] = 10.0
    out = anomaly_map(x, np.zeros_like(x), MapStats(0.0, 0.1), sigma=1.0)
    assert out.min() >= 0.0 and out.max() == 1.0


def test_anomaly_map_degenerate_stats_give_zeros():
    x = np.ones((5, 5))
    assert not anomaly_map(x, np.zeros_like(x), MapStats(1.0, 1.0)).any()
    assert not anomaly_map(x, np.zeros_like(x), None).any()
