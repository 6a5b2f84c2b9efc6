#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

"""
ForecastAD networks, training and scoring.

An image encoder maps each frame to a latent z. The two time offsets of a
sample (inter-arrival τ and elapsed δ, both in minutes) are encoded
sinusoidally and summed, then concatenated to z. An LSTM summarises the K
prior joint embeddings into a context c, and the decoder forecasts the
target frame from [c ⊕ (ψ + Ψ)]. The anomaly score is the squared
Frobenius distance between the preprocessed frame and its forecast.

Pre-training fits encoder and decoder as an autoencoder on [z ⊕ 0] so the
decoder weights carry over to the forecasting stage.
"""

from __future__ import annotations

import io
import logging
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import nn

from core import (
    EPSILON,
    ContextWindow,
    DaySequence,
    Label,
    ThermalFrame,
    atomic_write_bytes,
    compute_time_offsets,
    window_indices,
)
from errors import ConfigError, MissingArtifactError, NumericalError

logger = logging.getLogger("forecastad.model")

CHECKPOINT_FORMAT_VERSION = 1
BN_EPS = 1e-4
MAP_SIGMA = 4.0
MAP_TRUNCATE = 2.0


# ---------------------------
# Specs and configs
# ---------------------------

@dataclass
class ModelSpec:
    """Layer layout. Stem and flatten sizes are derived from it."""

    profile: str = "desk"
    input_size: int = 64
    encoder_channels: tuple = (16, 32, 64)
    decoder_channels: tuple = (64, 32, 32, 16, 3)
    latent_dim: int = 128
    time_dim: int = 16
    time_period: float = 1000.0
    lstm_layers: int = 4

    def __post_init__(self) -> None:
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if not self.encoder_channels:
            raise ConfigError("model.encoder_channels must not be empty")
        if len(self.decoder_channels) < 2 or self.decoder_channels[-1] != 3:
            raise ConfigError("model.decoder_channels needs at least two entries ending in 3")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError("model.time_dim must be a positive even number")
        if self.latent_dim < 1 or self.lstm_layers < 1:
            raise ConfigError("model.latent_dim and model.lstm_layers must be >= 1")
        if self.encoder_output_size < 1:
            raise ConfigError(
                f"model.input_size {self.input_size} is too small for {len(self.encoder_channels)} encoder blocks"
            )
        n_up = len(self.decoder_channels) - 1
        if self.input_size % (2 ** n_up):
            raise ConfigError(f"model.input_size {self.input_size} is not divisible by 2**{n_up}")

    @property
    def encoder_output_size(self) -> int:
        s = self.input_size
        for _ in self.encoder_channels:
            s = (s - 1) // 2 + 1  # conv k5 p2 s2
            s //= 2  # 2x2 max pool
        return s

    @property
    def flatten_dim(self) -> int:
        return self.encoder_channels[-1] * self.encoder_output_size ** 2

    @property
    def decoder_stem_size(self) -> int:
        return self.input_size // 2 ** (len(self.decoder_channels) - 1)

    @property
    def joint_dim(self) -> int:
        return self.latent_dim + self.time_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d


PROFILES = {
    "full": ModelSpec("full", 256, (32, 64, 128, 128), (128, 64, 64, 32, 3), 128, 16, 1000.0, 4),
    "desk": ModelSpec("desk", 64, (16, 32, 64), (64, 32, 32, 16, 3), 128, 16, 1000.0, 4),
    "tiny": ModelSpec("tiny", 8, (4,), (4, 4, 3), 8, 16, 1000.0, 1),
}
PROFILE_ALIASES = {"paper": "full"}


def canonical_profile(profile: str) -> str:
    return PROFILE_ALIASES.get(profile, profile)


def spec_for_profile(profile: str, **overrides) -> ModelSpec:
    profile = canonical_profile(profile)
    if profile not in PROFILES:
        raise ConfigError(f"Unknown model profile {profile!r} (choose from {sorted(PROFILES)})")
    return replace(PROFILES[profile], **overrides)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 32
    pretrain_epochs: int = 20
    train_epochs: int = 20
    use_tau: bool = True
    use_delta: bool = True
    use_pretrained: bool = True
    zero_state: bool = False
    device: str = "cpu"

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError("train.lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if int(self.batch_size) < 2:
            raise ConfigError("train.batch_size must be >= 2 (batch normalization needs two samples)")
        if int(self.pretrain_epochs) < 0 or int(self.train_epochs) < 0:
            raise ConfigError("train epochs must be >= 0")


@dataclass
class NormStats:
    """Global min/max of raw training pixels used for min-max normalisation."""

    min: float
    max: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.min) or not np.isfinite(self.max) or not self.max > self.min:
            raise NumericalError(f"Degenerate normalisation stats: min={self.min} max={self.max}")


@dataclass
class MapStats:
    min: float
    max: float


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# ---------------------------
# Preprocessing and time encoding
# ---------------------------

def fit_norm_stats(days: Sequence[DaySequence]) -> NormStats:
    lo, hi = np.inf, -np.inf
    for day in days:
        for s in day.samples:
            lo = min(lo, float(s.frame.pixels.min()))
            hi = max(hi, float(s.frame.pixels.max()))
    if not np.isfinite(lo):
        raise ConfigError("Cannot fit normalisation stats on an empty training set")
    return NormStats(lo, hi)


def preprocess_batch(pixels: np.ndarray, stats: NormStats, size: int) -> torch.Tensor:
    """(n, H, W) raw temperatures -> (n, 3, size, size) in [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).unsqueeze(1)
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    x = ((x - stats.min) / (stats.max - stats.min)).clamp(0.0, 1.0)
    return x.repeat(1, 3, 1, 1)


def preprocess(frame: ThermalFrame, stats: NormStats, size: int = 256) -> torch.Tensor:
    return preprocess_batch(frame.pixels[None], stats, size)[0]


def _time_frequencies(dim: int, period: float) -> np.ndarray:
    j = np.arange(dim // 2, dtype=np.float64)
    return 1.0 / period ** (2.0 * j / dim)


def encode_time(s: float | np.ndarray, dim: int = 16, period: float = 1000.0) -> np.ndarray:
    """Sinusoidal encoding of s minutes: even slots sin, odd slots cos."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("encode_time expects s >= 0")
    angles = s[..., None] * _time_frequencies(dim, period)
    out = np.empty(s.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


class TimeEncoder(nn.Module):
    def __init__(self, dim: int = 16, period: float = 1000.0) -> None:
        super().__init__()
        self.dim = dim
        self.register_buffer("freqs", torch.from_numpy(_time_frequencies(dim, period)).float())

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        angles = s.unsqueeze(-1) * self.freqs
        return torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1).flatten(-2)


def joint_embedding(
    z: torch.Tensor,
    psi: torch.Tensor,
    Psi: torch.Tensor,
    use_tau: bool = True,
    use_delta: bool = True,
) -> torch.Tensor:
    """[z ⊕ (ψ + Ψ)]; a disabled toggle zeroes its encoding."""
    return torch.cat((z, _time_sum(psi, Psi, use_tau, use_delta)), dim=-1)


def _time_sum(psi: torch.Tensor, Psi: torch.Tensor, use_tau: bool, use_delta: bool) -> torch.Tensor:
    t = torch.zeros_like(psi)
    if use_tau:
        t = t + psi
    if use_delta:
        t = t + Psi
    return t


# ---------------------------
# Networks
# ---------------------------

class ImageEncoder(nn.Module):
    def __init__(self, spec: ModelSpec) -> None:
        super().__init__()
        blocks = []
        in_ch = 3
        for out_ch in spec.encoder_channels:
            blocks += [
                nn.Conv2d(in_ch, out_ch, kernel_size=5, stride=2, padding=2),
                nn.BatchNorm2d(out_ch, eps=BN_EPS),
                nn.LeakyReLU(),
                nn.MaxPool2d(2),
            ]
            in_ch = out_ch
        self.features = nn.Sequential(*blocks)
        self.fc = nn.Linear(spec.flatten_dim, spec.latent_dim)
        self.bn = nn.BatchNorm1d(spec.latent_dim, eps=BN_EPS)
        self._flatten_dim = spec.flatten_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x).flatten(1)
        assert h.shape[1] == self._flatten_dim, f"encoder flatten {h.shape[1]} != {self._flatten_dim}"
        return self.bn(self.fc(h))


class ImageDecoder(nn.Module):
    def __init__(self, spec: ModelSpec) -> None:
        super().__init__()
        ch = spec.decoder_channels
        self.stem_channels = ch[0]
        self.stem_size = spec.decoder_stem_size
        self.stem = nn.Linear(spec.joint_dim, ch[0] * self.stem_size ** 2)
        layers = []
        for i, (c_in, c_out) in enumerate(zip(ch[:-1], ch[1:])):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.ConvTranspose2d(c_in, c_out, kernel_size=5, stride=1, padding=2),
            ]
            if i < len(ch) - 2:
                layers += [nn.BatchNorm2d(c_out, eps=BN_EPS), nn.LeakyReLU()]
        self.layers = nn.Sequential(*layers)
        self._output_size = spec.input_size

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        h = self.stem(v).view(-1, self.stem_channels, self.stem_size, self.stem_size)
        out = torch.sigmoid(self.layers(h))
        assert out.shape[-1] == self._output_size, f"decoder output {out.shape[-1]} != {self._output_size}"
        return out


class ForecastAD(nn.Module):
    def __init__(self, spec: ModelSpec, seed: int = 0, use_tau: bool = True,
                 use_delta: bool = True, zero_state: bool = False) -> None:
        super().__init__()
        self.spec = spec
        self.use_tau = use_tau
        self.use_delta = use_delta
        self.encoder = ImageEncoder(spec)
        self.decoder = ImageDecoder(spec)
        self.time_encoder = TimeEncoder(spec.time_dim, spec.time_period)
        self.context_encoder = nn.LSTM(
            input_size=spec.joint_dim,
            hidden_size=spec.latent_dim,
            num_layers=spec.lstm_layers,
            batch_first=True,
        )
        shape = (spec.lstm_layers, 1, spec.latent_dim)
        if zero_state:
            h0, c0 = torch.zeros(shape), torch.zeros(shape)
        else:
            g = torch.Generator().manual_seed(int(seed))
            h0, c0 = torch.randn(shape, generator=g), torch.randn(shape, generator=g)
        self.register_buffer("h0", h0)
        self.register_buffer("c0", c0)

    def time_features(self, tau_min: torch.Tensor, delta_min: torch.Tensor) -> torch.Tensor:
        return _time_sum(self.time_encoder(tau_min), self.time_encoder(delta_min), self.use_tau, self.use_delta)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encoder(x)
        return self.decoder(torch.cat((z, z.new_zeros(z.shape[0], self.spec.time_dim)), dim=1))

    def context(self, z_ctx: torch.Tensor, tau_ctx: torch.Tensor, delta_ctx: torch.Tensor) -> torch.Tensor:
        """(B, K, d′) latents and (B, K) offsets -> (B, d′) top-layer final hidden state."""
        steps = torch.cat((z_ctx, self.time_features(tau_ctx, delta_ctx)), dim=-1)
        b = steps.shape[0]
        state = (self.h0.expand(-1, b, -1).contiguous(), self.c0.expand(-1, b, -1).contiguous())
        out, _ = self.context_encoder(steps, state)
        return out[:, -1]

    def forecast(self, c: torch.Tensor, tau_t: torch.Tensor, delta_t: torch.Tensor) -> torch.Tensor:
        return self.decoder(torch.cat((c, self.time_features(tau_t, delta_t)), dim=-1))


def squared_error(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-sample squared Frobenius norm over all non-batch dims."""
    return ((x - x_hat) ** 2).flatten(1).sum(dim=1)


# ---------------------------
# Per-day tensors
# ---------------------------

@dataclass
class _DayData:
    day: DaySequence
    pixels: np.ndarray
    tau: np.ndarray
    delta: np.ndarray
    ctx: np.ndarray

    @property
    def n(self) -> int:
        return len(self.pixels)


def _prepare_day(day: DaySequence, K: int, epsilon: float) -> _DayData:
    offsets = np.array(compute_time_offsets(day, epsilon), dtype=np.float64).reshape(-1, 2) / 60.0
    return _DayData(day, day.stack(), offsets[:, 0], offsets[:, 1], window_indices(len(day), K))


def _chunks(n: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def _as_tensor(a: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(a, dtype=like.dtype, device=like.device)


def _forecast_chunk(net: ForecastAD, data: _DayData, a: int, b: int, stats: NormStats,
                    z_day: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Forecast targets a..b-1 of one day. Returns (x, x̂).

    Without z_day the context frames are encoded here (training); with it the
    precomputed latents are gathered (inference).
    """
    param = next(net.parameters())
    size = net.spec.input_size
    ctx = data.ctx[a:b]
    if z_day is None:
        lo = int(ctx.min())
        x_all = preprocess_batch(data.pixels[lo:b], stats, size).to(param)
        z = net.encoder(x_all)
        z_ctx = z[torch.as_tensor(ctx - lo, device=param.device)]
        x = x_all[a - lo:]
    else:
        z_ctx = z_day[torch.as_tensor(ctx, device=param.device)]
        x = preprocess_batch(data.pixels[a:b], stats, size).to(param)
    c = net.context(z_ctx, _as_tensor(data.tau[ctx], param), _as_tensor(data.delta[ctx], param))
    x_hat = net.forecast(c, _as_tensor(data.tau[a:b], param), _as_tensor(data.delta[a:b], param))
    return x, x_hat


@torch.no_grad()
def _encode_day(net: ForecastAD, data: _DayData, stats: NormStats, batch_size: int) -> torch.Tensor:
    param = next(net.parameters())
    parts = [
        net.encoder(preprocess_batch(data.pixels[a:b], stats, net.spec.input_size).to(param))
        for a, b in _chunks(data.n, batch_size)
    ]
    return torch.cat(parts)


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int, lr: float) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(
            f"{stage}: non-finite loss {loss.item()} at epoch {epoch} step {step} (lr={lr}); "
            "try a smaller --train.lr"
        )


def _optimizer(net: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


# ---------------------------
# Checkpoints
# ---------------------------

@dataclass
class ModelCheckpoint:
    kind: str
    spec: ModelSpec
    train_config: TrainConfig
    norm_stats: NormStats
    state_dict: dict
    seed: int = 0
    K: int = 30
    epsilon: float = EPSILON
    map_stats: MapStats | None = None
    history: dict = field(default_factory=dict)
    config_hash: str = ""
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def build(self) -> ForecastAD:
        net = ForecastAD(
            self.spec, self.seed,
            use_tau=self.train_config.use_tau,
            use_delta=self.train_config.use_delta,
            zero_state=self.train_config.zero_state,
        )
        net.load_state_dict(self.state_dict)
        return net.to(self.train_config.device).eval()

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "kind": self.kind,
            "spec": self.spec.to_dict(),
            "train_config": asdict(self.train_config),
            "norm_stats": asdict(self.norm_stats),
            "map_stats": asdict(self.map_stats) if self.map_stats else None,
            "seed": self.seed,
            "K": self.K,
            "epsilon": self.epsilon,
            "history": self.history,
            "config_hash": self.config_hash,
            "state_dict": self.state_dict,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelCheckpoint":
        if d.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(f"Unsupported checkpoint format version {d.get('format_version')}")
        return cls(
            kind=d["kind"],
            spec=ModelSpec(**d["spec"]),
            train_config=TrainConfig(**d["train_config"]),
            norm_stats=NormStats(**d["norm_stats"]),
            state_dict=d["state_dict"],
            seed=d["seed"],
            K=d["K"],
            epsilon=d["epsilon"],
            map_stats=MapStats(**d["map_stats"]) if d.get("map_stats") else None,
            history=d.get("history", {}),
            config_hash=d.get("config_hash", ""),
        )


def save_checkpoint(path: str | Path, checkpoint: ModelCheckpoint) -> None:
    buf = io.BytesIO()
    torch.save(checkpoint.to_dict(), buf)
    atomic_write_bytes(path, buf.getvalue())
    logger.info("Saved %s checkpoint to %s", checkpoint.kind, path)


def load_checkpoint(path: str | Path, producer: str = "train") -> ModelCheckpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return ModelCheckpoint.from_dict(torch.load(path, map_location="cpu", weights_only=True))


def _snapshot(net: nn.Module) -> dict:
    return {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}


# ---------------------------
# Training
# ---------------------------

def pretrain(
    days: Sequence[DaySequence],
    spec: ModelSpec,
    cfg: TrainConfig,
    seed: int = 0,
    norm_stats: NormStats | None = None,
) -> ModelCheckpoint:
    """Fit encoder and decoder as an autoencoder on normal frames (no time input)."""
    frames = [s.frame.pixels for d in days for s in d.samples]
    if not frames:
        raise ConfigError("Pre-training needs at least one normal training frame")
    if any(s.y != Label.NORMAL for d in days for s in d.samples):
        raise ConfigError("Pre-training data must be all normal")
    stats = norm_stats or fit_norm_stats(days)
    pixels = np.stack(frames)

    seed_everything(seed)
    net = ForecastAD(spec, seed, cfg.use_tau, cfg.use_delta, cfg.zero_state).to(cfg.device)
    opt = _optimizer(net, cfg)
    rng = np.random.default_rng(seed)
    history = {"pretrain_loss": [], "pretrain_initial_loss": None}

    for epoch in range(1, cfg.pretrain_epochs + 1):
        net.train()
        order = rng.permutation(len(pixels))
        losses = []
        for step, (a, b) in enumerate(_chunks(len(order), cfg.batch_size)):
            if b - a < 2:
                continue
            x = preprocess_batch(pixels[order[a:b]], stats, spec.input_size).to(cfg.device)
            loss = squared_error(x, net.reconstruct(x)).mean()
            _check_finite(loss, "pretrain", epoch, step, cfg.lr)
            if history["pretrain_initial_loss"] is None:
                history["pretrain_initial_loss"] = loss.item()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        history["pretrain_loss"].append(mean_loss)
        logger.info("Pretrain epoch %d/%d loss=%.4f", epoch, cfg.pretrain_epochs, mean_loss)

    return ModelCheckpoint("pretrain", spec, cfg, stats, _snapshot(net), seed=seed, history=history)


def _load_pretrained(net: ForecastAD, pretrained: ModelCheckpoint) -> None:
    if pretrained.spec.to_dict() != net.spec.to_dict():
        raise ConfigError("Pre-trained checkpoint was built with a different model spec")
    keep = {k: v for k, v in pretrained.state_dict.items() if k.startswith(("encoder.", "decoder."))}
    net.load_state_dict(keep, strict=False)


def train(
    days: Sequence[DaySequence],
    spec: ModelSpec,
    cfg: TrainConfig,
    K: int = 30,
    epsilon: float = EPSILON,
    seed: int = 0,
    pretrained: ModelCheckpoint | None = None,
    validation: Sequence[DaySequence] = (),
) -> ModelCheckpoint:
    """Jointly fit encoder, decoder and context encoder on forecast error."""
    if not days:
        raise ConfigError("Training needs at least one normal training day")
    if any(s.y != Label.NORMAL for d in days for s in d.samples):
        raise ConfigError("Training data must be all normal")

    if cfg.use_pretrained and pretrained is None:
        logger.info("No pre-trained checkpoint given, pre-training first")
        pretrained = pretrain(days, spec, cfg, seed)
    stats = pretrained.norm_stats if (cfg.use_pretrained and pretrained) else fit_norm_stats(days)

    seed_everything(seed)
    net = ForecastAD(spec, seed, cfg.use_tau, cfg.use_delta, cfg.zero_state).to(cfg.device)
    if cfg.use_pretrained:
        _load_pretrained(net, pretrained)
    opt = _optimizer(net, cfg)
    rng = np.random.default_rng(seed)

    prepared = [_prepare_day(d, K, epsilon) for d in days if len(d)]
    chunks = [(i, a, b) for i, data in enumerate(prepared) for a, b in _chunks(data.n, cfg.batch_size)]
    history = {"train_loss": [], "val_loss": [], "initial_loss": None}

    for epoch in range(1, cfg.train_epochs + 1):
        net.train()
        losses = []
        for step, j in enumerate(rng.permutation(len(chunks))):
            i, a, b = chunks[j]
            data = prepared[i]
            if b - int(data.ctx[a:b].min()) < 2:
                logger.debug("Skipping single-frame chunk of %s", data.day.day_id)
                continue
            x, x_hat = _forecast_chunk(net, data, a, b, stats)
            loss = squared_error(x, x_hat).mean()
            _check_finite(loss, "train", epoch, step, cfg.lr)
            if history["initial_loss"] is None:
                history["initial_loss"] = loss.item()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses)) if losses else float("nan")
        history["train_loss"].append(train_loss)

        val_loss = float("nan")
        if validation:
            val_scores = _score_with(net, validation, stats, K, epsilon, cfg.batch_size)
            normals = np.concatenate(
                [s[d.labels == Label.NORMAL] for d, s in zip(validation, val_scores)]
            )
            if len(normals):
                val_loss = float(normals.mean())
        history["val_loss"].append(val_loss)
        logger.info("Train epoch %d/%d train_loss=%.4f val_loss=%.4f", epoch, cfg.train_epochs, train_loss, val_loss)

    net.eval()
    checkpoint = ModelCheckpoint("forecast", spec, cfg, stats, _snapshot(net), seed=seed, K=K,
                                 epsilon=epsilon, history=history)
    checkpoint.map_stats = map_stats(validation or days, checkpoint, _net=net)
    return checkpoint


# ---------------------------
# Inference
# ---------------------------

@torch.no_grad()
def _score_with(net: ForecastAD, days: Sequence[DaySequence], stats: NormStats,
                K: int, epsilon: float, batch_size: int) -> list[np.ndarray]:
    was_training = net.training
    net.eval()
    out = []
    for day in days:
        if not len(day):
            out.append(np.empty(0))
            continue
        data = _prepare_day(day, K, epsilon)
        z_day = _encode_day(net, data, stats, batch_size)
        scores = [
            squared_error(*_forecast_chunk(net, data, a, b, stats, z_day)).double().cpu().numpy()
            for a, b in _chunks(data.n, batch_size)
        ]
        out.append(np.concatenate(scores))
    net.train(was_training)
    return out


class Forecaster:
    """A frozen checkpoint ready for inference."""

    def __init__(self, checkpoint: ModelCheckpoint, net: ForecastAD | None = None) -> None:
        self.checkpoint = checkpoint
        self.net = net if net is not None else checkpoint.build()
        self.net.eval()

    @property
    def stats(self) -> NormStats:
        return self.checkpoint.norm_stats

    @property
    def batch_size(self) -> int:
        return self.checkpoint.train_config.batch_size

    def _param(self) -> torch.Tensor:
        return next(self.net.parameters())

    def score_days(self, days: Sequence[DaySequence]) -> list[np.ndarray]:
        ck = self.checkpoint
        return _score_with(self.net, days, self.stats, ck.K, ck.epsilon, self.batch_size)

    @torch.no_grad()
    def context_embeddings(self, days: Sequence[DaySequence]) -> list[np.ndarray]:
        """Per day, the context vector c_i preceding every sample i."""
        ck = self.checkpoint
        out = []
        for day in days:
            if not len(day):
                out.append(np.empty((0, ck.spec.latent_dim)))
                continue
            data = _prepare_day(day, ck.K, ck.epsilon)
            z_day = _encode_day(self.net, data, self.stats, self.batch_size)
            p = self._param()
            parts = []
            for a, b in _chunks(data.n, self.batch_size):
                ctx = data.ctx[a:b]
                c = self.net.context(z_day[torch.as_tensor(ctx, device=p.device)], _as_tensor(data.tau[ctx], p),
                                     _as_tensor(data.delta[ctx], p))
                parts.append(c.double().cpu().numpy())
            out.append(np.concatenate(parts))
        return out

    @torch.no_grad()
    def encode_context(self, window: ContextWindow) -> np.ndarray:
        p = self._param()
        pixels = np.stack([ts.sample.frame.pixels for ts in window.context])
        z = self.net.encoder(preprocess_batch(pixels, self.stats, self.net.spec.input_size).to(p))
        tau = _as_tensor(np.array([ts.tau for ts in window.context]) / 60.0, p)
        delta = _as_tensor(np.array([ts.delta for ts in window.context]) / 60.0, p)
        return self.net.context(z[None], tau[None], delta[None])[0].double().cpu().numpy()

    @torch.no_grad()
    def forecast(self, c: np.ndarray, psi: np.ndarray, Psi: np.ndarray) -> np.ndarray:
        p = self._param()
        v = joint_embedding(_as_tensor(c, p)[None], _as_tensor(psi, p)[None], _as_tensor(Psi, p)[None],
                            self.net.use_tau, self.net.use_delta)
        return self.net.decoder(v)[0].double().cpu().numpy()

    def forecast_window(self, window: ContextWindow) -> np.ndarray:
        spec = self.net.spec
        c = self.encode_context(window)
        psi = encode_time(window.target.tau / 60.0, spec.time_dim, spec.time_period)
        Psi = encode_time(window.target.delta / 60.0, spec.time_dim, spec.time_period)
        return self.forecast(c, psi, Psi)

    def score(self, sample, window: ContextWindow) -> float:
        x = preprocess(sample.frame, self.stats, self.net.spec.input_size).double().numpy()
        return float(((x - self.forecast_window(window)) ** 2).sum())

    @torch.no_grad()
    def reconstruct(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Autoencoder pass on raw (n, H, W) frames. Returns preprocessed x and x̂."""
        x = preprocess_batch(pixels, self.stats, self.net.spec.input_size).to(self._param())
        return x.double().cpu().numpy(), self.net.reconstruct(x).double().cpu().numpy()

    @torch.no_grad()
    def day_forecasts(self, day: DaySequence) -> tuple[np.ndarray, np.ndarray]:
        """Preprocessed frames and forecasts for a whole day, (n, 3, S, S) each."""
        ck = self.checkpoint
        data = _prepare_day(day, ck.K, ck.epsilon)
        z_day = _encode_day(self.net, data, self.stats, self.batch_size)
        xs, hats = [], []
        for a, b in _chunks(data.n, self.batch_size):
            x, x_hat = _forecast_chunk(self.net, data, a, b, self.stats, z_day)
            xs.append(x.double().cpu().numpy())
            hats.append(x_hat.double().cpu().numpy())
        return np.concatenate(xs), np.concatenate(hats)


def score_days(days: Sequence[DaySequence], checkpoint: ModelCheckpoint) -> list[np.ndarray]:
    return Forecaster(checkpoint).score_days(days)


def context_embeddings(days: Sequence[DaySequence], checkpoint: ModelCheckpoint) -> list[np.ndarray]:
    return Forecaster(checkpoint).context_embeddings(days)


def encode_context(window: ContextWindow, checkpoint: ModelCheckpoint) -> np.ndarray:
    return Forecaster(checkpoint).encode_context(window)


def forecast(c: np.ndarray, psi: np.ndarray, Psi: np.ndarray, checkpoint: ModelCheckpoint) -> np.ndarray:
    return Forecaster(checkpoint).forecast(c, psi, Psi)


def score(sample, window: ContextWindow, checkpoint: ModelCheckpoint) -> float:
    return Forecaster(checkpoint).score(sample, window)


def reconstruct(pixels: np.ndarray, checkpoint: ModelCheckpoint) -> tuple[np.ndarray, np.ndarray]:
    return Forecaster(checkpoint).reconstruct(pixels)


# ---------------------------
# Anomaly maps
# ---------------------------

def error_map(x: np.ndarray, x_hat: np.ndarray, sigma: float = MAP_SIGMA) -> np.ndarray:
    """Channel-mean squared error, Gaussian-smoothed with kernel radius 2σ."""
    diff = ((np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)) ** 2)
    if diff.ndim == 3:
        diff = diff.mean(axis=0)
    return gaussian_filter(diff, sigma=sigma, truncate=MAP_TRUNCATE)


def anomaly_map(x: np.ndarray, x_hat: np.ndarray, stats: MapStats | None, sigma: float = MAP_SIGMA) -> np.ndarray:
    v = error_map(x, x_hat, sigma)
    if stats is None or not stats.max > stats.min:
        logger.warning("Degenerate anomaly-map stats %s, returning an all-zero map", stats)
        return np.zeros_like(v)
    return np.clip((v - stats.min) / (stats.max - stats.min), 0.0, 1.0)


def map_stats(days: Sequence[DaySequence], checkpoint: ModelCheckpoint,
              sigma: float = MAP_SIGMA, _net: ForecastAD | None = None) -> MapStats | None:
    """Min and max smoothed error over the normal samples of days."""
    forecaster = Forecaster(checkpoint, _net)
    lo, hi = np.inf, -np.inf
    for day in days:
        normal = day.labels == Label.NORMAL
        if not normal.any():
            continue
        xs, hats = forecaster.day_forecasts(day)
        for x, x_hat in zip(xs[normal], hats[normal]):
            v = error_map(x, x_hat, sigma)
            lo, hi = min(lo, float(v.min())), max(hi, float(v.max()))
    if not np.isfinite(lo):
        logger.warning("No normal samples to fit anomaly-map stats on")
        return None
    return MapStats(lo, hi)


# ---------------------------
# Detector adapter
# ---------------------------

class ForecastADDetector:
    """Scores with one forecast checkpoint per seed."""

    def __init__(self, checkpoint_for_seed: Callable[[int], ModelCheckpoint], name: str = "ForecastAD") -> None:
        self.name = name
        self._checkpoint_for_seed = checkpoint_for_seed
        self._forecaster: Forecaster | None = None

    def prepare(self, seed: int) -> None:
        self._forecaster = Forecaster(self._checkpoint_for_seed(seed))

    def score_days(self, days: Sequence[DaySequence]) -> list[np.ndarray]:
        if self._forecaster is None:
            raise RuntimeError("prepare(seed) must be called before score_days")
        return self._forecaster.score_days(days)
