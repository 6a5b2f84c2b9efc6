#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

"""
Experiment pipeline: typed configuration, the cmd_* operations and the
command registry behind main.py.

Output layout under output_dir:

    data/            simulated day files + manifest.json
    labelled/        rule-labelled day files, manifest.json, split.json
    reports/         rule_report.json, eval_report.{json,txt}, cleaning_report.json
    checkpoints/     pretrain_seed{s}.pt, forecast_seed{s}.pt
    scores/          {validation,test}_seed{s}.csv (+ .meta.json)
    maps/            anomaly-map PNGs + index.json
    plots/           figures
    ablations/       <sweep>/<variant>/eval_report.json, <sweep>/summary.txt
    cleaned/         deployment days after cleaning
    runs.db          run ledger
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import runs
from baselines import AutoencoderDetector, FeatureDetector, FeatureKind
from core import (
    DAY_FILE_SUFFIX,
    CoreConfig,
    DaySequence,
    Label,
    Segment,
    SplitSetup,
    apply_label_source,
    atomic_write_json,
    atomic_write_text,
    load_split,
    read_days,
    read_manifest,
    write_day,
    write_manifest,
)
from errors import ConfigError, MissingArtifactError
from evaluation import (
    ScoredSet,
    clean_deployment,
    evaluate_by_period,
    evaluate_setup,
    render_table,
    select_thresholds,
)
from label import LabelConfig, calibrate_r4_thresholds, label_dataset
from model import (
    PROFILE_ALIASES,
    PROFILES,
    Forecaster,
    ForecastADDetector,
    ModelCheckpoint,
    ModelSpec,
    TrainConfig,
    anomaly_map,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    canonical_profile,
    spec_for_profile,
    train,
)
from plots import (
    plot_anomaly_maps,
    plot_daily_means,
    plot_interarrival_histogram,
    plot_score_timeline,
    plot_training_history,
)
from simulate import SimConfig, simulate_day, simulate_dataset

logger = logging.getLogger("forecastad.pipeline")

HASH_EXCLUDED_KEYS = ("_info", "profiles", "output_dir", "jobs")
R4_CALIBRATION_DAY_OFFSET = 1_000_000
DETECTOR_NAMES = ("forecastad", "autoencoder") + tuple(k.value for k in FeatureKind)
ABLATION_SWEEPS = ("time", "K", "arch")


# ---------------------------
# Config sections
# ---------------------------

@dataclass
class SplitConfig:
    setup: str = SplitSetup.TR2.value
    train_fraction: float = 0.6
    validation_fraction: float = 0.2
    anomalous_validation_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.setup not in (SplitSetup.TR1.value, SplitSetup.TR2.value):
            raise ConfigError(f"split.setup must be Tr#1 or Tr#2, got {self.setup!r}")
        for name in ("train_fraction", "validation_fraction", "anomalous_validation_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"split.{name} must lie in [0, 1]")
        if self.train_fraction + self.validation_fraction > 1.0:
            raise ConfigError("split.train_fraction + split.validation_fraction must be <= 1")


@dataclass
class EvalConfig:
    label_source: str = "ground_truth"
    detectors: list = field(default_factory=lambda: list(DETECTOR_NAMES))
    period_days: int = 30
    clean_percentile: float = 99.0
    clean_threshold: float | None = None
    n_maps: int = 6

    def __post_init__(self) -> None:
        if self.label_source not in ("labels", "ground_truth"):
            raise ConfigError("eval.label_source must be 'labels' or 'ground_truth'")
        unknown = set(self.detectors) - set(DETECTOR_NAMES)
        if unknown:
            raise ConfigError(f"Unknown detectors in eval.detectors: {sorted(unknown)}")
        if int(self.period_days) < 1:
            raise ConfigError("eval.period_days must be >= 1")


@dataclass
class PlotConfig:
    format: str = "png"
    max_days: int = 12
    n_timelines: int = 3

    def __post_init__(self) -> None:
        if self.format not in ("png", "svg"):
            raise ConfigError("plot.format must be png or svg")


@dataclass
class AblateConfig:
    K_values: list = field(default_factory=lambda: [1, 5, 10, 20, 30, 40, 50, 60])
    latent_dims: list = field(default_factory=lambda: [32, 64, 128])
    lstm_layers: list = field(default_factory=lambda: [1, 2, 4])
    seeds: list | None = None


@dataclass
class ModelOverrides:
    latent_dim: int | None = None
    lstm_layers: int | None = None


def _section(cls, raw: dict, name: str):
    values = raw.get(name) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"Config section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Bad '{name}' section: {e}") from e


# ---------------------------
# Dotted keys
# ---------------------------

def flatten_config(raw: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in raw.items():
        if key in ("_info", "profiles"):
            continue
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten_config(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def set_dotted(raw: dict, key: str, value) -> None:
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Cannot set {key}: '{part}' is not a section")
        node = child
    node[parts[-1]] = value


def parse_override_value(text: str, default=None):
    """Parse a command-line value by the type of its default."""
    if isinstance(default, bool):
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"Expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"Expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"Expected a number, got {text!r}") from None
    if isinstance(default, str):
        return text
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_profile(raw: dict) -> dict:
    """Apply the selected profile's dotted overrides to a copy of raw."""
    out = copy.deepcopy(raw)
    profile = out["profile"] = canonical_profile(out.get("profile", "desk"))
    overrides = (out.get("profiles") or {}).get(profile)
    if overrides is None:
        raise ConfigError(f"Unknown profile {profile!r} (defined: {sorted(out.get('profiles') or {})})")
    for key, value in overrides.items():
        set_dotted(out, key, value)
    return out


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ---------------------------
# Experiment config
# ---------------------------

@dataclass
class ExperimentConfig:
    raw: dict
    profile: str
    output_dir: Path
    seed: int
    seeds: list[int]
    jobs: int
    core: CoreConfig
    sim: SimConfig
    label: LabelConfig
    split: SplitConfig
    spec: ModelSpec
    train: TrainConfig
    eval: EvalConfig
    plot: PlotConfig
    ablate: AblateConfig

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(raw)
        profile = canonical_profile(raw.get("profile", "desk"))
        if profile not in PROFILES:
            raise ConfigError(f"Unknown profile {profile!r} (choose from {sorted(PROFILES)})")
        seed = int(raw.get("seed", 0))
        seeds = [int(s) for s in raw.get("seeds") or [seed]]
        sim_values = dict(raw.get("sim") or {})
        if "seed" in sim_values:
            raise ConfigError("Set the simulation seed with the top-level 'seed' key")
        sim = _section(SimConfig, {"sim": {**sim_values, "seed": seed}}, "sim")
        overrides = _section(ModelOverrides, raw, "model")
        spec_kw = {k: v for k, v in (("latent_dim", overrides.latent_dim),
                                     ("lstm_layers", overrides.lstm_layers)) if v is not None}
        spec = spec_for_profile(profile, **spec_kw)
        jobs = int(raw.get("jobs", 1))
        if jobs < 1:
            raise ConfigError("jobs must be >= 1")
        return cls(
            raw=raw,
            profile=profile,
            output_dir=Path(raw.get("output_dir") or "runs"),
            seed=seed,
            seeds=seeds,
            jobs=jobs,
            core=_section(CoreConfig, raw, "core"),
            sim=sim,
            label=_section(LabelConfig, raw, "label"),
            split=_section(SplitConfig, raw, "split"),
            spec=spec,
            train=_section(TrainConfig, raw, "train"),
            eval=_section(EvalConfig, raw, "eval"),
            plot=_section(PlotConfig, raw, "plot"),
            ablate=_section(AblateConfig, raw, "ablate"),
        )

    def resolved(self) -> dict:
        return {k: v for k, v in self.raw.items() if k not in ("_info", "profiles")}

    @property
    def config_hash(self) -> str:
        return canonical_hash({k: v for k, v in self.raw.items() if k not in HASH_EXCLUDED_KEYS})

    @property
    def pretrain_key(self) -> str:
        """Hash of everything a pre-training checkpoint depends on."""
        r = self.resolved()
        train_part = {k: v for k, v in (r.get("train") or {}).items()
                      if k not in ("use_tau", "use_delta", "use_pretrained", "train_epochs")}
        return canonical_hash({
            "profile": self.profile, "seed": self.seed, "spec": self.spec.to_dict(), "train": train_part,
            "sim": r.get("sim"), "label": r.get("label"), "split": r.get("split"),
            "label_source": self.eval.label_source,
        })

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        for key, value in overrides.items():
            set_dotted(raw, key, value)
        return ExperimentConfig.from_dict(raw)

    # paths
    @property
    def data_dir(self) -> Path:
        return self.output_dir / "data"

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / "manifest.json"

    @property
    def labelled_dir(self) -> Path:
        return self.output_dir / "labelled"

    @property
    def labelled_manifest_path(self) -> Path:
        return self.labelled_dir / "manifest.json"

    @property
    def split_path(self) -> Path:
        return self.labelled_dir / "split.json"

    @property
    def reports_dir(self) -> Path:
        return self.output_dir / "reports"

    @property
    def checkpoints_dir(self) -> Path:
        return self.output_dir / "checkpoints"

    def pretrain_path(self, seed: int) -> Path:
        return self.checkpoints_dir / f"pretrain_seed{seed}.pt"

    def forecast_path(self, seed: int) -> Path:
        return self.checkpoints_dir / f"forecast_seed{seed}.pt"

    @property
    def scores_dir(self) -> Path:
        return self.output_dir / "scores"

    @property
    def maps_dir(self) -> Path:
        return self.output_dir / "maps"

    @property
    def plots_dir(self) -> Path:
        return self.output_dir / "plots"

    @property
    def ablations_dir(self) -> Path:
        return self.output_dir / "ablations"

    @property
    def cleaned_dir(self) -> Path:
        return self.output_dir / "cleaned"


# ---------------------------
# Shared helpers
# ---------------------------

def _require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(path, producer)
    return Path(path)


def _load_split(cfg: ExperimentConfig):
    _require(cfg.split_path, "split")
    return load_split(cfg.split_path, cfg.eval.label_source, cfg.core.epsilon)


def _map_jobs(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def write_scores_csv(path: Path, days: Sequence[DaySequence], scores: Sequence[np.ndarray]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["day_id", "timestamp", "score", "label"])
    for day, s in zip(days, scores):
        for sample, value in zip(day.samples, s):
            writer.writerow([day.day_id, repr(float(sample.t)), repr(float(value)), int(sample.y)])
    atomic_write_text(path, buf.getvalue())
    return path


def _meta(cfg: ExperimentConfig, seed: int | None = None, **extra) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.seed if seed is None else seed, **extra}


def _r4_calibration_frames(cfg: ExperimentConfig, n_days: int = 3):
    clean = replace(cfg.sim, anomaly_rate=0.0, anomalous_day_rate=0.0)
    for i in range(n_days):
        day = simulate_day(clean, R4_CALIBRATION_DAY_OFFSET + i)
        for s in day.samples:
            if s.segment == Segment.M:
                yield s.frame


# ---------------------------
# Commands
# ---------------------------

def cmd_simulate(cfg: ExperimentConfig) -> list[Path]:
    _, manifest_path = simulate_dataset(
        cfg.sim, cfg.sim.n_days, cfg.data_dir, jobs=cfg.jobs,
        extra_manifest={"config_hash": cfg.config_hash},
    )
    return [manifest_path]


def cmd_label(cfg: ExperimentConfig) -> list[Path]:
    manifest = read_manifest(_require(cfg.manifest_path, "simulate"))
    days = read_days(cfg.data_dir, manifest["days"])

    label_cfg = cfg.label
    if not label_cfg.r4_calibrated:
        h, v = calibrate_r4_thresholds(_r4_calibration_frames(cfg), label_cfg.r4_calibration_percentile)
        label_cfg = replace(label_cfg, r4_horizontal_threshold=h, r4_vertical_threshold=v)

    labelled, dropped, report = label_dataset(days, label_cfg)

    cfg.labelled_dir.mkdir(parents=True, exist_ok=True)
    for stale in cfg.labelled_dir.glob(f"*{DAY_FILE_SUFFIX}"):
        stale.unlink()
    _map_jobs(lambda d: write_day(cfg.labelled_dir / f"{d.day_id}{DAY_FILE_SUFFIX}", d), labelled, cfg.jobs)
    write_manifest(cfg.labelled_manifest_path, {
        **{k: manifest.get(k) for k in ("height", "width", "seed", "sim_config_hash")},
        "days": [f"{d.day_id}{DAY_FILE_SUFFIX}" for d in labelled],
        "train": [], "validation": [], "test": [], "setup": None,
        "n_samples": report["samples_labelled"],
        "n_anomalous": report["anomalous"],
        "config_hash": cfg.config_hash,
    })
    report_path = cfg.reports_dir / "rule_report.json"
    atomic_write_json(report_path, {**_meta(cfg), **report})
    return [cfg.labelled_manifest_path, report_path]


def split_days(days: Sequence[DaySequence], split_cfg: SplitConfig, seed: int) -> dict[str, list[str]]:
    """Days with any anomaly go to validation/test only; all-normal days spread over all three."""
    days = [d for d in days if len(d)]
    anomalous = [d.day_id for d in days if (d.labels == Label.ANOMALOUS).any()]
    normal = [d.day_id for d in days if not (d.labels == Label.ANOMALOUS).any()]
    if not normal:
        raise ConfigError(
            "No all-normal days to train on; raise sim.n_days or lower sim.anomalous_day_rate"
        )
    rng = np.random.default_rng(seed)
    anomalous = [anomalous[i] for i in rng.permutation(len(anomalous))]
    normal = [normal[i] for i in rng.permutation(len(normal))]

    n_val_a = int(np.ceil(len(anomalous) * split_cfg.anomalous_validation_fraction))
    n_train = max(1, int(round(len(normal) * split_cfg.train_fraction)))
    n_val = min(int(round(len(normal) * split_cfg.validation_fraction)), len(normal) - n_train)
    return {
        "train": sorted(normal[:n_train]),
        "validation": sorted(normal[n_train:n_train + n_val] + anomalous[:n_val_a]),
        "test": sorted(normal[n_train + n_val:] + anomalous[n_val_a:]),
    }


def cmd_split(cfg: ExperimentConfig) -> list[Path]:
    manifest = read_manifest(_require(cfg.labelled_manifest_path, "label"))
    days = [apply_label_source(d, cfg.eval.label_source) for d in read_days(cfg.labelled_dir, manifest["days"])]
    parts = split_days(days, cfg.split, cfg.seed)
    suffix = {d.day_id: f"{d.day_id}{DAY_FILE_SUFFIX}" for d in days}
    split_manifest = {
        **manifest,
        **{k: [suffix[i] for i in v] for k, v in parts.items()},
        "setup": cfg.split.setup,
        "label_source": cfg.eval.label_source,
        "split_seed": cfg.seed,
        "config_hash": cfg.config_hash,
    }
    write_manifest(cfg.split_path, split_manifest)
    load_split(cfg.split_path, cfg.eval.label_source, cfg.core.epsilon)
    logger.info(
        "Split %s: %d train, %d validation, %d test days",
        cfg.split.setup, len(parts["train"]), len(parts["validation"]), len(parts["test"]),
    )
    return [cfg.split_path]


def _pretrain_seed(cfg: ExperimentConfig, split, seed: int) -> ModelCheckpoint:
    checkpoint = pretrain(split.train, cfg.spec, cfg.train, seed)
    checkpoint.config_hash = cfg.pretrain_key
    return checkpoint


def cmd_pretrain(cfg: ExperimentConfig) -> list[Path]:
    split = _load_split(cfg)
    outputs = []
    for seed in cfg.seeds:
        path = cfg.pretrain_path(seed)
        save_checkpoint(path, _pretrain_seed(cfg, split, seed))
        outputs.append(path)
    return outputs


def _load_pretrained(cfg: ExperimentConfig, seed: int) -> ModelCheckpoint:
    checkpoint = load_checkpoint(cfg.pretrain_path(seed), producer="pretrain")
    if checkpoint.config_hash != cfg.pretrain_key:
        logger.warning("%s was produced with a different config; rerun `main.py pretrain`",
                       cfg.pretrain_path(seed))
    return checkpoint


def _train_seed(cfg: ExperimentConfig, split, seed: int, pretrained: ModelCheckpoint | None) -> ModelCheckpoint:
    checkpoint = train(
        split.train, cfg.spec, cfg.train, K=cfg.core.K, epsilon=cfg.core.epsilon, seed=seed,
        pretrained=pretrained, validation=split.validation,
    )
    checkpoint.config_hash = cfg.config_hash
    return checkpoint


def cmd_train(cfg: ExperimentConfig) -> list[Path]:
    split = _load_split(cfg)
    outputs, histories = [], {}
    for seed in cfg.seeds:
        pretrained = _load_pretrained(cfg, seed) if cfg.train.use_pretrained else None
        checkpoint = _train_seed(cfg, split, seed, pretrained)
        save_checkpoint(cfg.forecast_path(seed), checkpoint)
        histories[str(seed)] = {**(pretrained.history if pretrained else {}), **checkpoint.history}
        outputs.append(cfg.forecast_path(seed))
    history_path = cfg.reports_dir / "training_history.json"
    atomic_write_json(history_path, {**_meta(cfg), "history": histories})
    return outputs + [history_path]


def _map_panels(forecaster: Forecaster, days: Sequence[DaySequence], scores: Sequence[np.ndarray],
                n: int) -> list[dict]:
    """The n highest-scoring samples with frame, forecast and normalised map."""
    ranked = sorted(
        ((float(v), di, i) for di, s in enumerate(scores) for i, v in enumerate(s)),
        reverse=True,
    )[:n]
    by_day: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    panels = []
    for value, di, i in ranked:
        if di not in by_day:
            by_day[di] = forecaster.day_forecasts(days[di])
        xs, hats = by_day[di]
        sample = days[di].samples[i]
        panels.append({
            "day_id": days[di].day_id,
            "index": i,
            "t": sample.t,
            "score": value,
            "label": int(sample.y),
            "frame": xs[i].mean(axis=0),
            "forecast": hats[i].mean(axis=0),
            "map": anomaly_map(xs[i], hats[i], forecaster.checkpoint.map_stats),
            "title": f"{days[di].day_id}#{i} s={value:.2f} y={int(sample.y)}",
        })
    return panels


def cmd_score(cfg: ExperimentConfig) -> list[Path]:
    split = _load_split(cfg)
    checkpoint = load_checkpoint(_require(cfg.forecast_path(cfg.seed), "train"))
    forecaster = Forecaster(checkpoint)
    outputs = []
    test_scores = None
    for name, days in (("validation", split.validation), ("test", split.test)):
        scores = forecaster.score_days(days)
        path = write_scores_csv(cfg.scores_dir / f"{name}_seed{cfg.seed}.csv", days, scores)
        atomic_write_json(path.with_suffix(".meta.json"),
                          _meta(cfg, checkpoint=str(cfg.forecast_path(cfg.seed)), set=name))
        outputs.append(path)
        if name == "test":
            test_scores = scores

    index = []
    for panel in _map_panels(forecaster, split.test, test_scores, cfg.eval.n_maps):
        path = cfg.maps_dir / f"{panel['day_id']}_{panel['index']:04d}.{cfg.plot.format}"
        plot_anomaly_maps([panel], path)
        index.append({k: panel[k] for k in ("day_id", "index", "t", "score", "label")} | {"file": path.name})
        outputs.append(path)
    index_path = cfg.maps_dir / "index.json"
    atomic_write_json(index_path, {**_meta(cfg), "maps": index})
    return outputs + [index_path]


def build_detectors(cfg: ExperimentConfig, names: Sequence[str] | None = None) -> list:
    detectors = []
    for name in names or cfg.eval.detectors:
        if name == "forecastad":
            detectors.append(ForecastADDetector(
                lambda s: load_checkpoint(cfg.forecast_path(s), producer="train")))
        elif name == "autoencoder":
            detectors.append(AutoencoderDetector(
                lambda s: load_checkpoint(cfg.pretrain_path(s), producer="pretrain")))
        else:
            detectors.append(FeatureDetector(name))
    return detectors


def cmd_evaluate(cfg: ExperimentConfig) -> list[Path]:
    split = _load_split(cfg)
    for seed in cfg.seeds:
        if "forecastad" in cfg.eval.detectors:
            _require(cfg.forecast_path(seed), "train")
        if "autoencoder" in cfg.eval.detectors:
            _require(cfg.pretrain_path(seed), "pretrain")

    cross_source = "labels" if cfg.eval.label_source == "ground_truth" else "ground_truth"
    test_files = read_manifest(cfg.split_path).get("test", [])
    cross_test = [apply_label_source(d, cross_source) for d in read_days(cfg.split_path.parent, test_files)]

    reports = []
    for detector in build_detectors(cfg):
        report = evaluate_setup(detector, split, cfg.seeds, jobs=cfg.jobs,
                                cross_test=cross_test, cross_label_source=cross_source)
        report.config_hash = cfg.config_hash
        reports.append(report)

    periods = []
    if "forecastad" in cfg.eval.detectors:
        scores = Forecaster(load_checkpoint(cfg.forecast_path(cfg.seed))).score_days(split.test)
        periods = evaluate_by_period(split.test, scores, cfg.eval.period_days)

    table = render_table(reports)
    json_path = cfg.reports_dir / "eval_report.json"
    txt_path = cfg.reports_dir / "eval_report.txt"
    atomic_write_json(json_path, {
        **_meta(cfg), "seeds": cfg.seeds, "setup": split.setup.value,
        "label_source": cfg.eval.label_source, "cross_label_source": cross_source,
        "reports": [r.to_dict() for r in reports], "periods": periods,
    })
    atomic_write_text(txt_path, table + "\n")
    logger.info("Evaluation table:\n%s", table)
    return [json_path, txt_path]


def ablation_variants(cfg: ExperimentConfig, sweep: str) -> list[tuple[str, dict]]:
    if sweep == "time":
        return [
            ("full", {}),
            ("no_tau", {"train.use_tau": False}),
            ("no_delta", {"train.use_delta": False}),
            ("no_time", {"train.use_tau": False, "train.use_delta": False}),
            ("no_pretrain", {"train.use_pretrained": False}),
        ]
    if sweep == "K":
        return [(f"K{k}", {"core.K": int(k)}) for k in cfg.ablate.K_values]
    if sweep == "arch":
        return [
            (f"L{layers}_d{dim}", {"model.lstm_layers": int(layers), "model.latent_dim": int(dim)})
            for layers in cfg.ablate.lstm_layers for dim in cfg.ablate.latent_dims
        ]
    raise ConfigError(f"Unknown ablation sweep {sweep!r} (choose from {', '.join(ABLATION_SWEEPS)})")


def _current_checkpoint(path: Path, config_hash: str) -> ModelCheckpoint | None:
    if not path.exists():
        return None
    checkpoint = load_checkpoint(path)
    return checkpoint if checkpoint.config_hash == config_hash else None


def _pretrained_for_variant(base: ExperimentConfig, variant: ExperimentConfig, split, seed: int,
                            variant_dir: Path) -> ModelCheckpoint | None:
    if not variant.train.use_pretrained:
        return None
    if variant.pretrain_key == base.pretrain_key:
        shared = _current_checkpoint(base.pretrain_path(seed), base.pretrain_key)
        if shared is not None:
            return shared
    path = variant_dir / f"pretrain_seed{seed}.pt"
    checkpoint = _current_checkpoint(path, variant.pretrain_key)
    if checkpoint is None:
        checkpoint = _pretrain_seed(variant, split, seed)
        save_checkpoint(path, checkpoint)
    return checkpoint


def cmd_ablate(cfg: ExperimentConfig, sweep: str = "time") -> list[Path]:
    variants = ablation_variants(cfg, sweep)
    split = _load_split(cfg)
    seeds = [int(s) for s in (cfg.ablate.seeds or cfg.seeds)]
    sweep_dir = cfg.ablations_dir / sweep
    reports, outputs = [], []
    for name, overrides in variants:
        variant = cfg.with_overrides(overrides)
        variant_dir = sweep_dir / name
        checkpoints = {}
        for seed in seeds:
            path = variant_dir / f"forecast_seed{seed}.pt"
            checkpoint = _current_checkpoint(path, variant.config_hash)
            if checkpoint is None:
                pretrained = _pretrained_for_variant(cfg, variant, split, seed, variant_dir)
                checkpoint = _train_seed(variant, split, seed, pretrained)
                save_checkpoint(path, checkpoint)
            else:
                logger.info("Reusing %s", path)
            checkpoints[seed] = checkpoint
        report = evaluate_setup(ForecastADDetector(checkpoints.__getitem__, name=name), split, seeds, jobs=cfg.jobs)
        report.config_hash = variant.config_hash
        report_path = variant_dir / "eval_report.json"
        atomic_write_json(report_path, {
            **_meta(variant), "sweep": sweep, "variant": name, "overrides": overrides,
            "report": report.to_dict(),
        })
        reports.append(report)
        outputs.append(report_path)
    summary_path = sweep_dir / "summary.txt"
    atomic_write_text(summary_path, render_table(reports) + "\n")
    logger.info("Ablation '%s':\n%s", sweep, render_table(reports))
    return outputs + [summary_path]


def cmd_plot(cfg: ExperimentConfig) -> list[Path]:
    manifest = read_manifest(_require(cfg.manifest_path, "simulate"))
    days = read_days(cfg.data_dir, manifest["days"])
    ext = cfg.plot.format
    outputs = [
        plot_daily_means(days, cfg.plots_dir / f"daily_means.{ext}", cfg.plot.max_days),
        plot_interarrival_histogram(days, cfg.plots_dir / f"interarrival.{ext}"),
    ]
    forecast_path = cfg.forecast_path(cfg.seed)
    if not (cfg.split_path.exists() and forecast_path.exists()):
        logger.info("No split or forecast checkpoint yet, skipping score and map figures")
        return outputs

    split = load_split(cfg.split_path, cfg.eval.label_source, cfg.core.epsilon)
    checkpoint = load_checkpoint(forecast_path)
    forecaster = Forecaster(checkpoint)
    threshold = None
    validation = ScoredSet.from_days(split.validation, forecaster.score_days(split.validation))
    if validation.has_both_classes:
        threshold = select_thresholds(validation.scores, validation.y).lambda_f
    test_days = split.test[:cfg.plot.n_timelines]
    for day, scores in zip(test_days, forecaster.score_days(test_days)):
        outputs.append(plot_score_timeline(day, scores, cfg.plots_dir / f"scores_{day.day_id}.{ext}", threshold))
    test_scores = forecaster.score_days(split.test)
    outputs.append(plot_anomaly_maps(_map_panels(forecaster, split.test, test_scores, 4),
                                     cfg.plots_dir / f"anomaly_maps.{ext}"))
    if checkpoint.history:
        outputs.append(plot_training_history(checkpoint.history, cfg.plots_dir / f"training_history.{ext}"))
    return outputs


def cmd_clean_deployment(cfg: ExperimentConfig) -> list[Path]:
    split = _load_split(cfg)
    checkpoint = load_checkpoint(_require(cfg.forecast_path(cfg.seed), "train"))
    result = clean_deployment(split.test, split.train, checkpoint,
                              threshold=cfg.eval.clean_threshold, percentile=cfg.eval.clean_percentile)
    scores = Forecaster(checkpoint).score_days(split.test)
    before = evaluate_by_period(split.test, scores, cfg.eval.period_days)
    after = evaluate_by_period(result.days, scores, cfg.eval.period_days)

    cfg.cleaned_dir.mkdir(parents=True, exist_ok=True)
    for day in result.days:
        write_day(cfg.cleaned_dir / f"{day.day_id}{DAY_FILE_SUFFIX}", day)
    write_manifest(cfg.cleaned_dir / "manifest.json", {
        "days": [f"{d.day_id}{DAY_FILE_SUFFIX}" for d in result.days],
        "train": [], "validation": [], "test": [], "setup": None,
        "config_hash": cfg.config_hash, "seed": cfg.seed,
    })
    report_path = cfg.reports_dir / "cleaning_report.json"
    atomic_write_json(report_path, {
        **_meta(cfg), **result.summary(), "removed": result.removed,
        "periods_before": before, "periods_after": after,
    })
    return [report_path, cfg.cleaned_dir / "manifest.json"]


# ---------------------------
# Registry and dispatch
# ---------------------------

@dataclass(frozen=True)
class Command:
    name: str
    run: Callable[..., list[Path]]
    inputs: Callable[[ExperimentConfig], list[tuple[Path, str]]]
    outputs: Callable[..., list[Path]]
    help: str


def _train_inputs(cfg: ExperimentConfig) -> list[tuple[Path, str]]:
    needs = [(cfg.split_path, "split")]
    if cfg.train.use_pretrained:
        needs += [(cfg.pretrain_path(s), "pretrain") for s in cfg.seeds]
    return needs


def _evaluate_inputs(cfg: ExperimentConfig) -> list[tuple[Path, str]]:
    needs = [(cfg.split_path, "split")]
    if "forecastad" in cfg.eval.detectors:
        needs += [(cfg.forecast_path(s), "train") for s in cfg.seeds]
    if "autoencoder" in cfg.eval.detectors:
        needs += [(cfg.pretrain_path(s), "pretrain") for s in cfg.seeds]
    return needs


COMMANDS: dict[str, Command] = {c.name: c for c in (
    Command("simulate", cmd_simulate, lambda c: [], lambda c, **_: [c.manifest_path],
            "Simulate operational days into data/"),
    Command("label", cmd_label, lambda c: [(c.manifest_path, "simulate")],
            lambda c, **_: [c.labelled_manifest_path, c.reports_dir / "rule_report.json"],
            "Segment, filter and rule-label the simulated days"),
    Command("split", cmd_split, lambda c: [(c.labelled_manifest_path, "label")],
            lambda c, **_: [c.split_path], "Assign days to train/validation/test (Tr#1 or Tr#2)"),
    Command("pretrain", cmd_pretrain, lambda c: [(c.split_path, "split")],
            lambda c, **_: [c.pretrain_path(s) for s in c.seeds], "Pre-train encoder/decoder per seed"),
    Command("train", cmd_train, _train_inputs,
            lambda c, **_: [c.forecast_path(s) for s in c.seeds], "Train the forecaster per seed"),
    Command("score", cmd_score, lambda c: [(c.split_path, "split"), (c.forecast_path(c.seed), "train")],
            lambda c, **_: [c.scores_dir / f"test_seed{c.seed}.csv", c.maps_dir / "index.json"],
            "Write score CSVs and anomaly maps"),
    Command("evaluate", cmd_evaluate, _evaluate_inputs,
            lambda c, **_: [c.reports_dir / "eval_report.json", c.reports_dir / "eval_report.txt"],
            "Evaluate all detectors over seeds"),
    Command("ablate", cmd_ablate, lambda c: [(c.split_path, "split")],
            lambda c, sweep="time", **_: [c.ablations_dir / sweep / "summary.txt"],
            "Run an ablation sweep (time, K or arch)"),
    Command("plot", cmd_plot, lambda c: [(c.manifest_path, "simulate")],
            lambda c, **_: [c.plots_dir], "Write figures"),
    Command("clean-deployment", cmd_clean_deployment,
            lambda c: [(c.split_path, "split"), (c.forecast_path(c.seed), "train")],
            lambda c, **_: [c.reports_dir / "cleaning_report.json"],
            "Remove far-from-training normals from the deployment set"),
)}


def plan(cfg: ExperimentConfig, names: Sequence[str], **kwargs) -> str:
    """Dry-run text: inputs (with presence) and outputs per command."""
    lines = [f"Plan (profile={cfg.profile}, output_dir={cfg.output_dir}, config_hash={cfg.config_hash[:12]})"]
    for name in names:
        command = COMMANDS[name]
        lines.append(f"── {name}: {command.help}")
        for path, producer in command.inputs(cfg):
            mark = "✓" if Path(path).exists() else f"✗ missing (run `main.py {producer}`)"
            lines.append(f"   in   {path}  {mark}")
        for path in command.outputs(cfg, **kwargs):
            lines.append(f"   out  {path}")
    return "\n".join(lines)


def run_command(cfg: ExperimentConfig, name: str, **kwargs) -> list[Path]:
    if name not in COMMANDS:
        raise ConfigError(f"Unknown command {name!r}")
    command = COMMANDS[name]
    for path, producer in command.inputs(cfg):
        _require(path, producer)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_json(cfg.output_dir / "config.resolved.json",
                      {"config_hash": cfg.config_hash, **cfg.resolved()})
    run_id = runs.start_run(cfg.output_dir, name, cfg.config_hash, cfg.seed)
    logger.info("Running %s (run %d, config %s)", name, run_id, cfg.config_hash[:12])
    try:
        outputs = command.run(cfg, **kwargs)
    except Exception as e:
        runs.finish_run(cfg.output_dir, run_id, "failed", message=f"{type(e).__name__}: {e}")
        raise
    runs.finish_run(cfg.output_dir, run_id, "ok", outputs=outputs)
    for path in outputs:
        logger.info("  wrote %s", path)
    return outputs
