"""Run configuration: flat, typed ``section.key`` paths with default < file < flag precedence.

The file format is the flat subset of TOML, one assignment per line::

    # endosr run configuration
    degradation.scale = 8            # flag
    loss.alpha = 0.35                # default
    dataset.classes = ["polyps"]     # file

Every key must be one of :data:`DEFAULTS`; values are checked against the
default's type. Trailing comments record where each value came from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli

from .errors import ConfigurationError, StorageError
from .imagecore import DegradationConfig, gaussian_kernel
from .losses import LossWeights
from .networks import DiscriminatorConfig, GeneratorConfig
from .trainer import ExtractorSpec, TrainConfig

DEFAULTS: dict[str, Any] = {
    "dataset.root": "",
    "dataset.classes": [],
    "dataset.min_width": 0,
    "dataset.min_height": 0,
    "dataset.fractions": [0.8, 0.1, 0.1],
    "dataset.n_folds": 5,
    "dataset.fold": 0,
    "dataset.split_seed": 0,
    "dataset.cache_dir": "",
    "dataset.synthetic_per_class": 4,
    "dataset.synthetic_size": 256,
    "degradation.scale": 8,
    "degradation.noise_sigma": 0.0,
    "degradation.seed": 0,
    "degradation.kernel_size": 5,
    "degradation.kernel_sigma": 0.0,
    "generator.base_filters": 64,
    "generator.depth": 8,
    "generator.use_attention": True,
    "generator.dropout": 0.5,
    "generator.sab_max_positions": 4096,
    "discriminator.base_filters": 64,
    "loss.alpha": 0.35,
    "loss.beta": 0.20,
    "loss.gamma": 0.15,
    "loss.charbonnier_eps": 1e-3,
    "loss.ablation": "full",
    "loss.content_tap": "relu5_4",
    "loss.texture_tap": "relu2_2",
    "extractor.path": "",
    "extractor.width": 1.0,
    "extractor.seed": 0,
    "extractor.gain": 1.0,
    "train.lr_phase1": 1e-4,
    "train.iters_phase1": 100_000,
    "train.lr_phase2": 1e-5,
    "train.iters_phase2": 100_000,
    "train.finetune_iters": 2_000,
    "train.beta1": 0.5,
    "train.beta2": 0.999,
    "train.batch_size": 1,
    "train.seed": 0,
    "train.weight_decay": 0.0,
    "train.patch_size": 0,
    "train.max_steps": 0,
    "train.checkpoint_every": 1000,
    "metric.peak": 1.0,
    "metric.color": "luma",
    "metric.write_maps": False,
    "stats.exact_max_n": 12,
    "stats.reference": "",
}

_DESK_COMMON = {
    "generator.base_filters": 16,
    "generator.sab_max_positions": 1024,
    "discriminator.base_filters": 8,
    "extractor.width": 0.0625,
    # keeps the random-feature content and texture terms commensurate with the pixel term
    "extractor.gain": 0.3,
    "train.lr_phase1": 1e-3,
    "train.iters_phase1": 1500,
    "train.lr_phase2": 1e-4,
    "train.iters_phase2": 500,
    "train.finetune_iters": 0,
    "train.checkpoint_every": 100,
    "dataset.synthetic_per_class": 2,
    "dataset.n_folds": 2,
    "dataset.fractions": [0.5, 0.25, 0.25],
}

# toy-scale settings: 32x32 LR inputs, narrow networks, a few thousand iterations
PRESETS: dict[str, dict[str, Any]] = {
    "desk-8x": {**_DESK_COMMON, "degradation.scale": 8, "train.patch_size": 256, "dataset.synthetic_size": 256},
    "desk-10x": {**_DESK_COMMON, "degradation.scale": 10, "train.patch_size": 320, "dataset.synthetic_size": 320},
    "desk-12x": {**_DESK_COMMON, "degradation.scale": 12, "train.patch_size": 384, "dataset.synthetic_size": 384},
}


def _check_type(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, str):
            try:
                value = int(value)
            except ValueError as exc:
                raise ConfigurationError(f"{key} must be an integer, got {value!r}") from exc
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError as exc:
                raise ConfigurationError(f"{key} must be a number, got {value!r}") from exc
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
            if default and isinstance(default[0], float):
                value = [float(v) for v in value]
        if not isinstance(value, list):
            raise ConfigurationError(f"{key} must be a list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigurationError(f"{key} must be a string, got {value!r}")
    return value


def _flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))
    provenance: dict[str, str] = field(default_factory=lambda: {k: "default" for k in DEFAULTS})

    def set(self, key: str, value: Any, source: str) -> None:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        self.values[key] = _check_type(key, value)
        self.provenance[key] = source

    def update(self, values: Mapping[str, Any], source: str) -> None:
        for k, v in values.items():
            self.set(k, v, source)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def resolve(cls, preset: str | None = None, path=None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        """defaults, then preset, then config file, then flag overrides; validated before returning."""
        cfg = cls()
        if preset:
            if preset not in PRESETS:
                raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            cfg.update(PRESETS[preset], f"preset:{preset}")
        if path:
            cfg.update(load_file(path), "file")
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None}, "flag")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.degradation()
        self.train_config()
        fr = self["dataset.fractions"]
        if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigurationError(f"dataset.fractions must be three numbers summing to 1, got {fr}")
        if not 0 <= self["dataset.fold"] < self["dataset.n_folds"]:
            raise ConfigurationError("dataset.fold must be in [0, dataset.n_folds)")
        if self["metric.color"] not in ("luma", "rgb"):
            raise ConfigurationError("metric.color must be 'luma' or 'rgb'")
        if self["metric.peak"] <= 0:
            raise ConfigurationError("metric.peak must be > 0")
        patch = self["train.patch_size"]
        if patch and patch % self["degradation.scale"]:
            raise ConfigurationError("train.patch_size must be a multiple of degradation.scale")

    # ---------------------------------------------------------------- builders

    def degradation(self) -> DegradationConfig:
        scale = self["degradation.scale"]
        sigma = self["degradation.kernel_sigma"] or scale / 4.0
        kernel = gaussian_kernel(self["degradation.kernel_size"], sigma)
        return DegradationConfig(scale=scale, noise_sigma=self["degradation.noise_sigma"],
                                 seed=self["degradation.seed"], blur_kernel=kernel)

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(scale=self["degradation.scale"], base_filters=self["generator.base_filters"],
                               depth=self["generator.depth"], use_attention=self["generator.use_attention"],
                               dropout=self["generator.dropout"],
                               sab_max_positions=self["generator.sab_max_positions"] or None)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self["loss.alpha"], self["loss.beta"], self["loss.gamma"],
                           self["loss.charbonnier_eps"], self["loss.ablation"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_phase1=self["train.lr_phase1"], iters_phase1=self["train.iters_phase1"],
            lr_phase2=self["train.lr_phase2"], iters_phase2=self["train.iters_phase2"],
            finetune_iters=self["train.finetune_iters"], beta1=self["train.beta1"], beta2=self["train.beta2"],
            batch_size=self["train.batch_size"], seed=self["train.seed"], weight_decay=self["train.weight_decay"],
            loss=self.loss_weights(), content_tap=self["loss.content_tap"], texture_tap=self["loss.texture_tap"],
            generator=self.generator(),
            discriminator=DiscriminatorConfig(base_filters=self["discriminator.base_filters"]),
            extractor=ExtractorSpec(self["extractor.path"] or None, self["extractor.width"],
                                    self["extractor.seed"], self["extractor.gain"]),
        )

    def metric_extractor(self) -> ExtractorSpec:
        """Extractor for the perceptual metric: the loss extractor without its desk gain."""
        return ExtractorSpec(self["extractor.path"] or None, self["extractor.width"], self["extractor.seed"])

    # ---------------------------------------------------------------- file io

    def dumps(self) -> str:
        lines = ["# endosr run configuration (flat TOML; trailing comment = value source)"]
        width = max(len(k) for k in DEFAULTS)
        for key in DEFAULTS:
            lines.append(f"{key.ljust(width)} = {_toml_value(self.values[key])}  # {self.provenance[key]}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "run_config.toml"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.dumps(), encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc
        return path


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (int, str, list)):
        return json.dumps(v)
    raise ConfigurationError(f"cannot serialize {v!r}")


def load_file(path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    flat = _flatten(tree)
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {unknown}")
    return flat
