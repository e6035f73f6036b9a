"""
Run configuration loader.

Purpose:
- Centralize how a run is described: one YAML file -> frozen dataclasses.
- Keep tracing simple: YAML -> overrides -> RunConfig -> stage functions.

Sources:
- run config YAML (see config/*.yaml and docs/config.md).
- `--set key.path=value` overrides from the command line.
- TOMOSEG_OUTPUT_DIR environment variable (output_dir only).

Logic flow (high level):
1) load_run_config() reads the YAML into a plain dict.
2) apply_overrides() patches dotted keys into that dict.
3) parse_run_config() walks the dataclass tree, rejecting unknown keys and
   coercing lists/ints into the declared tuple/float types.
4) _check_invariants() enforces the hard limits (delta, alpha, odd slices...).
5) write_resolved_config() dumps the materialized tree next to run outputs.

Tracing notes:
- Errors name the dotted key path (ex: train.delta) so the offending line in
  the YAML is easy to find.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Union, get_args, get_origin, get_type_hints
import os
import types

import yaml

from .errors import ConfigError

OUTPUT_DIR_ENV = "TOMOSEG_OUTPUT_DIR"

WEAK_OPS = (
    "rot90",
    "rot180",
    "rot270",
    "flip_h",
    "flip_v",
    "transpose",
    "antitranspose",
)
STRONG_OPS = ("gamma", "brightness_contrast", "clahe", "equalize")
CLUSTER_METHODS = ("kmeans", "multi_otsu", "gmm")
NORMALIZE_MODES = ("global_minmax", "percentile")
VOLUME_FORMATS = ("slices", "raw", "phantom")
STAGE2_LOSSES = ("ce", "label_smoothing", "bootstrap", "focal", "gce", "sce")
STAGE3_LOSSES = ("masked_ce", "masked_label_smoothing")


@dataclass(frozen=True)
class IoConfig:
    """
    Where the volume comes from and how it is scaled.
    """

    path: str | None = None
    format: str = "phantom"
    normalize: str = "global_minmax"
    p_lo: float = 2.0
    p_hi: float = 98.0
    ground_truth: str | None = None
    pseudo_labels: str | None = None


@dataclass(frozen=True)
class PseudolabelConfig:
    method: str = "kmeans"
    num_classes: int = 4
    sample_size: int = 1_000_000
    max_iter: int = 300
    tol: float = 1e-4
    n_init: int = 4
    num_bins: int = 256


@dataclass(frozen=True)
class WeakAugmentConfig:
    enabled: bool = True
    ops: tuple[str, ...] = WEAK_OPS


@dataclass(frozen=True)
class StrongAugmentConfig:
    enabled: bool = True
    op_probability: float = 0.5
    ops: tuple[str, ...] = ("gamma", "brightness_contrast", "clahe")
    gamma_range: tuple[float, float] = (0.7, 1.5)
    brightness_limit: float = 0.1
    contrast_limit: float = 0.1
    clahe_clip_limit: float = 0.01


@dataclass(frozen=True)
class AugmentConfig:
    weak: WeakAugmentConfig = field(default_factory=WeakAugmentConfig)
    strong: StrongAugmentConfig = field(default_factory=StrongAugmentConfig)


@dataclass(frozen=True)
class ModelConfig:
    """
    Encoder-decoder layout. The defaults are the ~2M parameter reference.
    """

    arch: str = "unet"
    in_channels: int = 7
    num_classes: int = 4
    depth: int = 4
    base_width: int = 16
    skip_connections: bool = True
    dropout_rate: float = 0.1
    norm_groups: int = 8
    input_size: int | None = None


@dataclass(frozen=True)
class LossConfig:
    name: str = "ce"
    params: dict[str, float] = field(default_factory=dict)
    stage3_name: str = "masked_ce"


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage2: int = 200
    epochs_stage3: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"
    crop_size: int = 512
    num_slices: int = 7
    delta: float = 0.5
    alpha: float = 0.99
    checkpoint_every: int = 0
    empty_mask_patience: int = 50
    stage3_pseudo_weight: float = 0.0
    samples_per_epoch: int = 0
    slices: tuple[int, ...] | None = None
    device: str = "auto"
    resume: str | None = None


@dataclass(frozen=True)
class EvalConfig:
    ignore_classes: tuple[int, ...] = (0,)
    every: int = 0
    slices: tuple[int, ...] | None = None
    overlays: bool = True
    batch_size: int = 4


@dataclass(frozen=True)
class PhantomSpec:
    """
    Synthetic volume recipe.

    class_means[k] is the clean intensity of class k, strictly increasing in
    k so class ids line up with intensity-ordered clusters. Class 0 is the
    background outside the cylindrical sample. structures[k] picks how class
    k (k >= 1) is laid out: "blobs", "inclusions" or "shell".
    """

    shape: tuple[int, int, int] = (64, 128, 128)
    class_means: tuple[float, ...] = (0.0, 0.4, 0.7)
    fractions: tuple[float, ...] = (0.35, 0.45, 0.20)
    structures: tuple[str, ...] = ("background", "blobs", "blobs")
    blob_sigma: float = 6.0
    inclusion_sigma: float = 2.0
    max_inclusion_fraction: float = 0.15
    noise_sigma: float = 0.0
    drift_amplitude: float = 0.0
    drift_kind: str = "linear"
    streak_count: int = 0
    streak_width: int = 2
    streak_contrast: float = 0.2
    fringe_width: int = 0
    fringe_contrast: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class LoggingConfig:
    level: str = "INFO"
    json: bool = False
    to_file: bool = True


@dataclass(frozen=True)
class RunConfig:
    """
    Fully resolved config for one run.
    """

    run_id: str = "run"
    output_dir: str = "runs"
    seed: int = 0
    workers: int = 0
    io: IoConfig = field(default_factory=IoConfig)
    pseudolabel: PseudolabelConfig = field(default_factory=PseudolabelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = get_origin(hint)
    if origin in (Union, types.UnionType):
        args = [arg for arg in get_args(hint) if arg is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if is_dataclass(hint):
        return _parse_section(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{path}' must be a list, got {value!r}.")
        args = get_args(hint)
        item_hint = args[0] if args else Any
        return tuple(_coerce(item, item_hint, f"{path}[{idx}]") for idx, item in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"'{path}' must be a mapping, got {value!r}.")
        return dict(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number, got {value!r}.")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{path}' must be an integer, got {value!r}.")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true/false, got {value!r}.")
        return value
    if hint is str:
        return str(value)
    return value


def _parse_section(cls: type, raw: Any, path: str) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        label = path or "config"
        raise ConfigError(f"'{label}' must be a mapping.")

    hints = get_type_hints(cls)
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        prefix = f"{path}." if path else ""
        bad = ", ".join(f"{prefix}{key}" for key in unknown)
        raise ConfigError(
            f"Unknown config key(s): {bad}. Allowed under '{path or '<root>'}': "
            f"{', '.join(sorted(allowed))}"
        )

    values = {}
    for name, value in raw.items():
        key_path = f"{path}.{name}" if path else name
        values[name] = _coerce(value, hints[name], key_path)
    return cls(**values)


def parse_section(cls: type, raw: Any, path: str = "") -> Any:
    """
    Parse one config section (ex: a ModelConfig stored in a checkpoint).
    """

    return _parse_section(cls, raw, path)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _check_invariants(cfg: RunConfig) -> None:
    _require(cfg.io.format in VOLUME_FORMATS, f"io.format must be one of {VOLUME_FORMATS}.")
    _require(cfg.io.normalize in NORMALIZE_MODES, f"io.normalize must be one of {NORMALIZE_MODES}.")
    _require(0.0 <= cfg.io.p_lo < cfg.io.p_hi <= 100.0, "io.p_lo/p_hi must satisfy 0 <= p_lo < p_hi <= 100.")
    if cfg.io.format != "phantom":
        _require(cfg.io.path is not None, f"io.path is required for io.format={cfg.io.format}.")

    pl = cfg.pseudolabel
    _require(pl.method in CLUSTER_METHODS, f"pseudolabel.method must be one of {CLUSTER_METHODS}.")
    _require(2 <= pl.num_classes <= 255, "pseudolabel.num_classes must be in [2, 255].")
    _require(pl.sample_size >= pl.num_classes, "pseudolabel.sample_size must be >= num_classes.")

    unknown_weak = set(cfg.augment.weak.ops) - set(WEAK_OPS)
    _require(not unknown_weak, f"augment.weak.ops has unknown ops {sorted(unknown_weak)}.")
    unknown_strong = set(cfg.augment.strong.ops) - set(STRONG_OPS)
    _require(not unknown_strong, f"augment.strong.ops has unknown ops {sorted(unknown_strong)}.")
    lo, hi = cfg.augment.strong.gamma_range
    _require(0.0 < lo <= hi, "augment.strong.gamma_range must be positive and ascending.")
    _require(0.0 <= cfg.augment.strong.op_probability <= 1.0, "augment.strong.op_probability must be in [0, 1].")

    tr = cfg.train
    _require(0.0 < tr.delta < 1.0, "train.delta must be in (0, 1).")
    _require(0.0 < tr.alpha < 1.0, "train.alpha must be in (0, 1).")
    _require(tr.batch_size >= 1, "train.batch_size must be >= 1.")
    _require(tr.num_slices >= 1 and tr.num_slices % 2 == 1, "train.num_slices must be a positive odd integer.")
    _require(tr.crop_size >= 1, "train.crop_size must be >= 1.")
    _require(tr.samples_per_epoch >= 0, "train.samples_per_epoch must be >= 0.")
    _require(tr.stage3_pseudo_weight >= 0.0, "train.stage3_pseudo_weight must be >= 0.")
    _require(tr.empty_mask_patience >= 1, "train.empty_mask_patience must be >= 1.")
    _require(tr.checkpoint_every >= 0, "train.checkpoint_every must be >= 0.")
    _require(tr.optimizer == "adam", "train.optimizer must be 'adam'.")

    _require(cfg.loss.name in STAGE2_LOSSES, f"loss.name must be one of {STAGE2_LOSSES}.")
    _require(cfg.loss.stage3_name in STAGE3_LOSSES, f"loss.stage3_name must be one of {STAGE3_LOSSES}.")

    _require(
        cfg.model.in_channels == tr.num_slices,
        f"model.in_channels ({cfg.model.in_channels}) must equal train.num_slices ({tr.num_slices}).",
    )
    _require(
        cfg.model.num_classes == pl.num_classes,
        f"model.num_classes ({cfg.model.num_classes}) must equal pseudolabel.num_classes ({pl.num_classes}).",
    )
    _require(cfg.workers >= 0, "workers must be >= 0.")
    _require(
        cfg.logging.level.upper() in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"},
        "logging.level must be a standard level name.",
    )


def apply_overrides(raw: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """
    Apply `key.path=value` overrides to a raw config mapping.

    Values are parsed as YAML scalars so `3`, `0.5`, `true` and `[1, 2]`
    keep their types.
    """

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' must look like key.path=value.")
        key, text = item.split("=", 1)
        parts = [part for part in key.strip().split(".") if part]
        if not parts:
            raise ConfigError(f"Override '{item}' has an empty key.")
        node = raw
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
                node[part] = child
            if not isinstance(child, dict):
                raise ConfigError(f"Override '{item}': '{part}' is not a section.")
            node = child
        node[parts[-1]] = yaml.safe_load(text)
    return raw


def parse_run_config(raw: dict[str, Any]) -> RunConfig:
    """
    Build a RunConfig from a raw mapping (already overridden).
    """

    cfg = _parse_section(RunConfig, raw, "")
    env_output = os.getenv(OUTPUT_DIR_ENV)
    if env_output:
        cfg = replace(cfg, output_dir=env_output)
    _check_invariants(cfg)
    return cfg


def load_run_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    """
    Load a run config from YAML (or defaults when path is None).

    Inputs:
    - path: YAML file; None means "all defaults".
    - overrides: iterable of `key.path=value` strings.

    Outputs:
    - RunConfig with every default materialized.
    """

    raw: dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Config file '{path}' not found.")
        with open(path, "r", encoding="utf-8") as handle:
            loaded = yaml.safe_load(handle) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file '{path}' must contain a mapping.")
        raw = loaded
    raw = apply_overrides(raw, overrides)
    return parse_run_config(raw)


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(item) for item in value]
    if isinstance(value, list):
        return [_plain(item) for item in value]
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    return value


def config_to_dict(cfg: Any) -> dict[str, Any]:
    return _plain(asdict(cfg))


def write_resolved_config(cfg: RunConfig, path: str | Path) -> Path:
    """
    Write the materialized config as YAML so the run can be reproduced.
    """

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as handle:
        yaml.safe_dump(config_to_dict(cfg), handle, sort_keys=False)
    return target
