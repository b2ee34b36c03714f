"""Configuration management for pixtok.

Every configuration object is a pydantic model that rejects unknown keys.
Files are read with the YAML loader, so both JSON and YAML configs work.
"""

from __future__ import annotations

import copy
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

THREADS_ENV = "PIXTOK_THREADS"

# ViT size variants: (layers, hidden dim, MLP dim, heads).
MODEL_PRESETS: dict[str, tuple[int, int, int, int]] = {
    "T": (12, 192, 768, 12),
    "S": (12, 384, 1536, 12),
    "B": (12, 768, 3072, 12),
    "L": (24, 1024, 4096, 16),
}

# Decoder heads for the scaled-down CIFAR MAE decoder, per encoder size.
MAE_DECODER_HEADS = {"T": 8, "S": 12, "B": 16, "L": 16}

Study = Literal[
    "supervised",
    "mae_pretrain",
    "mae_finetune",
    "pe_ablation",
    "permutation_study",
    "trend_sweep",
    "lr_sweep",
]

PATH_FIELDS = (("dataset", "path"), ("init_checkpoint",), ("output_dir",), ("model", "permutation", "path"))


def _parse_delta(value: Any) -> Optional[int]:
    if value is None:
        return None
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "none"):
        return None
    if isinstance(value, float) and value == float("inf"):
        return None
    if isinstance(value, bool):
        raise ValueError(f"delta must be an integer or 'inf', got {value!r}")
    number = float(value)
    if not number.is_integer():
        raise ValueError(f"delta must be an integer or 'inf', got {value!r}")
    return int(number)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PermutationSpec(_Strict):
    """Shared pixel permutation: generated from (T, delta, seed) or loaded from ``path``."""

    swaps: int = Field(0, ge=0)
    delta: Optional[int] = None
    seed: int = 0
    path: Optional[str] = None

    @field_validator("delta", mode="before")
    @classmethod
    def _delta(cls, value: Any) -> Optional[int]:
        delta = _parse_delta(value)
        if delta is not None and delta < 2:
            raise ValueError("delta must be >= 2 or 'inf'")
        return delta


class ModelConfig(_Strict):
    """Encoder architecture, tokenizer and head choices."""

    layers: int = Field(12, ge=0)
    dim: int = Field(192, ge=1)
    mlp_dim: int = Field(768, ge=1)
    heads: int = Field(12, ge=1)
    image_size: int = Field(32, ge=1)
    tokenizer: Literal["pixel", "patch", "permuted-patch"] = "pixel"
    patch_size: int = Field(1, ge=1)
    permutation: Optional[PermutationSpec] = None
    pe: Literal["learned", "sincos", "none"] = "learned"
    head: Literal["cls", "gap"] = "gap"
    use_cls: bool = True
    num_classes: int = Field(100, ge=1)
    drop_path_rate: float = Field(0.1, ge=0.0, lt=1.0)
    qkv_bias: bool = True
    ln_eps: float = Field(1e-6, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.tokenizer == "pixel" and self.patch_size != 1:
            raise ValueError("pixel tokenizer requires patch_size 1")
        if self.image_size % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.tokenizer == "permuted-patch" and self.permutation is None:
            raise ValueError("permuted-patch tokenizer requires a permutation")
        if self.pe == "sincos" and self.dim % 4:
            raise ValueError("sincos position embedding requires dim divisible by 4")
        if self.head == "cls" and not self.use_cls:
            raise ValueError("cls head requires use_cls")
        return self

    @classmethod
    def preset(cls, size: str, **overrides: Any) -> "ModelConfig":
        """Named size variant (T/S/B/L) with optional field overrides."""
        try:
            layers, dim, mlp_dim, heads = MODEL_PRESETS[size.upper()]
        except KeyError as exc:
            raise ConfigError(f"unknown model size {size!r}; expected one of {sorted(MODEL_PRESETS)}") from exc
        fields = dict(layers=layers, dim=dim, mlp_dim=mlp_dim, heads=heads)
        fields.update(overrides)
        return cls(**fields)

    @property
    def effective_patch(self) -> int:
        return 1 if self.tokenizer == "pixel" else self.patch_size

    @property
    def grid_side(self) -> int:
        return self.image_size // self.effective_patch

    @property
    def num_tokens(self) -> int:
        """L = H·W / p²."""
        return self.grid_side**2

    @property
    def token_dim(self) -> int:
        return 3 * self.effective_patch**2


class MAEConfig(_Strict):
    """Masked-autoencoding head settings."""

    mask_ratio: float = Field(0.75, gt=0.0, lt=1.0)
    decoder_layers: int = Field(4, ge=0)
    decoder_dim: int = Field(96, ge=1)
    decoder_heads: int = Field(8, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "MAEConfig":
        if self.decoder_dim % self.decoder_heads:
            raise ValueError("decoder_dim must be divisible by decoder_heads")
        return self

    @classmethod
    def for_encoder(cls, model: ModelConfig, size: str = "T", **overrides: Any) -> "MAEConfig":
        """Decoder scaled to the encoder: 4 layers, d/2 wide."""
        fields: dict[str, Any] = dict(decoder_dim=model.dim // 2, decoder_heads=MAE_DECODER_HEADS[size.upper()])
        fields.update(overrides)
        return cls(**fields)


class OptimizerConfig(_Strict):
    """AdamW hyper-parameters."""

    lr: float = Field(0.004, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.95, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.3, ge=0.0)
    layer_decay: float = Field(1.0, gt=0.0, le=1.0)
    clip_grad: Optional[float] = Field(None, gt=0.0)
    ema_decay: Optional[float] = Field(None, ge=0.0, lt=1.0)


class ScheduleConfig(_Strict):
    """Linear warmup then cosine decay, counted in epochs."""

    warmup_epochs: int = Field(20, ge=0)
    total_epochs: int = Field(2400, ge=1)
    min_lr: float = Field(1e-6, ge=0.0)
    steps_per_epoch: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "ScheduleConfig":
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup_epochs must be smaller than total_epochs")
        return self


class AugmentationConfig(_Strict):
    """Training-phase augmentations; evaluation never augments."""

    enabled: bool = True
    random_crop: bool = True
    crop_padding: int = Field(4, ge=0)
    hflip_prob: float = Field(0.5, ge=0.0, le=1.0)
    mixup_alpha: float = Field(0.8, ge=0.0)
    cutmix_alpha: float = Field(1.0, ge=0.0)
    mix_switch_prob: float = Field(0.5, ge=0.0, le=1.0)
    randaug: bool = True
    randaug_magnitude: int = Field(9, ge=0, le=10)
    randaug_prob: float = Field(0.5, ge=0.0, le=1.0)
    randaug_ops: int = Field(2, ge=0)

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(enabled=False, random_crop=False, hflip_prob=0.0, mixup_alpha=0.0, cutmix_alpha=0.0, randaug=False)


class DatasetSpec(_Strict):
    """Where images come from and how they are normalized."""

    source: Literal["cifar100", "synthetic", "raw-folder"] = "synthetic"
    path: Optional[str] = None
    kind: Literal["quadrant", "color"] = "quadrant"
    count: int = Field(256, ge=1)
    val_count: int = Field(128, ge=1)
    seed: int = 0
    image_size: int = Field(8, ge=1)
    mean: tuple[float, float, float] = (0.5071, 0.4865, 0.4409)
    std: tuple[float, float, float] = (0.2673, 0.2564, 0.2762)

    @model_validator(mode="after")
    def _check(self) -> "DatasetSpec":
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"dataset source {self.source!r} requires a path")
        if any(s <= 0 for s in self.std):
            raise ValueError("normalization std must be positive")
        return self


class TrendConfig(_Strict):
    """Patch-size sweep grid."""

    mode: Literal["fixed_sequence_length", "fixed_input_size"] = "fixed_input_size"
    sequence_side: int = Field(14, ge=1)
    input_size: int = Field(32, ge=1)
    patch_sizes: list[int] = Field(default_factory=lambda: [8, 4, 2, 1])


class ExperimentConfig(_Strict):
    """A complete, resolved experiment."""

    study: Study = "supervised"
    model: ModelConfig = Field(default_factory=ModelConfig)
    mae: Optional[MAEConfig] = None
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    batch_size: int = Field(64, ge=1)
    eval_interval: int = Field(10, ge=1)
    eval_train: bool = True
    init_checkpoint: Optional[str] = None
    T_list: Optional[list[int]] = None
    delta_list: Optional[list[Optional[int]]] = None
    lr_list: Optional[list[float]] = None
    trend: Optional[TrendConfig] = None
    divergence_factor: float = Field(10.0, gt=1.0)

    @field_validator("delta_list", mode="before")
    @classmethod
    def _deltas(cls, value: Any) -> Any:
        if value is None:
            return None
        return [_parse_delta(v) for v in value]

    @model_validator(mode="after")
    def _study_fields(self) -> "ExperimentConfig":
        if self.study == "permutation_study" and (not self.T_list or not self.delta_list):
            raise ValueError("permutation_study requires T_list and delta_list")
        if self.study == "lr_sweep" and not self.lr_list:
            raise ValueError("lr_sweep requires lr_list")
        if self.study == "trend_sweep" and self.trend is None:
            raise ValueError("trend_sweep requires a trend section")
        if self.study in ("mae_pretrain", "mae_finetune") and self.mae is None:
            raise ValueError(f"{self.study} requires an mae section")
        if self.delta_list and any(d is not None and d < 2 for d in self.delta_list):
            raise ValueError("every delta must be >= 2 or 'inf'")
        return self

    @property
    def out_path(self) -> Path:
        return Path(self.output_dir)


class RunManifest(_Strict):
    """Snapshot written to the run directory before training starts."""

    config: dict[str, Any]
    seed: int
    code_version: str
    started_at: datetime
    output_paths: dict[str, str]


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def desk_preset(study: Study = "supervised") -> ExperimentConfig:
    """Laptop-scale configuration: 8×8 synthetic images, 4-layer d=64 encoder."""
    model = ModelConfig(
        layers=4, dim=64, mlp_dim=128, heads=4, image_size=8, num_classes=4, drop_path_rate=0.0
    )
    fields: dict[str, Any] = dict(
        study=study,
        model=model,
        optimizer=OptimizerConfig(lr=1e-3, weight_decay=0.05),
        schedule=ScheduleConfig(warmup_epochs=5, total_epochs=100),
        dataset=DatasetSpec(source="synthetic", kind="quadrant", count=256, val_count=128, image_size=8),
        augmentation=AugmentationConfig.disabled(),
        batch_size=32,
        eval_interval=10,
        output_dir=f"runs/{study}",
    )
    if study in ("mae_pretrain", "mae_finetune"):
        fields["mae"] = MAEConfig(decoder_layers=2, decoder_dim=32, decoder_heads=4)
    if study == "permutation_study":
        model = model.model_copy(update=dict(tokenizer="patch", patch_size=2))
        fields.update(model=model, T_list=[0, 8, 32], delta_list=[2, 4, None])
    if study == "trend_sweep":
        fields["trend"] = TrendConfig(mode="fixed_input_size", input_size=8, patch_sizes=[4, 2, 1])
    if study == "lr_sweep":
        fields["lr_list"] = [0.0, 1e-4, 1e-3, 1e-2, 1e2]
    return ExperimentConfig(**fields)


def full_preset(study: Study = "supervised") -> ExperimentConfig:
    """Full-scale CIFAR-100 recipe; far beyond desk compute."""
    model = ModelConfig.preset("T", image_size=32, num_classes=100, drop_path_rate=0.1)
    fields: dict[str, Any] = dict(
        study=study,
        model=model,
        optimizer=OptimizerConfig(lr=0.004, beta1=0.9, beta2=0.95, weight_decay=0.3, ema_decay=0.9999),
        schedule=ScheduleConfig(warmup_epochs=20, total_epochs=2400, min_lr=1e-6),
        dataset=DatasetSpec(source="cifar100", path="cifar-100-binary", image_size=32),
        augmentation=AugmentationConfig(),
        batch_size=1024,
        output_dir=f"runs/full-{study}",
    )
    if study == "mae_pretrain":
        fields.update(
            mae=MAEConfig.for_encoder(model, "T"),
            optimizer=OptimizerConfig(lr=0.024, weight_decay=0.05, beta2=0.95, layer_decay=0.85),
            schedule=ScheduleConfig(warmup_epochs=40, total_epochs=1600),
        )
    if study == "mae_finetune":
        fields.update(
            mae=MAEConfig.for_encoder(model, "T"),
            model=model.model_copy(update=dict(drop_path_rate=0.3)),
            optimizer=OptimizerConfig(lr=0.004, weight_decay=0.02, beta2=0.999, layer_decay=0.65),
            schedule=ScheduleConfig(warmup_epochs=5, total_epochs=100),
        )
    if study == "permutation_study":
        base = ModelConfig.preset("B", image_size=224, num_classes=1000, tokenizer="patch", patch_size=16, pe="sincos")
        fields.update(model=base, T_list=[0, 5000, 10000, 15000, 20000, 25000], delta_list=[2, 4, 8, 16, 32, None])
    if study == "trend_sweep":
        fields["trend"] = TrendConfig(mode="fixed_sequence_length", sequence_side=14, patch_sizes=[16, 8, 4, 2, 1])
    if study == "lr_sweep":
        fields["lr_list"] = [0.001, 0.002, 0.004, 0.008]
    return ExperimentConfig(**fields)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _merge_configs(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge two configuration dictionaries.

    Args:
        base: Base configuration dictionary.
        override: Configuration to merge into base.

    Returns:
        Merged configuration dictionary.
    """
    for key, value in override.items():
        if key in base and isinstance(base[key], dict) and isinstance(value, dict):
            base[key] = _merge_configs(base[key], value)
        else:
            base[key] = value
    return base


def _dotted_to_nested(overrides: dict[str, Any]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for dotted, value in overrides.items():
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def _resolve_paths(raw: dict[str, Any], base_dir: Path) -> dict[str, Any]:
    for path_keys in PATH_FIELDS:
        node: Any = raw
        for key in path_keys[:-1]:
            node = node.get(key) if isinstance(node, dict) else None
        if isinstance(node, dict) and isinstance(node.get(path_keys[-1]), str):
            value = Path(node[path_keys[-1]])
            if not value.is_absolute():
                node[path_keys[-1]] = str((base_dir / value).resolve())
    return raw


def validate_config(raw: dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration in {source}: {exc}") from exc


def load_config(
    path: Union[str, Path],
    overrides: Optional[dict[str, Any]] = None,
) -> ExperimentConfig:
    """Load an experiment config, then apply dotted-key overrides.

    Relative paths inside the file resolve against the file's directory;
    overrides are applied after file values and the result re-validated.

    Args:
        path: JSON (or YAML) file.
        overrides: e.g. ``{"seed": 3, "model.pe": "none"}``.

    Raises:
        ConfigError: Missing file, unparseable content or schema violation.
    """
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        with open(config_path, "r") as f:
            raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"could not parse config {config_path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {config_path} must contain a mapping at top level")
    raw = _resolve_paths(raw, config_path.resolve().parent)
    if overrides:
        raw = _merge_configs(raw, _dotted_to_nested(overrides))
    return validate_config(raw, str(config_path))


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Return a re-validated copy of ``cfg`` with dotted-key overrides."""
    raw = _merge_configs(copy.deepcopy(cfg.model_dump(mode="json")), _dotted_to_nested(overrides))
    return validate_config(raw, "overrides")


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Write a resolved configuration as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.model_dump_json(indent=2) + "\n")
    return path


def thread_limit() -> int:
    """Parallelism cap from ``PIXTOK_THREADS`` (default 1).

    Raises:
        ConfigError: If the variable is set to something other than a positive integer.
    """
    value = os.environ.get(THREADS_ENV)
    if value is None or value == "":
        return 1
    try:
        threads = int(value)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from exc
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    return threads
