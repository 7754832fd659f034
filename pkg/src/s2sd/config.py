"""Flat JSON run configuration."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SyntheticSpec
from .distill import DistillConfig, check_ascending

MODES = ("baseline", "s2sd", "two_stage_teacher", "two_stage_student")
DML_LOSSES = ("multisimilarity", "margin", "triplet")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class RunConfig:
    # data: synthetic unless both feature files are given
    train_features: str | None = None
    test_features: str | None = None
    n_classes_train: int = 20
    n_classes_test: int = 20
    samples_per_class: int = 25
    feature_dim: int = 64
    spatial: int = 1
    prototype_scale: float = 1.0
    noise_sigma: float = 0.3
    intra_class_subspace_dim: int = 8
    subspace_scale: float = 3.0
    shared_subspace: bool = True
    spatial_jitter: float = 0.05
    data_seed: int = 0
    # heads
    base_dim: int = 8
    base_depth: int = 1
    target_depth: int = 2
    target_hidden: int | None = None
    # DML objective
    dml_loss: str = "multisimilarity"
    ms_alpha: float = 2.0
    ms_beta: float = 40.0
    ms_lambda: float = 0.5
    ms_eps: float = 0.1
    margin_m: float = 0.2
    margin_beta0: float = 0.6
    margin_per_class: bool = False
    beta_lr: float | None = None
    triplet_m: float = 0.2
    lambda_clip: float = 1e-3
    # distillation
    gamma: float = 50.0
    temperature: float = 1.0
    topology: str = "multi"
    target_dims: list = field(default_factory=lambda: [16, 32, 64])
    feature_distill: bool = False
    warmup_n: int = 200
    pooling: str = "avg"
    variant: str = "rowwise_kl"
    # optimizer
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    # schedule
    classes_per_batch: int = 8
    samples_per_batch_class: int = 4
    iterations: int = 2000
    eval_every: int = 500
    seed: int = 0
    output_dir: str | None = None
    mode: str = "s2sd"
    teacher_checkpoint: str | None = None

    def distill_config(self) -> DistillConfig:
        return DistillConfig(gamma=self.gamma, temperature=self.temperature,
                             topology=self.topology, target_dims=list(self.target_dims),
                             feature_distill=self.feature_distill, warmup_n=self.warmup_n,
                             pooling=self.pooling, variant=self.variant)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_classes_train=self.n_classes_train, n_classes_test=self.n_classes_test,
            samples_per_class=self.samples_per_class, feature_dim=self.feature_dim,
            spatial=self.spatial, prototype_scale=self.prototype_scale,
            noise_sigma=self.noise_sigma, intra_class_subspace_dim=self.intra_class_subspace_dim,
            subspace_scale=self.subspace_scale, shared_subspace=self.shared_subspace,
            spatial_jitter=self.spatial_jitter,
            seed=self.data_seed)

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**to_dict(self), **changes})

    def validate(self) -> None:
        positive = ["n_classes_train", "n_classes_test", "samples_per_class", "feature_dim",
                    "spatial", "base_dim", "classes_per_batch", "samples_per_batch_class",
                    "iterations", "eval_every", "lr", "temperature", "ms_alpha", "ms_beta",
                    "prototype_scale"]
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(key, "must be positive")
        for key in ("base_depth", "target_depth"):
            if getattr(self, key) not in (1, 2, 3):
                raise ConfigError(key, "must be 1, 2 or 3")
        if self.samples_per_batch_class < 2:
            raise ConfigError("samples_per_batch_class", "need >= 2 for positive pairs")
        if self.classes_per_batch < 2:
            raise ConfigError("classes_per_batch", "need >= 2 for negatives")
        if self.mode not in MODES:
            raise ConfigError("mode", f"expected one of {MODES}")
        if self.dml_loss not in DML_LOSSES:
            raise ConfigError("dml_loss", f"expected one of {DML_LOSSES}")
        if self.gamma < 0:
            raise ConfigError("gamma", "must be >= 0")
        if self.warmup_n < 0:
            raise ConfigError("warmup_n", "must be >= 0")
        if (self.train_features is None) != (self.test_features is None):
            raise ConfigError("test_features", "give both feature files or neither")
        if self.mode == "two_stage_student" and not self.teacher_checkpoint:
            raise ConfigError("teacher_checkpoint", "required for mode two_stage_student")
        if self.mode == "s2sd":
            if not self.target_dims:
                raise ConfigError("target_dims", "s2sd needs at least one target dim")
            try:
                check_ascending([self.base_dim, *self.target_dims])
            except ValueError as err:
                raise ConfigError("target_dims", str(err)) from None
            if self.topology == "dual" and len(self.target_dims) != 1:
                raise ConfigError("target_dims", "dual topology takes exactly one target dim")
        try:
            self.distill_config().validate()
        except ValueError as err:
            raise ConfigError("distill", str(err)) from None


def _field_types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value, annotation: str):
    """Check a JSON value against the field annotation string."""
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(key, "may not be null")
    base = annotation.replace(" | None", "")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected bool, got {type(value).__name__}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected int, got {type(value).__name__}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected number, got {type(value).__name__}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected string, got {type(value).__name__}")
        return value
    if base == "list":
        if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, "expected a list of ints")
        return list(value)
    raise ConfigError(key, f"unsupported annotation {annotation}")


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    types = _field_types()
    kwargs = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(key, "unknown key")
        kwargs[key] = _coerce(key, value, types[key])
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def parse_config(source) -> RunConfig:
    """Parse a JSON object given as text, a path, or an already-decoded dict."""
    if isinstance(source, dict):
        return from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError("<root>", f"invalid JSON: {err}") from None
    return from_dict(raw)
