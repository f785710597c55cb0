"""Strict experiment configuration: YAML in, validated dataclasses out.

Unknown keys are rejected with field-level messages so config typos never
silently change an experiment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .distill import DropPolicy, TrainConfig
from .encoder import BaselineConfig, EncoderConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


def _coerce(value, annotation):
    if isinstance(value, list):
        return tuple(value) if "tuple" in str(annotation) else value
    return value


def build_dataclass(cls, mapping: dict, where: str):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys."""
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(mapping) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}; "
                          f"valid keys are {sorted(known)}")
    kwargs = {}
    for key, value in mapping.items():
        f = known[key]
        if f.name == "drop_policy" and isinstance(value, dict):
            value = build_dataclass(DropPolicy, value, f"{where}.drop_policy")
        kwargs[key] = _coerce(value, f.type)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


@dataclass(frozen=True)
class ModelConfig:
    """Architecture toggles mirroring the component-ablation rows.

    ``grouped_stem`` off builds the plain single-stem baseline ViT at
    ``baseline_depth``; ``branches`` off keeps the grouped stems but removes
    the per-group encoder layers (the naive grouped-stem variant).
    """

    grouped_stem: bool = True
    instance_norm: bool = True
    branches: bool = True
    embed_dim: int = 64
    heads: int = 4
    branch_depth: int = 2
    shared_depth: int = 3
    baseline_depth: int = 4
    patch_size: int = 8
    image_size: int = 32
    mlp_ratio: float = 4.0
    aggregation: str = "pre"
    flip_groups: bool = False

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            embed_dim=self.embed_dim, heads=self.heads,
            branch_depth=self.branch_depth if self.branches else 0,
            shared_depth=self.shared_depth, patch_size=self.patch_size,
            image_size=self.image_size, mlp_ratio=self.mlp_ratio,
            aggregation=self.aggregation, flip_groups=self.flip_groups,
            instance_norm=self.instance_norm)

    def baseline_config(self, in_channels: int) -> BaselineConfig:
        return BaselineConfig(
            in_channels=in_channels, embed_dim=self.embed_dim, heads=self.heads,
            depth=self.baseline_depth, patch_size=self.patch_size,
            image_size=self.image_size, mlp_ratio=self.mlp_ratio)


@dataclass(frozen=True)
class TrainSection:
    dataset: str = ""
    checkpoint_every: int = 0
    dtype: str = "float32"


@dataclass(frozen=True)
class EmbedSection:
    checkpoint: str = ""
    dataset: str = ""
    drop: tuple = ()
    flip: bool = False
    ood: bool = False
    out_file: str = "embeddings.npz"


@dataclass(frozen=True)
class EvalSection:
    checkpoint: str = ""
    train_dataset: str = ""
    eval_dataset: str = ""
    probe: bool = True
    retrieval: bool = True
    knn_k: int = 5
    postprocess_search: bool = False
    flip_check: bool = False
    limited_context: bool = False
    cosine_drops: tuple = ()
    cosine_samples: int = 200
    aggregate_to: str = ""
    probe_epochs: int = 120
    probe_hidden: int = 128


@dataclass(frozen=True)
class AnalyzeSection:
    dataset: str = ""
    k: int = 0
    n_samples: int = 1000
    parity_threshold: float = 0.8
    write_manifest: bool = False
    extractor_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/exp"
    data: SynthConfig | None = None
    model: ModelConfig | None = None
    train: TrainSection | None = None
    train_params: TrainConfig | None = None
    embed: EmbedSection | None = None
    eval: EvalSection | None = None
    analyze: AnalyzeSection | None = None

    def resolved(self) -> dict:
        out = {"seed": self.seed, "out": self.out}
        for name in ("data", "model", "train", "train_params", "embed", "eval",
                     "analyze"):
            value = getattr(self, name)
            if value is not None:
                out[name] = dataclasses.asdict(value)
        return out


_SECTION_TYPES = {
    "data": SynthConfig,
    "model": ModelConfig,
    "train": TrainSection,
    "train_params": TrainConfig,
    "embed": EmbedSection,
    "eval": EvalSection,
    "analyze": AnalyzeSection,
}


def load_experiment_config(path: str | Path, overrides: dict | None = None
                           ) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    overrides = overrides or {}
    unknown = set(raw) - set(_SECTION_TYPES) - {"seed", "out"}
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}; valid "
                          f"keys are {sorted(set(_SECTION_TYPES) | {'seed', 'out'})}")
    kwargs = {
        "seed": int(overrides.get("seed", raw.get("seed", 0))),
        "out": str(overrides.get("out", raw.get("out", "runs/exp"))),
    }
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            kwargs[name] = build_dataclass(cls, raw[name], f"{path}:{name}")
    return ExperimentConfig(**kwargs)


def write_resolved_config(cfg: ExperimentConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg.resolved(), sort_keys=False))
    return path
