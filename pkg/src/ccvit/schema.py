"""Channel identities, context/concept grouping, and batch splitting.

Every multi-channel image is viewed as two stacks: context channels (structural
references that look alike across samples) and concept channels (experiment-
specific content). The :class:`GroupSchema` is the single source of truth for
that assignment; everything downstream consumes it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import torch
import yaml


class SchemaError(ValueError):
    """A channel manifest, grouped batch, or sharing plan violates its contract."""


class ChannelRole(str, Enum):
    CONTEXT = "context"
    CONCEPT = "concept"

    @classmethod
    def parse(cls, value: str) -> "ChannelRole":
        v = str(value).strip().lower()
        aliases = {"context": cls.CONTEXT, "ctx": cls.CONTEXT,
                   "concept": cls.CONCEPT, "con": cls.CONCEPT}
        if v not in aliases:
            raise SchemaError(f"unknown channel role {value!r} (expected context/concept)")
        return aliases[v]


@dataclass(frozen=True)
class ChannelSpec:
    """One named channel: its role and its position in the stored image stack."""

    name: str
    role: ChannelRole
    source_index: int


@dataclass(frozen=True)
class GroupSchema:
    """Ordered channel list split into a context group and a concept group.

    Within-group order follows manifest order. Downstream encoders must be
    invariant to that order; the schema only fixes it for reproducibility.
    """

    channels: tuple[ChannelSpec, ...]

    def __post_init__(self):
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate channel names: {dupes}")
        idx = sorted(c.source_index for c in self.channels)
        if idx != list(range(len(self.channels))):
            raise SchemaError(
                f"source indices {idx} are not a permutation of 0..{len(self.channels) - 1}")
        if self.n_context < 1:
            raise SchemaError("schema needs at least one context channel")
        if self.n_concept < 1:
            raise SchemaError("schema needs at least one concept channel")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_context(self) -> int:
        return sum(1 for c in self.channels if c.role is ChannelRole.CONTEXT)

    @property
    def n_concept(self) -> int:
        return sum(1 for c in self.channels if c.role is ChannelRole.CONCEPT)

    @property
    def context_channels(self) -> tuple[ChannelSpec, ...]:
        return tuple(c for c in self.channels if c.role is ChannelRole.CONTEXT)

    @property
    def concept_channels(self) -> tuple[ChannelSpec, ...]:
        return tuple(c for c in self.channels if c.role is ChannelRole.CONCEPT)

    @property
    def context_indices(self) -> tuple[int, ...]:
        return tuple(c.source_index for c in self.context_channels)

    @property
    def concept_indices(self) -> tuple[int, ...]:
        return tuple(c.source_index for c in self.concept_channels)

    def channel(self, name: str) -> ChannelSpec:
        for c in self.channels:
            if c.name == name:
                return c
        raise SchemaError(f"no channel named {name!r}")

    def to_manifest(self) -> dict:
        return {"channels": [
            {"name": c.name, "role": c.role.value, "index": c.source_index}
            for c in self.channels]}

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_manifest(), sort_keys=False)


def parse_schema(manifest: str | Path | dict) -> GroupSchema:
    """Parse a channel manifest into a validated :class:`GroupSchema`.

    Accepts a mapping, a YAML/JSON text document, or a path to one. Each
    channel record needs ``name``, ``role`` and ``index`` keys. Parsing is
    idempotent: ``parse_schema(schema.to_text())`` equals ``schema``.
    """
    if isinstance(manifest, Path):
        manifest = manifest.read_text()
    if isinstance(manifest, str):
        try:
            manifest = yaml.safe_load(manifest)
        except yaml.YAMLError as e:
            raise SchemaError(f"manifest is not valid YAML/JSON: {e}") from e
    if not isinstance(manifest, dict) or "channels" not in manifest:
        raise SchemaError("manifest must be a mapping with a 'channels' list")
    records = manifest["channels"]
    if not isinstance(records, list) or not records:
        raise SchemaError("'channels' must be a non-empty list")
    specs = []
    for i, rec in enumerate(records):
        missing = {"name", "role", "index"} - set(rec)
        if missing:
            raise SchemaError(f"channel record {i} is missing keys {sorted(missing)}")
        specs.append(ChannelSpec(name=str(rec["name"]),
                                 role=ChannelRole.parse(rec["role"]),
                                 source_index=int(rec["index"])))
    return GroupSchema(channels=tuple(specs))


@dataclass
class GroupedBatch:
    """A batch split into context and concept channel stacks.

    ``x_c1`` holds context channels [B, C1, h, w] and ``x_c2`` concept
    channels [B, C2, h, w], both in schema (manifest) order.
    """

    x_c1: torch.Tensor
    x_c2: torch.Tensor

    def __post_init__(self):
        if self.x_c1.ndim != 4 or self.x_c2.ndim != 4:
            raise SchemaError("grouped batch tensors must be [B, C, h, w]")
        b1, _, h1, w1 = self.x_c1.shape
        b2, _, h2, w2 = self.x_c2.shape
        if (b1, h1, w1) != (b2, h2, w2):
            raise SchemaError(
                f"group shapes disagree: {tuple(self.x_c1.shape)} vs {tuple(self.x_c2.shape)}")
        if not (torch.isfinite(self.x_c1).all() and torch.isfinite(self.x_c2).all()):
            raise SchemaError("grouped batch contains non-finite values")

    @property
    def batch_size(self) -> int:
        return self.x_c1.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.x_c1.shape[2], self.x_c1.shape[3]


def split_groups(x: torch.Tensor, schema: GroupSchema) -> GroupedBatch:
    """Split a [B, C, h, w] stack into context and concept groups (Eq.-style reindexing)."""
    if x.ndim != 4:
        raise SchemaError(f"expected [B, C, h, w] input, got shape {tuple(x.shape)}")
    if x.shape[1] != schema.n_channels:
        raise SchemaError(
            f"input has {x.shape[1]} channels but schema defines {schema.n_channels}")
    ctx = x[:, list(schema.context_indices)]
    con = x[:, list(schema.concept_indices)]
    return GroupedBatch(x_c1=ctx, x_c2=con)


def merge_groups(batch: GroupedBatch, schema: GroupSchema) -> torch.Tensor:
    """Inverse of :func:`split_groups`: re-interleave groups by source index."""
    if batch.x_c1.shape[1] != schema.n_context or batch.x_c2.shape[1] != schema.n_concept:
        raise SchemaError("grouped batch channel counts do not match schema")
    b, _, h, w = batch.x_c1.shape
    out = batch.x_c1.new_empty((b, schema.n_channels, h, w))
    for slot, spec in enumerate(schema.context_channels):
        out[:, spec.source_index] = batch.x_c1[:, slot]
    for slot, spec in enumerate(schema.concept_channels):
        out[:, spec.source_index] = batch.x_c2[:, slot]
    return out


@dataclass(frozen=True)
class OODSharingPlan:
    """Forward-pass plan for evaluating on a dataset with several concept channels.

    Each pass pairs the full target context with a single concept channel; the
    final embedding concatenates pass outputs in ``concat_order``, giving
    dimensionality ``len(passes) * model_dim``.
    """

    passes: tuple[tuple[tuple[str, ...], str], ...]
    concat_order: tuple[str, ...]

    def __post_init__(self):
        concepts = [concept for _, concept in self.passes]
        if sorted(concepts) != sorted(set(concepts)) or set(concepts) != set(self.concat_order):
            raise SchemaError("plan passes must cover each concept channel exactly once")
        ctx_lists = {ctx for ctx, _ in self.passes}
        if len(ctx_lists) != 1:
            raise SchemaError("all plan passes must share the same context channel list")


def build_ood_plan(target_schema: GroupSchema) -> OODSharingPlan:
    """One forward pass per concept channel of the target schema, shared context."""
    ctx_names = tuple(c.name for c in target_schema.context_channels)
    concept_names = tuple(c.name for c in target_schema.concept_channels)
    passes = tuple((ctx_names, name) for name in concept_names)
    return OODSharingPlan(passes=passes, concat_order=concept_names)
