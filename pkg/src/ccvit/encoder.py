"""Branched transformer encoder over context/concept channel groups.

The encoder runs each group through its own stack of half-width transformer
layers (aggregating over channels either before or after those layers), fuses
the two streams by feature concatenation + LayerNorm, prepends a learned
classification token, and finishes with full-width shared layers. A plain
single-stem ViT with the same block implementation is provided as the
parameter-matched baseline.
"""

from __future__ import annotations

import math
import subprocess
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schema import GroupSchema, GroupedBatch, parse_schema, split_groups
from .stems import GroupStem, StemConfig, instance_normalize

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry and routing of the grouped encoder.

    ``embed_dim`` is the full trunk width D; branches run at d = D/2 with half
    the attention heads so that per-head dimension matches the trunk.
    ``aggregation`` selects channel pooling before ("pre") or after ("post")
    the branch layers. ``flip_groups`` deliberately routes context tokens
    through the concept branch and vice versa (stems stay with their groups).
    """

    embed_dim: int = 64
    heads: int = 4
    branch_depth: int = 2
    shared_depth: int = 3
    patch_size: int = 8
    image_size: int = 32
    mlp_ratio: float = 4.0
    aggregation: str = "pre"
    flip_groups: bool = False
    instance_norm: bool = True

    def __post_init__(self):
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even (branches run at half width)")
        if self.heads % 2 != 0 or self.embed_dim % self.heads != 0:
            raise ValueError("heads must be even and divide embed_dim")
        if self.branch_dim % self.branch_heads != 0:
            raise ValueError("branch width must be divisible by branch head count")
        if self.branch_depth < 0 or self.shared_depth < 1:
            raise ValueError("need branch_depth >= 0 and shared_depth >= 1")
        if self.aggregation not in ("pre", "post"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def branch_dim(self) -> int:
        return self.embed_dim // 2

    @property
    def branch_heads(self) -> int:
        return self.heads // 2

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def stem_config(self) -> StemConfig:
        return StemConfig(patch_size=self.patch_size, token_dim=self.branch_dim,
                          image_size=self.image_size)


@dataclass(frozen=True)
class BaselineConfig:
    """Plain single-stem ViT used for parameter-matched comparisons."""

    in_channels: int = 4
    embed_dim: int = 64
    heads: int = 4
    depth: int = 12
    patch_size: int = 8
    image_size: int = 32
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("heads must divide embed_dim")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class EncoderOutput:
    """cls: [B, D] pooled representation; patches: [B, N, D] token features."""

    cls: torch.Tensor
    patches: torch.Tensor
    intermediates: dict | None = None


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block with GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def branch_encode_pre(tokens: torch.Tensor, blocks: Iterable[Block]) -> torch.Tensor:
    """Mean-pool [B, C_g, N, d] over channels FIRST, then run the branch layers."""
    x = tokens.mean(dim=1)
    for blk in blocks:
        x = blk(x)
    return x


def branch_encode_post(tokens: torch.Tensor, blocks: Iterable[Block]) -> torch.Tensor:
    """Run branch layers on each channel independently, THEN mean-pool channels."""
    b, c_g, n, d = tokens.shape
    x = tokens.reshape(b * c_g, n, d)
    for blk in blocks:
        x = blk(x)
    return x.reshape(b, c_g, n, d).mean(dim=1)


class GroupedEncoder(nn.Module):
    """Two half-width branches (context, concept) feeding a shared full-width trunk."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        stem_cfg = cfg.stem_config()
        self.context_stem = GroupStem(stem_cfg)
        self.concept_stem = GroupStem(stem_cfg)
        self.mask_token = nn.Parameter(torch.zeros(cfg.branch_dim))
        self.context_branch = nn.ModuleList(
            Block(cfg.branch_dim, cfg.branch_heads, cfg.mlp_ratio)
            for _ in range(cfg.branch_depth))
        self.concept_branch = nn.ModuleList(
            Block(cfg.branch_dim, cfg.branch_heads, cfg.mlp_ratio)
            for _ in range(cfg.branch_depth))
        self.fuse_norm = nn.LayerNorm(cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.trunk = nn.ModuleList(
            Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.shared_depth))
        self.final_norm = nn.LayerNorm(cfg.embed_dim)

    def _run_branch(self, tokens: torch.Tensor, blocks: nn.ModuleList) -> torch.Tensor:
        if self.cfg.aggregation == "pre":
            return branch_encode_pre(tokens, blocks)
        return branch_encode_post(tokens, blocks)

    def fuse(self, ctx: torch.Tensor, con: torch.Tensor) -> torch.Tensor:
        """Concatenate branch outputs on the feature dim, LayerNorm, prepend cls."""
        if ctx.shape[:2] != con.shape[:2]:
            raise ValueError(f"branch outputs disagree: {tuple(ctx.shape)} vs "
                             f"{tuple(con.shape)}")
        fused = self.fuse_norm(torch.cat([ctx, con], dim=-1))
        cls = self.cls_token.to(fused.dtype).expand(fused.shape[0], -1, -1)
        return torch.cat([cls, fused], dim=1)

    def forward_groups(self, x_c1: torch.Tensor, x_c2: torch.Tensor,
                       mask: torch.Tensor | None = None,
                       flip: bool | None = None,
                       return_intermediates: bool = False) -> EncoderOutput:
        """Full pipeline on pre-split groups.

        ``mask`` [B, N] replaces masked stem tokens of BOTH groups with the
        learned mask token. ``flip`` overrides ``cfg.flip_groups`` and swaps
        which branch each group's tokens pass through (stems stay put).
        """
        flip = self.cfg.flip_groups if flip is None else flip
        if self.cfg.instance_norm:
            x_c1 = instance_normalize(x_c1)
            x_c2 = instance_normalize(x_c2)
        ctx_tokens = self.context_stem.tokenize(x_c1, mask=mask, mask_token=self.mask_token)
        con_tokens = self.concept_stem.tokenize(x_c2, mask=mask, mask_token=self.mask_token)
        if flip:
            ctx = self._run_branch(con_tokens, self.context_branch)
            con = self._run_branch(ctx_tokens, self.concept_branch)
        else:
            ctx = self._run_branch(ctx_tokens, self.context_branch)
            con = self._run_branch(con_tokens, self.concept_branch)
        x = self.fuse(ctx, con)
        for blk in self.trunk:
            x = blk(x)
        x = self.final_norm(x)
        out = EncoderOutput(cls=x[:, 0], patches=x[:, 1:])
        if return_intermediates:
            # streams named by token origin: context_stream carries the context
            # tokens regardless of which branch processed them
            out.intermediates = {"context_stream": con if flip else ctx,
                                 "concept_stream": ctx if flip else con}
        return out

    def forward(self, batch: GroupedBatch, **kw) -> EncoderOutput:
        return self.forward_groups(batch.x_c1, batch.x_c2, **kw)

    def encode(self, x: torch.Tensor, schema: GroupSchema,
               mask: torch.Tensor | None = None, flip: bool | None = None,
               return_intermediates: bool = False) -> EncoderOutput:
        """Split a raw [B, C, h, w] stack by ``schema`` and run the encoder."""
        gb = split_groups(x, schema)
        return self.forward_groups(gb.x_c1, gb.x_c2, mask=mask, flip=flip,
                                   return_intermediates=return_intermediates)


class BaselineViT(nn.Module):
    """Standard ViT with one C-channel patchify stem; the comparison backbone."""

    def __init__(self, cfg: BaselineConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Conv2d(cfg.in_channels, cfg.embed_dim,
                              kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_tokens + 1, cfg.embed_dim))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.mask_token = nn.Parameter(torch.zeros(cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.embed_dim)

    def _pos_for(self, n_tokens: int) -> torch.Tensor:
        if n_tokens == self.cfg.n_tokens:
            return self.pos_embed
        g0 = self.cfg.image_size // self.cfg.patch_size
        g = int(round(math.sqrt(n_tokens)))
        cls_pos, grid = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        grid = grid.reshape(1, g0, g0, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(g, g), mode="bicubic", align_corners=False)
        grid = grid.permute(0, 2, 3, 1).reshape(1, n_tokens, -1)
        return torch.cat([cls_pos, grid], dim=1)

    def encode(self, x: torch.Tensor, schema: GroupSchema | None = None,
               mask: torch.Tensor | None = None, **_) -> EncoderOutput:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"baseline stem expects {self.cfg.in_channels} channels, "
                             f"got {x.shape[1]}")
        tokens = self.proj(x).flatten(2).transpose(1, 2)
        if mask is not None:
            fill = self.mask_token.to(tokens.dtype).reshape(1, 1, -1)
            tokens = torch.where(mask[:, :, None], fill, tokens)
        cls = self.cls_token.to(tokens.dtype).expand(tokens.shape[0], -1, -1)
        x_seq = torch.cat([cls, tokens], dim=1) + self._pos_for(tokens.shape[1]).to(tokens.dtype)
        for blk in self.blocks:
            x_seq = blk(x_seq)
        x_seq = self.final_norm(x_seq)
        return EncoderOutput(cls=x_seq[:, 0], patches=x_seq[:, 1:])

    forward = encode


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def transformer_block_params(width: int, mlp_ratio: float = 4.0) -> int:
    """Closed-form parameter count of one pre-norm block (biased qkv/proj/MLP, 2 LN)."""
    hidden = int(width * mlp_ratio)
    attn = 3 * width * width + 3 * width + width * width + width
    mlp = width * hidden + hidden + hidden * width + width
    norms = 4 * width
    return attn + mlp + norms


def count_parameters(cfg: EncoderConfig) -> int:
    """Analytic parameter total of the grouped encoder.

    Counts stems, positional tables, branch + trunk blocks, fusion and final
    LayerNorms, and the cls token. Projection heads and the mask token are
    excluded so that the total is comparable to a plain ViT backbone.
    """
    d, D = cfg.branch_dim, cfg.embed_dim
    n = cfg.n_tokens
    stems = 2 * (cfg.patch_size ** 2 * d + d)
    pos = 2 * n * d
    branches = 2 * cfg.branch_depth * transformer_block_params(d, cfg.mlp_ratio)
    trunk = cfg.shared_depth * transformer_block_params(D, cfg.mlp_ratio)
    fuse_norm = 2 * D
    cls = D
    final_norm = 2 * D
    return stems + pos + branches + trunk + fuse_norm + cls + final_norm


def count_baseline_parameters(cfg: BaselineConfig) -> int:
    """Analytic parameter total of the single-stem baseline ViT (mask token excluded)."""
    D = cfg.embed_dim
    stem = cfg.in_channels * cfg.patch_size ** 2 * D + D
    pos = (cfg.n_tokens + 1) * D
    cls = D
    blocks = cfg.depth * transformer_block_params(D, cfg.mlp_ratio)
    final_norm = 2 * D
    return stem + pos + cls + blocks + final_norm


def enumerate_parameters(module: nn.Module, exclude: tuple[str, ...] = ("mask_token",)) -> int:
    """Runtime parameter count matching the analytic formulas' scope."""
    return sum(p.numel() for name, p in module.named_parameters()
               if not any(name.endswith(e) for e in exclude))


def normalized_shared_depth(baseline_depth: int, cfg: EncoderConfig,
                            in_channels: int = 4) -> int:
    """Largest shared depth whose grouped total stays within the baseline budget.

    A width-d block carries roughly a quarter of a width-D block's parameters,
    so two branches of two layers trade against about one full-width layer.
    """
    baseline = count_baseline_parameters(BaselineConfig(
        in_channels=in_channels, embed_dim=cfg.embed_dim, heads=cfg.heads,
        depth=baseline_depth, patch_size=cfg.patch_size, image_size=cfg.image_size,
        mlp_ratio=cfg.mlp_ratio))
    best = None
    for depth in range(1, baseline_depth + 2):
        total = count_parameters(EncoderConfig(
            embed_dim=cfg.embed_dim, heads=cfg.heads, branch_depth=cfg.branch_depth,
            shared_depth=depth, patch_size=cfg.patch_size, image_size=cfg.image_size,
            mlp_ratio=cfg.mlp_ratio, aggregation=cfg.aggregation))
        if total <= baseline:
            best = depth
    if best is None:
        raise ValueError("branch stack alone exceeds the baseline parameter budget")
    return best


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def _git_revision() -> str:
    try:
        return subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                              text=True, timeout=5).stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def save_checkpoint(path: str | Path, model: nn.Module, schema: GroupSchema | None,
                    meta: dict | None = None) -> None:
    """Self-describing archive: schema + config + parameters + provenance."""
    if isinstance(model, GroupedEncoder):
        kind, cfg = "grouped", asdict(model.cfg)
    elif isinstance(model, BaselineViT):
        kind, cfg = "baseline", asdict(model.cfg)
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": cfg,
        "schema": schema.to_manifest() if schema is not None else None,
        "state": model.state_dict(),
        "meta": {"git": _git_revision(), **(meta or {})},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[nn.Module, GroupSchema | None, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    if payload["kind"] == "grouped":
        model = GroupedEncoder(EncoderConfig(**payload["config"]))
    elif payload["kind"] == "baseline":
        model = BaselineViT(BaselineConfig(**payload["config"]))
    else:
        raise ValueError(f"unknown checkpoint kind {payload['kind']!r}")
    model.load_state_dict(payload["state"])
    model.eval()
    schema = parse_schema(payload["schema"]) if payload["schema"] else None
    return model, schema, payload["meta"]
