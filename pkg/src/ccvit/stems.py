"""Per-channel instance normalization and grouped convolutional tokenizers.

Each channel group owns ONE patchify stem shared by all of its channels, so
the token path never depends on how many channels a dataset happens to have.
Positional embeddings are a single learned table per group, added identically
to every channel; there are deliberately no per-channel embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schema import GroupSchema, split_groups

INSTANCE_NORM_EPS = 1e-5


@dataclass(frozen=True)
class StemConfig:
    patch_size: int
    token_dim: int
    image_size: int

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.token_dim < 1:
            raise ValueError("token_dim must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid_size ** 2


def instance_normalize(x: torch.Tensor, eps: float = INSTANCE_NORM_EPS) -> torch.Tensor:
    """Standardize every (sample, channel) plane to mean 0 / unit variance.

    Constant planes map to all-zeros instead of raising; blank channels are
    common in real microscopy stacks.
    """
    if x.ndim != 4:
        raise ValueError(f"expected [B, C, h, w], got shape {tuple(x.shape)}")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class GroupStem(nn.Module):
    """Patchify stem applied independently to every channel of one group.

    A single strided convolution with ``in_channels=1`` maps each channel plane
    to a token sequence at width ``token_dim``; a learned positional table of
    length ``n_tokens`` is added to every channel's sequence. Inputs at a
    different resolution reuse the table via bicubic grid interpolation.
    """

    def __init__(self, cfg: StemConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Conv2d(1, cfg.token_dim, kernel_size=cfg.patch_size,
                              stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_tokens, cfg.token_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def positional_table(self, n_tokens: int) -> torch.Tensor:
        """Positional embeddings for a (possibly resized) square token grid."""
        if n_tokens == self.cfg.n_tokens:
            return self.pos_embed
        g0 = self.cfg.grid_size
        g = int(round(math.sqrt(n_tokens)))
        if g * g != n_tokens:
            raise ValueError(f"token count {n_tokens} is not a square grid")
        table = self.pos_embed.reshape(1, g0, g0, self.cfg.token_dim).permute(0, 3, 1, 2)
        table = F.interpolate(table, size=(g, g), mode="bicubic", align_corners=False)
        return table.permute(0, 2, 3, 1).reshape(1, n_tokens, self.cfg.token_dim)

    def tokenize(self, x_group: torch.Tensor, mask: torch.Tensor | None = None,
                 mask_token: torch.Tensor | None = None) -> torch.Tensor:
        """Tokenize [B, C_g, h, w] into [B, C_g, N, d].

        The same convolution runs on every channel (vectorized over B*C_g).
        When ``mask`` [B, N] is given, masked positions are replaced by
        ``mask_token`` in every channel before the positional table is added.
        """
        if x_group.ndim != 4:
            raise ValueError(f"expected [B, C_g, h, w], got {tuple(x_group.shape)}")
        b, c_g, h, w = x_group.shape
        if h % self.cfg.patch_size or w % self.cfg.patch_size:
            raise ValueError(f"spatial size {(h, w)} not divisible by patch "
                             f"{self.cfg.patch_size}")
        tokens = self.proj(x_group.reshape(b * c_g, 1, h, w))
        n = tokens.shape[2] * tokens.shape[3]
        tokens = tokens.flatten(2).transpose(1, 2).reshape(b, c_g, n, self.cfg.token_dim)
        if mask is not None:
            if mask_token is None:
                raise ValueError("mask given without a mask token")
            if mask.shape != (b, n):
                raise ValueError(f"mask shape {tuple(mask.shape)} != {(b, n)}")
            fill = mask_token.to(tokens.dtype).reshape(1, 1, 1, -1)
            tokens = torch.where(mask[:, None, :, None], fill, tokens)
        return tokens + self.positional_table(n).unsqueeze(1).to(tokens.dtype)


def tokenize_group(x_group: torch.Tensor, stem: GroupStem,
                   mask: torch.Tensor | None = None,
                   mask_token: torch.Tensor | None = None) -> torch.Tensor:
    """Functional alias for :meth:`GroupStem.tokenize`."""
    return stem.tokenize(x_group, mask=mask, mask_token=mask_token)


def naive_grouped_stem(x: torch.Tensor, schema: GroupSchema, context_stem: GroupStem,
                       concept_stem: GroupStem, normalize: bool = True) -> torch.Tensor:
    """Grouped stem without any branched encoder layers.

    Instance-normalize, tokenize each group with its own stem, mean-pool each
    group over its channels, and concatenate the two pooled token maps along
    the feature dimension: [B, N, 2d]. This is the minimal grouped-tokenizer
    variant used as a drop-in stem for generic backbones.
    """
    batch = split_groups(x, schema)
    x_c1, x_c2 = batch.x_c1, batch.x_c2
    if normalize:
        x_c1 = instance_normalize(x_c1)
        x_c2 = instance_normalize(x_c2)
    ctx = context_stem.tokenize(x_c1).mean(dim=1)
    con = concept_stem.tokenize(x_c2).mean(dim=1)
    return torch.cat([ctx, con], dim=-1)
