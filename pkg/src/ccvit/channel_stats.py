"""Quantitative check of the context/concept split via per-channel clustering.

Each channel is embedded on its own (replicated to three planes so any RGB
feature extractor applies), all channel features are clustered jointly, and
every channel is scored by how concentrated it is in its majority cluster:
parity = max fraction, entropy = spread across clusters in bits. Structural
reference channels should score high parity / low entropy; experiment-specific
channels the opposite. Role suggestions derived from these scores are advisory
only and never override a manifest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import KMeans

from .synth import SynthDataset

logger = logging.getLogger(__name__)


@dataclass
class ChannelDistribution:
    """Occupancy of one channel's features over the K joint clusters."""

    channel: str
    p: np.ndarray
    n_samples: int

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 1 or (self.p < 0).any():
            raise ValueError("p must be a nonnegative vector")
        if abs(self.p.sum() - 1.0) > 1e-9:
            raise ValueError(f"p must sum to 1, got {self.p.sum()!r}")


@dataclass
class ChannelScore:
    channel: str
    parity: float
    entropy: float
    assigned_cluster: int
    n_samples: int
    suggested_role: str = ""


class TinyConvFeaturizer(nn.Module):
    """Frozen random convolutional featurizer for desk-scale channel analysis.

    Three strided conv layers with fixed seeded weights followed by global
    mean/std pooling. Deterministic and training-free; any stronger frozen
    encoder with the same [B, 3, h, w] -> [B, F] contract can replace it.
    """

    def __init__(self, seed: int = 0, width: int = 32):
        super().__init__()
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 5, stride=2, padding=2), nn.GELU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1), nn.GELU())
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x)
        return torch.cat([h.mean(dim=(2, 3)), h.std(dim=(2, 3))], dim=1)


def extract_channel_features(images: np.ndarray | torch.Tensor, channel_index: int,
                             extractor: nn.Module, batch_size: int = 256) -> np.ndarray:
    """Embed one channel of an [n, C, h, w] stack, replicated to three planes."""
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if not 0 <= channel_index < images.shape[1]:
        raise ValueError(f"channel index {channel_index} out of range")
    plane = images[:, channel_index:channel_index + 1]
    rgb = plane.repeat(1, 3, 1, 1)
    feats = []
    with torch.no_grad():
        for start in range(0, rgb.shape[0], batch_size):
            feats.append(extractor(rgb[start:start + batch_size]).numpy())
    return np.concatenate(feats, axis=0)


def cluster_and_assign(features_by_channel: dict[str, np.ndarray], k: int,
                       seed: int = 0, standardize: bool = True
                       ) -> tuple[dict[str, np.ndarray], list[ChannelDistribution]]:
    """Joint k-means over all channels' features; per-channel occupancy vectors.

    Seeded k-means++ with a fixed iteration cap keeps the assignment
    deterministic; the assigned cluster of a channel is the argmax of its
    occupancy (ties resolve to the lowest cluster index).
    """
    if k < 2:
        raise ValueError("need at least 2 clusters")
    for name, feats in features_by_channel.items():
        if feats.shape[0] == 0:
            raise ValueError(f"channel {name!r} has an empty feature set")
    names = list(features_by_channel)
    stacked = np.concatenate([features_by_channel[n] for n in names], axis=0)
    if stacked.shape[0] < k:
        raise ValueError(f"{stacked.shape[0]} samples cannot form {k} clusters")
    if standardize:
        mu, sd = stacked.mean(axis=0), stacked.std(axis=0)
        stacked = (stacked - mu) / np.where(sd > 1e-12, sd, 1.0)
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=300,
                random_state=seed)
    labels = km.fit_predict(stacked)
    out_labels, dists = {}, []
    offset = 0
    for name in names:
        n = features_by_channel[name].shape[0]
        chan_labels = labels[offset:offset + n]
        offset += n
        out_labels[name] = chan_labels
        p = np.bincount(chan_labels, minlength=k).astype(np.float64) / n
        dists.append(ChannelDistribution(channel=name, p=p, n_samples=n))
    return out_labels, dists


def parity_entropy(dist: ChannelDistribution) -> tuple[float, float]:
    """Concentration (max occupancy) and spread (entropy in bits, 0 log 0 := 0)."""
    p = dist.p
    parity = float(p.max())
    nz = p[p > 0]
    entropy = float(-(nz * np.log2(nz)).sum()) + 0.0   # normalize -0.0
    return parity, entropy


@dataclass
class ChannelReport:
    scores: list[ChannelScore]
    parity_threshold: float

    def table(self) -> str:
        lines = [f"{'channel':<14} {'parity':>8} {'entropy':>8} {'cluster':>8} "
                 f"{'suggested':>10}"]
        for s in sorted(self.scores, key=lambda s: -s.parity):
            lines.append(f"{s.channel:<14} {s.parity:>8.3f} {s.entropy:>8.3f} "
                         f"{s.assigned_cluster:>8d} {s.suggested_role:>10}")
        return "\n".join(lines)

    def ranking_by_parity(self) -> list[str]:
        return [s.channel for s in sorted(self.scores, key=lambda s: -s.parity)]

    def suggested_manifest(self) -> dict:
        ordered = sorted(self.scores, key=lambda s: (s.suggested_role != "context",
                                                     -s.parity))
        return {"channels": [{"name": s.channel, "role": s.suggested_role, "index": i}
                             for i, s in enumerate(ordered)]}

    def records(self) -> list[dict]:
        return [{"channel": s.channel, "parity": s.parity, "entropy": s.entropy,
                 "assigned_cluster": s.assigned_cluster, "n_samples": s.n_samples,
                 "suggested_role": s.suggested_role} for s in self.scores]


def emit_report(dists: list[ChannelDistribution],
                parity_threshold: float = 0.8) -> ChannelReport:
    """Score every channel and attach an advisory context/concept suggestion."""
    if len(dists) < 2:
        raise ValueError("need at least two channels to compare")
    scores = []
    for dist in dists:
        parity, entropy = parity_entropy(dist)
        scores.append(ChannelScore(
            channel=dist.channel, parity=parity, entropy=entropy,
            assigned_cluster=int(np.argmax(dist.p)), n_samples=dist.n_samples,
            suggested_role="context" if parity >= parity_threshold else "concept"))
    return ChannelReport(scores=scores, parity_threshold=parity_threshold)


def analyze_dataset(dataset: SynthDataset, extractor: nn.Module | None = None,
                    k: int | None = None, n_samples: int = 1000, seed: int = 0,
                    parity_threshold: float = 0.8) -> ChannelReport:
    """End-to-end channel analysis on a loaded dataset.

    Embeds up to ``n_samples`` instances of each channel through the frozen
    extractor, clusters jointly with K defaulting to the channel count, and
    emits the parity/entropy report.
    """
    extractor = extractor or TinyConvFeaturizer(seed=seed)
    by_index = sorted(dataset.manifest["channels"], key=lambda r: r["index"])
    images = dataset.images[:n_samples]
    features = {rec["name"]: extract_channel_features(images, rec["index"], extractor)
                for rec in by_index}
    k = k or len(by_index)
    _, dists = cluster_and_assign(features, k=k, seed=seed)
    return emit_report(dists, parity_threshold=parity_threshold)
