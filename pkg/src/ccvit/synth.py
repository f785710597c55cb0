"""Synthetic multi-channel microscopy-like images with controllable ground truth.

Context channels render shared structural templates (soft nuclear blob, a
boundary ring, a filament field) whose per-sample jitter shrinks as
``context_coherence`` rises; concept channels render class-conditioned spot
textures whose placement follows the sample's geometry with probability
``concept_context_coupling``. Everything is derived from per-sample seeded
generators, so generation is bit-reproducible and trivially parallelizable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .schema import GroupSchema, parse_schema

CONTEXT_NAMES = ("nucleus", "reticulum", "tubulin", "membrane", "actin", "golgi")
CONCEPT_NAMES = ("marker_a", "marker_b", "marker_c", "marker_d", "marker_e", "marker_f")

# fixed base geometry shared by every sample; jitter scales with (1 - coherence)
BASE_CENTER = 0.5
BASE_RADIUS = 0.27
BASE_ASPECT = 0.72
BASE_ORIENT = 0.35


class DatasetFormatError(RuntimeError):
    """A stored dataset directory is inconsistent with its manifest."""


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 256
    image_size: int = 32
    n_context: int = 3
    n_concept: int = 2
    n_classes: int = 6
    n_labels: int = 6
    context_coherence: float = 0.9
    concept_context_coupling: float = 0.7
    noise_level: float = 0.02
    seed: int = 0
    texture_seed: int = 0
    cells_per_fov: int = 4
    fovs_per_well: int = 2

    def __post_init__(self):
        if min(self.n_samples, self.image_size, self.n_context, self.n_concept,
               self.n_classes, self.n_labels, self.cells_per_fov, self.fovs_per_well) < 1:
            raise ValueError("all counts must be >= 1")
        if not (0.0 <= self.context_coherence <= 1.0
                and 0.0 <= self.concept_context_coupling <= 1.0):
            raise ValueError("coherence and coupling must lie in [0, 1]")
        if self.n_context > len(CONTEXT_NAMES) or self.n_concept > len(CONCEPT_NAMES):
            raise ValueError("too many channels for the built-in name pools")


@dataclass
class SynthDataset:
    images: np.ndarray          # float32 [n, C, h, w], values on the uint8 grid
    class_ids: np.ndarray
    group_ids: np.ndarray
    fov_ids: np.ndarray
    well_ids: np.ndarray
    multilabels: np.ndarray     # uint8 [n, L]
    sample_ids: list[str]
    manifest: dict = field(repr=False)

    def schema(self) -> GroupSchema:
        return parse_schema(self.manifest)

    def __len__(self) -> int:
        return self.images.shape[0]


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="ij")


def _ellipse_frame(ys, xs, cy, cx, radius, aspect, orient):
    dy, dx = ys - cy, xs - cx
    u = dx * math.cos(orient) + dy * math.sin(orient)
    v = -dx * math.sin(orient) + dy * math.cos(orient)
    return np.sqrt((u / radius) ** 2 + (v / (radius * aspect)) ** 2 + 1e-12), u, v


def _sample_geometry(rng: np.random.Generator, coherence: float) -> dict:
    j = 1.0 - coherence
    return {
        "cy": BASE_CENTER + j * rng.uniform(-0.12, 0.12),
        "cx": BASE_CENTER + j * rng.uniform(-0.12, 0.12),
        "radius": BASE_RADIUS * (1.0 + j * rng.uniform(-0.25, 0.25)),
        "aspect": BASE_ASPECT * (1.0 + j * rng.uniform(-0.2, 0.2)),
        "orient": BASE_ORIENT + j * rng.uniform(-math.pi / 2, math.pi / 2),
    }


def _render_context(family: int, size: int, geo: dict, rng: np.random.Generator,
                    coherence: float) -> np.ndarray:
    ys, xs = _grid(size)
    re, u, v = _ellipse_frame(ys, xs, geo["cy"], geo["cx"], geo["radius"],
                              geo["aspect"], geo["orient"])
    j = 1.0 - coherence
    if family % 3 == 0:        # soft nuclear blob
        plane = np.exp(-2.8 * re ** 2)
    elif family % 3 == 1:      # circular boundary ring around the blob
        width = 0.20 * (1.0 + j * rng.uniform(-0.3, 0.3))
        rc = np.sqrt((ys - geo["cy"]) ** 2 + (xs - geo["cx"]) ** 2) / geo["radius"]
        plane = np.exp(-((rc - 1.0) / width) ** 2)
    else:                       # fiber field: fixed-direction stripes over the cell
        freq = 3.0 * (1.0 + j * rng.uniform(-0.2, 0.2))
        phase = j * rng.uniform(-0.5, 0.5)
        stripes = 0.5 + 0.5 * np.cos(2 * math.pi * freq * (ys + 0.35 * xs) + phase)
        plane = stripes * np.exp(-(re / 1.9) ** 2)
    return plane


RADIAL_LEVELS = (0.35, 1.0, 1.55)    # inside the blob, on its rim, outside


def _class_params(texture_seed: int, class_id: int) -> dict:
    """Per-class concept appearance: a localization profile relative to the
    structural geometry (radial level + angular sector) plus mild texture."""
    rng = np.random.default_rng([texture_seed, 7, class_id])
    return {
        "n_spots": int(rng.integers(4, 8)),
        "spot_sigma": float(rng.uniform(0.04, 0.07)),
        "spot_amp": float(rng.uniform(0.8, 1.0)),
        "radial_pos": float(RADIAL_LEVELS[class_id % len(RADIAL_LEVELS)]
                            * (1.0 + rng.uniform(-0.08, 0.08))),
        "angular_pos": float(rng.uniform(0.0, 2 * math.pi)),
        "angular_width": 0.55,
        "freq": float(rng.uniform(2.0, 6.0)),
        "grating_angle": float(rng.uniform(0.0, math.pi)),
        "grating_amp": float(rng.uniform(0.05, 0.15)),
    }


def _render_concept(size: int, geo: dict, params: dict, coupling: float,
                    rng: np.random.Generator) -> np.ndarray:
    ys, xs = _grid(size)
    plane = np.zeros((size, size), dtype=np.float64)
    for _ in range(params["n_spots"]):
        if rng.random() < coupling:
            # place the spot at the class's position relative to THIS sample's
            # geometry: labels are only decodable against the context structure
            theta = params["angular_pos"] + rng.normal(0.0, params["angular_width"])
            rr = geo["radius"] * params["radial_pos"] * (1.0 + rng.normal(0.0, 0.06))
            u = rr * math.cos(theta)
            v = rr * geo["aspect"] * math.sin(theta)
            cy = geo["cy"] + u * math.sin(geo["orient"]) + v * math.cos(geo["orient"])
            cx = geo["cx"] + u * math.cos(geo["orient"]) - v * math.sin(geo["orient"])
            cy, cx = min(max(cy, 0.05), 0.95), min(max(cx, 0.05), 0.95)
        else:
            cy = rng.uniform(0.0, 1.0)
            cx = rng.uniform(0.0, 1.0)
        plane += np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2)
                          / (2 * params["spot_sigma"] ** 2)))
    plane = params["spot_amp"] * np.clip(plane, 0.0, 1.2) / 1.2
    angle, freq = params["grating_angle"], params["freq"]
    phase = rng.uniform(0.0, 2 * math.pi)
    grating = 0.5 + 0.5 * np.sin(
        2 * math.pi * freq * (xs * math.cos(angle) + ys * math.sin(angle)) + phase)
    return plane + params["grating_amp"] * grating


def _label_matrix(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.texture_seed, 11])
    mat = np.zeros((cfg.n_classes, cfg.n_labels), dtype=np.uint8)
    for c in range(cfg.n_classes):
        k = int(rng.integers(2, min(4, cfg.n_labels + 1)))
        mat[c, rng.choice(cfg.n_labels, size=k, replace=False)] = 1
    for lab in range(cfg.n_labels):      # every label must occur somewhere
        if mat[:, lab].sum() == 0:
            mat[int(rng.integers(0, cfg.n_classes)), lab] = 1
    return mat


def build_manifest(n_context: int, n_concept: int) -> dict:
    channels = []
    for i in range(n_context):
        channels.append({"name": CONTEXT_NAMES[i], "role": "context", "index": i})
    for i in range(n_concept):
        channels.append({"name": CONCEPT_NAMES[i], "role": "concept",
                         "index": n_context + i})
    return {"channels": channels}


def generate(cfg: SynthConfig) -> SynthDataset:
    """Render the full dataset; deterministic given cfg (per-sample derived seeds)."""
    n, size = cfg.n_samples, cfg.image_size
    n_chan = cfg.n_context + cfg.n_concept
    images = np.zeros((n, n_chan, size, size), dtype=np.float32)
    cells_per_well = cfg.cells_per_fov * cfg.fovs_per_well
    class_params = [_class_params(cfg.texture_seed, c) for c in range(cfg.n_classes)]
    label_matrix = _label_matrix(cfg)

    fov_ids = np.arange(n) // cfg.cells_per_fov
    well_ids = np.arange(n) // cells_per_well
    class_ids = well_ids % cfg.n_classes
    group_ids = well_ids.copy()          # one perturbation group per well
    multilabels = label_matrix[class_ids]

    for i in range(n):
        geo_rng = np.random.default_rng([cfg.seed, i, 1])
        geo = _sample_geometry(geo_rng, cfg.context_coherence)
        for slot in range(cfg.n_context):
            ch_rng = np.random.default_rng([cfg.seed, i, 10 + slot])
            plane = _render_context(slot, size, geo, ch_rng, cfg.context_coherence)
            if cfg.noise_level > 0:
                plane = plane + ch_rng.normal(0.0, cfg.noise_level, plane.shape)
            images[i, slot] = _quantize(plane)
        params = class_params[class_ids[i]]
        for slot in range(cfg.n_concept):
            ch_rng = np.random.default_rng([cfg.seed, i, 100 + slot])
            plane = _render_concept(size, geo, params, cfg.concept_context_coupling,
                                    ch_rng)
            if cfg.noise_level > 0:
                plane = plane + ch_rng.normal(0.0, cfg.noise_level, plane.shape)
            images[i, cfg.n_context + slot] = _quantize(plane)

    return SynthDataset(
        images=images, class_ids=class_ids.astype(np.int64),
        group_ids=group_ids.astype(np.int64), fov_ids=fov_ids.astype(np.int64),
        well_ids=well_ids.astype(np.int64), multilabels=multilabels,
        sample_ids=[f"s{i:06d}" for i in range(n)],
        manifest=build_manifest(cfg.n_context, cfg.n_concept))


def _quantize(plane: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so that disk round-trips are bitwise exact."""
    q = np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    return q.astype(np.float32) / 255.0


def write_dataset(ds: SynthDataset, root: str | Path) -> Path:
    """Layout: root/manifest.json, root/labels.csv, root/images/<sample>/<channel>.png."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    import json
    (root / "manifest.json").write_text(json.dumps(ds.manifest, indent=2))
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "class_id", "group_id", "fov_id", "well_id",
                         "multilabels"])
        for i, sid in enumerate(ds.sample_ids):
            bits = "".join(str(int(b)) for b in ds.multilabels[i])
            writer.writerow([sid, ds.class_ids[i], ds.group_ids[i], ds.fov_ids[i],
                             ds.well_ids[i], bits])
    names = [rec["name"] for rec in sorted(ds.manifest["channels"],
                                           key=lambda r: r["index"])]
    for i, sid in enumerate(ds.sample_ids):
        sdir = root / "images" / sid
        sdir.mkdir(exist_ok=True)
        for ci, name in enumerate(names):
            arr = np.round(ds.images[i, ci] * 255.0).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(sdir / f"{name}.png")
    return root


def load_dataset(root: str | Path) -> SynthDataset:
    """Read a dataset directory back; intensities are [0, 1] normalized."""
    root = Path(root)
    import json
    manifest = json.loads((root / "manifest.json").read_text())
    by_index = sorted(manifest["channels"], key=lambda r: r["index"])
    rows = list(csv.DictReader(open(root / "labels.csv")))
    if not rows:
        raise DatasetFormatError(f"no samples listed in {root / 'labels.csv'}")
    n, n_chan = len(rows), len(by_index)
    first = Image.open(root / "images" / rows[0]["sample_id"] / f"{by_index[0]['name']}.png")
    size = first.size[0]
    images = np.zeros((n, n_chan, size, size), dtype=np.float32)
    for i, row in enumerate(rows):
        sdir = root / "images" / row["sample_id"]
        files = sorted(p.name for p in sdir.glob("*.png"))
        if len(files) != n_chan:
            raise DatasetFormatError(
                f"sample {row['sample_id']}: found {len(files)} channel files, "
                f"manifest defines {n_chan}")
        for rec in by_index:
            path = sdir / f"{rec['name']}.png"
            if not path.exists():
                raise DatasetFormatError(
                    f"sample {row['sample_id']}: missing channel file for "
                    f"{rec['name']!r}")
            images[i, rec["index"]] = (
                np.asarray(Image.open(path), dtype=np.float32) / 255.0)
    return SynthDataset(
        images=images,
        class_ids=np.array([int(r["class_id"]) for r in rows], dtype=np.int64),
        group_ids=np.array([int(r["group_id"]) for r in rows], dtype=np.int64),
        fov_ids=np.array([int(r["fov_id"]) for r in rows], dtype=np.int64),
        well_ids=np.array([int(r["well_id"]) for r in rows], dtype=np.int64),
        multilabels=np.array([[int(b) for b in r["multilabels"]] for r in rows],
                             dtype=np.uint8),
        sample_ids=[r["sample_id"] for r in rows],
        manifest=manifest)
