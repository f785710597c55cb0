"""Embedding extraction and downstream evaluation.

Covers frozen-feature extraction (with optional context-channel removal,
branch flipping, and concept-sharing plans for channel-mismatched datasets),
hierarchical mean aggregation, multi-label MLP probing, leave-one-out
retrieval (mAP + kNN), and the full-vs-sparse cosine similarity diagnostic.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .encoder import GroupedEncoder
from .schema import GroupSchema, OODSharingPlan, split_groups
from .synth import SynthDataset

logger = logging.getLogger(__name__)

LEVELS = ("cell", "fov", "well")


class EvaluationError(ValueError):
    pass


@dataclass
class EmbeddingRecord:
    sample_id: str
    vector: np.ndarray
    multilabels: np.ndarray | None = None
    class_id: int | None = None
    group_id: int | None = None
    fov_id: int | None = None
    well_id: int | None = None
    level: str = "cell"


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

def _forward_grouped(model: GroupedEncoder, x: torch.Tensor, schema: GroupSchema,
                     drop_slots: list[int], flip: bool) -> torch.Tensor:
    gb = split_groups(x, schema)
    x_c1 = gb.x_c1
    if drop_slots:
        keep = [i for i in range(x_c1.shape[1]) if i not in drop_slots]
        x_c1 = x_c1[:, keep]
    return model.forward_groups(x_c1, gb.x_c2, flip=flip).cls


def embed_dataset(model: nn.Module, dataset: SynthDataset,
                  schema: GroupSchema | None = None, *,
                  plan: OODSharingPlan | None = None,
                  drop: tuple[str, ...] = (), flip: bool = False,
                  batch_size: int = 128, level: str = "cell") -> list[EmbeddingRecord]:
    """Deterministic frozen embeddings for every sample of ``dataset``.

    ``drop`` removes the named context channels at inference (concept channels
    may not be dropped). ``plan`` runs one pass per concept channel against the
    full context and concatenates the outputs in plan order.
    """
    schema = schema or dataset.schema()
    grouped = isinstance(model, GroupedEncoder)
    if drop and not grouped:
        raise EvaluationError("channel dropping requires a grouped encoder")
    if plan is not None and not grouped:
        raise EvaluationError("sharing plans require a grouped encoder")
    drop_slots: list[int] = []
    if drop:
        ctx_names = [c.name for c in schema.context_channels]
        for name in drop:
            if name not in ctx_names:
                role = "concept" if any(c.name == name for c in schema.concept_channels) \
                    else "unknown"
                raise EvaluationError(
                    f"cannot drop {name!r}: {role} channel (only context channels "
                    f"may be removed at evaluation)")
            drop_slots.append(ctx_names.index(name))
        if len(drop_slots) >= schema.n_context:
            raise EvaluationError("cannot drop every context channel")

    model = model.eval()
    images = torch.as_tensor(dataset.images)
    vectors = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = images[start:start + batch_size]
            if plan is None:
                if grouped:
                    vec = _forward_grouped(model, x, schema, drop_slots, flip)
                else:
                    vec = model.encode(x).cls
                vectors.append(vec.numpy())
            else:
                ctx_idx = [schema.channel(n).source_index for n in plan.passes[0][0]]
                parts = []
                for concept_name in plan.concat_order:
                    ci = schema.channel(concept_name).source_index
                    gb_ctx = x[:, ctx_idx]
                    gb_con = x[:, [ci]]
                    parts.append(model.forward_groups(gb_ctx, gb_con, flip=flip).cls)
                vectors.append(torch.cat(parts, dim=-1).numpy())
    vectors = np.concatenate(vectors, axis=0).astype(np.float32)
    return [EmbeddingRecord(
        sample_id=dataset.sample_ids[i], vector=vectors[i],
        multilabels=dataset.multilabels[i].copy(), class_id=int(dataset.class_ids[i]),
        group_id=int(dataset.group_ids[i]), fov_id=int(dataset.fov_ids[i]),
        well_id=int(dataset.well_ids[i]), level=level)
        for i in range(len(dataset))]


def save_records(path, records: list[EmbeddingRecord]) -> None:
    """Columnar table: ids, levels, labels, and vectors in one npz archive."""
    np.savez_compressed(
        path,
        sample_id=np.array([r.sample_id for r in records]),
        level=np.array([r.level for r in records]),
        class_id=np.array([-1 if r.class_id is None else r.class_id for r in records]),
        group_id=np.array([-1 if r.group_id is None else r.group_id for r in records]),
        fov_id=np.array([-1 if r.fov_id is None else r.fov_id for r in records]),
        well_id=np.array([-1 if r.well_id is None else r.well_id for r in records]),
        multilabels=np.stack([r.multilabels if r.multilabels is not None
                              else np.zeros(0, np.uint8) for r in records]),
        vectors=np.stack([r.vector for r in records]))


def load_records(path) -> list[EmbeddingRecord]:
    data = np.load(path, allow_pickle=False)
    n = len(data["sample_id"])

    def opt(arr, i):
        return None if int(arr[i]) < 0 else int(arr[i])

    return [EmbeddingRecord(
        sample_id=str(data["sample_id"][i]), vector=data["vectors"][i],
        multilabels=data["multilabels"][i] if data["multilabels"].shape[1] else None,
        class_id=opt(data["class_id"], i), group_id=opt(data["group_id"], i),
        fov_id=opt(data["fov_id"], i), well_id=opt(data["well_id"], i),
        level=str(data["level"][i])) for i in range(n)]


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def aggregate(records: list[EmbeddingRecord], from_level: str, to_level: str,
              require_same_class: bool = True) -> list[EmbeddingRecord]:
    """Unweighted mean of vectors per grouping key, one stage at a time.

    Cell -> fov groups by ``fov_id``; fov -> well by ``well_id``. Multilabels
    are unioned within a group; ``class_id`` must agree when
    ``require_same_class`` (the retrieval contract), else it becomes None.
    """
    stages = {("cell", "fov"): "fov_id", ("fov", "well"): "well_id"}
    if (from_level, to_level) not in stages:
        raise EvaluationError(f"unsupported aggregation {from_level} -> {to_level}")
    key_name = stages[(from_level, to_level)]
    if any(r.level != from_level for r in records):
        raise EvaluationError(f"all records must be at level {from_level!r}")
    if any(getattr(r, key_name) is None for r in records):
        raise EvaluationError(f"records lack the grouping key {key_name!r}")
    out = []
    keys = sorted({getattr(r, key_name) for r in records})
    for key in keys:
        members = [r for r in records if getattr(r, key_name) == key]
        classes = {r.class_id for r in members}
        if require_same_class and len(classes) > 1:
            raise EvaluationError(
                f"{to_level} group {key} mixes classes {sorted(classes)}; "
                f"retrieval aggregation requires a single class per group")
        class_id = classes.pop() if len(classes) == 1 else None
        labels = None
        if members[0].multilabels is not None:
            labels = np.clip(np.sum([r.multilabels for r in members], axis=0), 0, 1
                             ).astype(np.uint8)
        out.append(EmbeddingRecord(
            sample_id=f"{to_level}{key}",
            vector=np.mean([r.vector for r in members], axis=0),
            multilabels=labels, class_id=class_id, group_id=members[0].group_id,
            fov_id=members[0].fov_id if to_level == "fov" else None,
            well_id=members[0].well_id, level=to_level))
    return out


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

@dataclass
class RetrievalResult:
    map: float
    knn_accuracy: float
    k: int
    n_queries: int
    postprocess: str = "none"


def average_precision(relevance_in_rank_order: np.ndarray) -> float:
    """AP of a binary relevance list already sorted by decreasing score."""
    rel = np.asarray(relevance_in_rank_order, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return 0.0
    hits = np.cumsum(rel)
    precision_at_hit = hits[rel] / (np.flatnonzero(rel) + 1)
    return float(precision_at_hit.sum() / n_rel)


def retrieval_eval(records: list[EmbeddingRecord], k: int = 5,
                   postprocess: str = "none") -> RetrievalResult:
    """Leave-one-out cosine retrieval over ``class_id``.

    Every record with at least one same-class partner is a query; singleton
    classes stay in the gallery only. mAP is per-query average precision,
    macro-averaged over queries; kNN accuracy is a top-k majority vote.
    """
    if any(r.class_id is None for r in records):
        raise EvaluationError("retrieval needs class ids on every record")
    vectors = np.stack([r.vector for r in records]).astype(np.float64)
    labels = np.array([r.class_id for r in records])
    if postprocess != "none":
        vectors = apply_postprocess(postprocess, vectors)(vectors)
    counts = {c: int((labels == c).sum()) for c in np.unique(labels)}
    queryable = np.array([counts[c] > 1 for c in labels])
    if not queryable.any():
        raise EvaluationError("every class is a singleton; retrieval mAP is undefined")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = vectors / np.clip(norms, 1e-12, None)
    sims = unit @ unit.T
    n = len(records)
    aps, knn_hits = [], []
    for q in np.flatnonzero(queryable):
        order = np.argsort(-sims[q])
        order = order[order != q]
        rel = labels[order] == labels[q]
        aps.append(average_precision(rel))
        top = labels[order[:k]]
        values, votes = np.unique(top, return_counts=True)
        knn_hits.append(values[np.argmax(votes)] == labels[q])
    return RetrievalResult(map=float(np.mean(aps)), knn_accuracy=float(np.mean(knn_hits)),
                           k=k, n_queries=int(queryable.sum()), postprocess=postprocess)


# ---------------------------------------------------------------------------
# embedding post-processing (fit on one set, apply to another)
# ---------------------------------------------------------------------------

def _fit_standardize(x: np.ndarray):
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-8
    return lambda y: (y - mu) / sd


def _fit_robust_standardize(x: np.ndarray):
    med = np.median(x, axis=0)
    mad = np.median(np.abs(x - med), axis=0) * 1.4826 + 1e-8
    return lambda y: (y - med) / mad


def _fit_pca_whiten(x: np.ndarray):
    mu = x.mean(axis=0)
    cov = np.cov((x - mu).T) + 1e-6 * np.eye(x.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    w = vecs / np.sqrt(np.clip(vals, 1e-10, None))
    return lambda y: (y - mu) @ w


def _fit_zca_whiten(x: np.ndarray):
    mu = x.mean(axis=0)
    cov = np.cov((x - mu).T) + 1e-6 * np.eye(x.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    w = vecs @ np.diag(1.0 / np.sqrt(np.clip(vals, 1e-10, None))) @ vecs.T
    return lambda y: (y - mu) @ w


def _fit_identity(x: np.ndarray):
    return lambda y: y


POSTPROCESSORS = {
    "none": _fit_identity,
    "standardize": _fit_standardize,
    "robust_standardize": _fit_robust_standardize,
    "pca_whiten": _fit_pca_whiten,
    "zca_whiten": _fit_zca_whiten,
}

POSTPROCESS_GRID = ["none", "standardize", "robust_standardize",
                    "pca_whiten", "zca_whiten",
                    "standardize+pca_whiten", "standardize+zca_whiten",
                    "robust_standardize+pca_whiten", "robust_standardize+zca_whiten"]


def apply_postprocess(name: str, fit_on: np.ndarray):
    """Compose 'norm+whiten' style names into one fitted transform."""
    steps = name.split("+") if name != "none" else []
    fitted = []
    x = fit_on
    for step in steps:
        fn = POSTPROCESSORS[step](x)
        fitted.append(fn)
        x = fn(x)

    def run(y):
        for fn in fitted:
            y = fn(y)
        return y
    return run


def select_postprocessing(records: list[EmbeddingRecord], k: int = 5
                          ) -> tuple[str, RetrievalResult]:
    """Pick the normalization/whitening combination with the best retrieval mAP."""
    base = np.stack([r.vector for r in records]).astype(np.float64)
    best_name, best = "none", None
    for name in POSTPROCESS_GRID:
        transform = apply_postprocess(name, base)
        transformed = [replace(r, vector=v) for r, v in zip(records, transform(base))]
        result = retrieval_eval(transformed, k=k)
        if best is None or result.map > best.map:
            best_name, best = name, replace(result, postprocess=name)
    return best_name, best


# ---------------------------------------------------------------------------
# multi-label linear probing
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    map: float
    per_label_ap: dict[int, float]
    best_epoch: int


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor,
                       gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    p = torch.sigmoid(logits)
    ce = nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (alpha_t * (1 - p_t) ** gamma * ce).mean()


def _label_average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    order = np.argsort(-scores)
    return average_precision(targets[order] > 0)


def multilabel_map(scores: np.ndarray, targets: np.ndarray,
                   valid_labels: np.ndarray | None = None) -> tuple[float, dict[int, float]]:
    per_label = {}
    for lab in range(targets.shape[1]):
        if valid_labels is not None and not valid_labels[lab]:
            continue
        if targets[:, lab].sum() == 0:
            continue
        per_label[lab] = _label_average_precision(scores[:, lab], targets[:, lab])
    if not per_label:
        raise EvaluationError("no evaluable labels (all absent)")
    return float(np.mean(list(per_label.values()))), per_label


def linear_probe(train_records: list[EmbeddingRecord],
                 val_records: list[EmbeddingRecord], *, hidden_dim: int = 128,
                 epochs: int = 120, lr: float = 1e-3, patience: int = 15,
                 seed: int = 0) -> ProbeResult:
    """3-layer MLP on frozen embeddings with focal loss and mAP early stopping.

    Labels absent from the training set are excluded from the macro average
    (with a warning); reported mAP is macro over the remaining labels.
    """
    x_tr = torch.as_tensor(np.stack([r.vector for r in train_records]), dtype=torch.float32)
    y_tr = torch.as_tensor(np.stack([r.multilabels for r in train_records]), dtype=torch.float32)
    x_va = torch.as_tensor(np.stack([r.vector for r in val_records]), dtype=torch.float32)
    y_va = np.stack([r.multilabels for r in val_records])
    n_labels = y_tr.shape[1]
    train_present = y_tr.sum(dim=0).numpy() > 0
    if not train_present.all():
        missing = np.flatnonzero(~train_present).tolist()
        logger.warning("labels %s absent from the train set; excluded from macro mAP",
                       missing)
    mu, sd = x_tr.mean(dim=0), x_tr.std(dim=0) + 1e-6
    x_tr, x_va = (x_tr - mu) / sd, (x_va - mu) / sd

    torch.manual_seed(seed)
    model = nn.Sequential(
        nn.Linear(x_tr.shape[1], hidden_dim), nn.ReLU(),
        nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
        nn.Linear(hidden_dim, n_labels))
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    best_map, best_per_label, best_epoch, bad = -1.0, {}, 0, 0
    for epoch in range(epochs):
        model.train()
        optimizer.zero_grad()
        loss = sigmoid_focal_loss(model(x_tr), y_tr)
        loss.backward()
        optimizer.step()
        model.eval()
        with torch.no_grad():
            scores = model(x_va).numpy()
        val_map, per_label = multilabel_map(scores, y_va, train_present)
        if val_map > best_map + 1e-6:
            best_map, best_per_label, best_epoch, bad = val_map, per_label, epoch, 0
        else:
            bad += 1
            if bad > patience:
                break
    return ProbeResult(map=best_map, per_label_ap=best_per_label, best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# full-vs-sparse cosine similarity diagnostic
# ---------------------------------------------------------------------------

def cosine_diagnostic(model: GroupedEncoder, dataset: SynthDataset,
                      schema: GroupSchema | None = None,
                      drop_counts: tuple[int, ...] = (1, 2), n_samples: int = 200,
                      batch_size: int = 128, max_subsets: int = 10) -> dict:
    """Cosine similarity between full-context and context-dropped passes.

    For each drop count the similarity is measured at two stages: the pooled
    context-branch output (the [N, d] token map flattened to one vector per
    sample, keeping spatial structure) and the final cls token. All context
    subsets of the requested size are enumerated (capped at ``max_subsets``);
    the distribution pools samples x subsets.
    """
    schema = schema or dataset.schema()
    n_ctx = schema.n_context
    for c in drop_counts:
        if not 0 <= c < n_ctx:
            raise EvaluationError(f"drop count {c} must stay below context count {n_ctx}")
    model = model.eval()
    images = torch.as_tensor(dataset.images[:n_samples])

    def stage_vectors(drop_slots):
        inter_parts, final_parts = [], []
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                x = images[start:start + batch_size]
                gb = split_groups(x, schema)
                x_c1 = gb.x_c1
                if drop_slots:
                    keep = [i for i in range(n_ctx) if i not in drop_slots]
                    x_c1 = x_c1[:, keep]
                out = model.forward_groups(x_c1, gb.x_c2, return_intermediates=True)
                stream = out.intermediates["context_stream"]
                inter_parts.append(stream.reshape(stream.shape[0], -1).numpy())
                final_parts.append(out.cls.numpy())
        return np.concatenate(inter_parts), np.concatenate(final_parts)

    def cos(a, b):
        num = (a * b).sum(axis=1)
        den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        return num / np.clip(den, 1e-12, None)

    inter_full, final_full = stage_vectors([])
    report = {"intermediate": {}, "final": {}}
    for c in drop_counts:
        if c == 0:
            ones = np.ones(images.shape[0])
            report["intermediate"][c], report["final"][c] = ones, ones.copy()
            continue
        subsets = list(itertools.combinations(range(n_ctx), c))[:max_subsets]
        inter_sims, final_sims = [], []
        for subset in subsets:
            inter_s, final_s = stage_vectors(list(subset))
            inter_sims.append(cos(inter_full, inter_s))
            final_sims.append(cos(final_full, final_s))
        report["intermediate"][c] = np.concatenate(inter_sims)
        report["final"][c] = np.concatenate(final_sims)
    return report
