"""Momentum self-distillation with masked context channels.

A student encoder sees augmented crops with a random subset of context
channels removed plus patch-wise token masking; an EMA teacher sees the full
context. Both project cls and patch features onto prototype logits, and the
student matches the teacher's sharpened, centered distributions under a KL
objective. A supervised contrastive term over same-group samples is added
unweighted.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import BaselineViT, GroupedEncoder
from .schema import GroupSchema, split_groups

logger = logging.getLogger(__name__)

DROP_MODES = ("none", "fixed_student", "uniform_student", "student_and_teacher")


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class DropPolicy:
    """How many context channels to remove before the student forward pass.

    ``amount`` is the fixed drop count for ``fixed_student`` and
    ``student_and_teacher``, and the inclusive maximum for ``uniform_student``
    (the count is then drawn uniformly from {0..amount} each step).
    """

    mode: str = "none"
    amount: int = 0

    def __post_init__(self):
        if self.mode not in DROP_MODES:
            raise ValueError(f"unknown drop mode {self.mode!r}; expected one of {DROP_MODES}")
        if self.amount < 0:
            raise ValueError("drop amount must be >= 0")

    def validate_for(self, n_context: int) -> None:
        if self.mode != "none" and self.amount >= n_context:
            raise ValueError(
                f"drop amount {self.amount} must stay below the context count "
                f"{n_context} (at least one context channel survives)")

    @property
    def drops_teacher(self) -> bool:
        return self.mode == "student_and_teacher"


def sample_drop_count(policy: DropPolicy, rng: np.random.Generator) -> int:
    """Draw this step's context drop count according to the policy."""
    if policy.mode == "none":
        return 0
    if policy.mode in ("fixed_student", "student_and_teacher"):
        return policy.amount
    return int(rng.integers(0, policy.amount + 1))


def drop_channels(x_c1: torch.Tensor, c: int, rng: np.random.Generator
                  ) -> tuple[torch.Tensor, list[int]]:
    """Remove a uniformly random subset of ``c`` context channels.

    The same subset applies to every sample in the batch; the surviving
    channels keep their relative order. Returns the reduced stack and the
    sorted dropped indices.
    """
    n_ctx = x_c1.shape[1]
    if not 0 <= c < n_ctx:
        raise ValueError(f"cannot drop {c} of {n_ctx} context channels")
    if c == 0:
        return x_c1, []
    dropped = sorted(rng.choice(n_ctx, size=c, replace=False).tolist())
    keep = [i for i in range(n_ctx) if i not in dropped]
    return x_c1[:, keep], dropped


def sample_patch_mask(batch_size: int, n_tokens: int, ratio_range: tuple[float, float],
                      rng: np.random.Generator) -> torch.Tensor:
    """Boolean [B, N] mask; per sample, floor(N * ratio) positions with ratio ~ U[lo, hi]."""
    lo, hi = ratio_range
    if not 0.0 <= lo <= hi < 1.0:
        raise ValueError(f"invalid mask ratio range {ratio_range}")
    mask = torch.zeros(batch_size, n_tokens, dtype=torch.bool)
    for b in range(batch_size):
        n_masked = int(math.floor(n_tokens * rng.uniform(lo, hi)))
        if n_masked:
            mask[b, rng.permutation(n_tokens)[:n_masked]] = True
    return mask


def patch_mask(tokens: torch.Tensor, ratio_range: tuple[float, float],
               rng: np.random.Generator, mask_token: torch.Tensor
               ) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace a random token subset with the learned mask token.

    Accepts [B, N, d] or [B, C_g, N, d]; the mask is shared across channels of
    a sample. Returns (masked tokens, boolean mask [B, N]).
    """
    per_channel = tokens.ndim == 4
    b, n = tokens.shape[0], tokens.shape[-2]
    mask = sample_patch_mask(b, n, ratio_range, rng).to(tokens.device)
    fill = mask_token.to(tokens.dtype)
    if per_channel:
        out = torch.where(mask[:, None, :, None], fill.reshape(1, 1, 1, -1), tokens)
    else:
        out = torch.where(mask[:, :, None], fill.reshape(1, 1, -1), tokens)
    return out, mask


class ProjectionHead(nn.Module):
    """MLP onto a normalized bottleneck followed by a prototype logit layer."""

    def __init__(self, in_dim: int, prototypes: int, hidden_dim: int = 256,
                 bottleneck_dim: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim))
        self.prototypes = nn.Linear(bottleneck_dim, prototypes, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = F.normalize(self.mlp(x), dim=-1, eps=1e-6)
        return self.prototypes(z)


def project(y: torch.Tensor, head: ProjectionHead, temperature: float,
            center: torch.Tensor | None = None, detach: bool = False) -> torch.Tensor:
    """Head logits -> probability vectors.

    Teacher usage passes the running ``center`` (subtracted before softmax)
    and ``detach=True`` so no gradient reaches the teacher path.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = head(y)
    if center is not None:
        logits = logits - center.to(logits.dtype)
    probs = torch.softmax(logits / temperature, dim=-1)
    return probs.detach() if detach else probs


def kl_distillation_loss(z_s: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    """Mean KL(z_t || z_s) over rows: cross-entropy minus teacher entropy.

    Both arguments are probability vectors along the last dim; the teacher
    side is treated as the (detached) target. 0 * log 0 contributes 0.
    """
    if z_s.shape != z_t.shape:
        raise ValueError(f"shape mismatch {tuple(z_s.shape)} vs {tuple(z_t.shape)}")
    z_t = z_t.detach()
    cross = -(z_t * torch.log(z_s.clamp_min(1e-30))).sum(dim=-1)
    entropy = -torch.special.xlogy(z_t, z_t).sum(dim=-1)
    return (cross - entropy).mean()


def _kl_from_log_probs(log_zs: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    # numerically preferred training path; same value as kl_distillation_loss
    cross = -(z_t * log_zs).sum(dim=-1)
    entropy = -torch.special.xlogy(z_t, z_t).sum(dim=-1)
    return (cross - entropy).mean()


def masked_patch_loss(z_s: torch.Tensor, z_t: torch.Tensor, mask: torch.Tensor
                      ) -> torch.Tensor:
    """Mean KL over masked patch positions only; 0 when nothing is masked."""
    if mask.dtype != torch.bool:
        mask = mask.bool()
    if not mask.any():
        return z_s.new_zeros(())
    return kl_distillation_loss(z_s[mask], z_t[mask])


def group_contrastive_loss(embeddings: torch.Tensor, group_ids: torch.Tensor,
                           temperature: float = 0.07) -> torch.Tensor:
    """Supervised contrastive loss with same-group samples as positives.

    Embeddings are L2-normalized internally. A batch containing a single group
    has no negatives and contributes 0 (with a warning).
    """
    if embeddings.ndim != 2:
        raise ValueError("expected [B, D] embeddings")
    group_ids = torch.as_tensor(group_ids, device=embeddings.device).reshape(-1)
    b = embeddings.shape[0]
    if group_ids.shape[0] != b:
        raise ValueError("group_ids length must match batch size")
    if torch.unique(group_ids).numel() < 2:
        logger.warning("contrastive batch has a single group; returning 0 (no negatives)")
        return embeddings.new_zeros(())
    z = F.normalize(embeddings, dim=-1, eps=1e-6)
    sim = z @ z.T / temperature
    eye = torch.eye(b, dtype=torch.bool, device=z.device)
    pos = (group_ids[:, None] == group_ids[None, :]) & ~eye
    sim = sim - sim.max(dim=1, keepdim=True).values.detach()
    log_den = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = sim - log_den
    n_pos = pos.sum(dim=1)
    anchors = n_pos > 0
    if not anchors.any():
        logger.warning("contrastive batch has no positive pairs; returning 0")
        return embeddings.new_zeros(())
    mean_log_prob_pos = (log_prob * pos)[anchors].sum(dim=1) / n_pos[anchors]
    return -mean_log_prob_pos.mean()


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """Exact per-parameter interpolation t <- m * t + (1 - m) * s."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    for (tn, tp), (sn, sp) in zip(teacher.named_parameters(), student.named_parameters()):
        if tn != sn or tp.shape != sp.shape:
            raise ValueError(f"teacher/student parameter mismatch at {tn!r} vs {sn!r}")
        tp.mul_(momentum).add_(sp.detach(), alpha=1.0 - momentum)


def cosine_momentum(step: int, total_steps: int, base: float, final: float = 1.0) -> float:
    """EMA momentum following a cosine ramp from ``base`` to ``final``."""
    t = min(max(step, 0), total_steps) / max(total_steps, 1)
    return final - (final - base) * (math.cos(math.pi * t) + 1) / 2


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0,
              min_lr: float = 1e-6) -> float:
    """Linear warmup followed by cosine decay to ``min_lr``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    t = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    t = min(max(t, 0.0), 1.0)
    return min_lr + (base_lr - min_lr) * (math.cos(math.pi * t) + 1) / 2


def teacher_temperature(step: int, start: float, end: float, warmup_steps: int) -> float:
    if warmup_steps <= 0 or step >= warmup_steps:
        return end
    return start + (end - start) * step / warmup_steps


@dataclass
class ViewSet:
    """Augmented crops plus the masking/drop bookkeeping for one step.

    The teacher consumes only the global views (full context, unmasked, except
    under the student_and_teacher policy); the student consumes every view with
    the same context channels removed.
    """

    global_views: list[torch.Tensor]
    local_views: list[torch.Tensor]
    patch_masks: list[torch.Tensor]
    dropped_context: list[int] = field(default_factory=list)
    teacher_dropped_context: list[int] = field(default_factory=list)


def _random_crop(x: torch.Tensor, out_size: int, scale: tuple[float, float],
                 noise_std: float, rng: np.random.Generator) -> torch.Tensor:
    b, _, h, w = x.shape
    views = []
    for i in range(b):
        s = rng.uniform(*scale)
        side = max(2, int(round(h * math.sqrt(s))))
        side = min(side, h)
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        crop = x[i:i + 1, :, top:top + side, left:left + side]
        crop = F.interpolate(crop, size=(out_size, out_size), mode="bilinear",
                             align_corners=False)
        if rng.random() < 0.5:
            crop = torch.flip(crop, dims=(3,))
        if rng.random() < 0.5:
            crop = torch.flip(crop, dims=(2,))
        views.append(crop)
    out = torch.cat(views, dim=0)
    if noise_std > 0:
        noise = torch.from_numpy(rng.normal(0.0, noise_std, size=out.shape)).to(out.dtype)
        out = (out + noise).clamp_(0.0, 1.0)
    return out


def build_views(x: torch.Tensor, *, n_local: int, global_size: int, local_size: int,
                global_scale: tuple[float, float], local_scale: tuple[float, float],
                mask_ratio: tuple[float, float], n_global_tokens: int,
                noise_std: float, rng: np.random.Generator) -> ViewSet:
    """Two global crops + ``n_local`` local crops, with per-view student masks."""
    global_views = [_random_crop(x, global_size, global_scale, noise_std, rng)
                    for _ in range(2)]
    local_views = [_random_crop(x, local_size, local_scale, noise_std, rng)
                   for _ in range(n_local)]
    masks = [sample_patch_mask(x.shape[0], n_global_tokens, mask_ratio, rng)
             for _ in range(2)]
    return ViewSet(global_views=global_views, local_views=local_views, patch_masks=masks)


@dataclass
class TrainConfig:
    """Hyperparameters of the self-distillation loop (toy-scale defaults)."""

    steps: int = 300
    batch_groups: int = 4
    cells_per_group: int = 4
    lr: float = 5e-4
    warmup_steps: int = 30
    weight_decay: float = 0.04
    clip_grad: float = 3.0
    prototypes: int = 256
    head_hidden: int = 256
    head_bottleneck: int = 64
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_steps: int = 100
    center_momentum: float = 0.9
    ema_momentum: float = 0.996
    n_local_views: int = 4
    local_size: int | None = None
    global_scale: tuple[float, float] = (0.5, 1.0)
    local_scale: tuple[float, float] = (0.15, 0.45)
    mask_ratio: tuple[float, float] = (0.1, 0.5)
    noise_std: float = 0.02
    drop_policy: DropPolicy = field(default_factory=DropPolicy)
    contrastive_temp: float = 0.07
    contrastive_weight: float = 1.0
    patch_loss_weight: float = 1.0
    seed: int = 0
    record_diagnostics: bool = False

    def __post_init__(self):
        if self.student_temp <= self.teacher_temp_end or self.student_temp <= self.teacher_temp_start:
            raise ValueError("teacher temperature must stay below the student temperature")
        if not 0.0 < self.center_momentum < 1.0:
            raise ValueError("center momentum must lie in (0, 1)")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError("ema momentum must lie in [0, 1)")


class ContextDistillationTrainer:
    """Owns the student/teacher pair, projection heads, centers, and optimizer.

    All randomness flows from a single seeded numpy generator plus a seeded
    torch init, so a fixed seed makes whole runs replayable.
    """

    def __init__(self, model: nn.Module, schema: GroupSchema, cfg: TrainConfig,
                 dtype: torch.dtype = torch.float32):
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.schema = schema
        self.dtype = dtype
        self.grouped = isinstance(model, GroupedEncoder)
        if not self.grouped and not isinstance(model, BaselineViT):
            raise TypeError(f"unsupported model type {type(model).__name__}")
        if self.grouped:
            cfg.drop_policy.validate_for(schema.n_context)
        elif cfg.drop_policy.mode != "none":
            raise ValueError("channel dropping requires a grouped encoder")
        self.student = model.to(dtype)
        dim = model.cfg.embed_dim
        self.student_cls_head = ProjectionHead(dim, cfg.prototypes, cfg.head_hidden,
                                               cfg.head_bottleneck).to(dtype)
        self.student_patch_head = ProjectionHead(dim, cfg.prototypes, cfg.head_hidden,
                                                 cfg.head_bottleneck).to(dtype)
        self.teacher = copy.deepcopy(self.student)
        self.teacher_cls_head = copy.deepcopy(self.student_cls_head)
        self.teacher_patch_head = copy.deepcopy(self.student_patch_head)
        for mod in (self.teacher, self.teacher_cls_head, self.teacher_patch_head):
            for p in mod.parameters():
                p.requires_grad_(False)
        self.cls_center = torch.zeros(1, cfg.prototypes, dtype=dtype)
        self.patch_center = torch.zeros(1, cfg.prototypes, dtype=dtype)
        decay, no_decay = [], []
        for mod in (self.student, self.student_cls_head, self.student_patch_head):
            for p in mod.parameters():
                (decay if p.ndim > 1 else no_decay).append(p)
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": cfg.weight_decay},
             {"params": no_decay, "weight_decay": 0.0}], lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.diagnostics: list[dict] = []
        model_size = model.cfg.image_size
        self._global_size = model_size
        local = cfg.local_size or max(model.cfg.patch_size, model_size // 2)
        self._local_size = (local // model.cfg.patch_size) * model.cfg.patch_size
        self._n_global_tokens = (model_size // model.cfg.patch_size) ** 2

    # ---------------------------------------------------------------- forwards
    def _student_forward(self, view: torch.Tensor, dropped: list[int],
                         mask: torch.Tensor | None):
        if not self.grouped:
            return self.student.encode(view, mask=mask)
        gb = split_groups(view, self.schema)
        x_c1 = gb.x_c1
        if dropped:
            keep = [i for i in range(x_c1.shape[1]) if i not in dropped]
            x_c1 = x_c1[:, keep]
        return self.student.forward_groups(x_c1, gb.x_c2, mask=mask)

    @torch.no_grad()
    def _teacher_forward(self, view: torch.Tensor, dropped: list[int]):
        if not self.grouped:
            return self.teacher.encode(view)
        gb = split_groups(view, self.schema)
        x_c1 = gb.x_c1
        if dropped:
            keep = [i for i in range(x_c1.shape[1]) if i not in dropped]
            x_c1 = x_c1[:, keep]
        return self.teacher.forward_groups(x_c1, gb.x_c2)

    # ------------------------------------------------------------------- steps
    def build_step_views(self, images: torch.Tensor) -> ViewSet:
        cfg = self.cfg
        views = build_views(
            images.to(self.dtype), n_local=cfg.n_local_views,
            global_size=self._global_size, local_size=self._local_size,
            global_scale=cfg.global_scale, local_scale=cfg.local_scale,
            mask_ratio=cfg.mask_ratio, n_global_tokens=self._n_global_tokens,
            noise_std=cfg.noise_std, rng=self.rng)
        if self.grouped:
            n_ctx = self.schema.n_context
            c = sample_drop_count(cfg.drop_policy, self.rng)
            if c:
                views.dropped_context = sorted(
                    self.rng.choice(n_ctx, size=c, replace=False).tolist())
            if cfg.drop_policy.drops_teacher and c:
                views.teacher_dropped_context = sorted(
                    self.rng.choice(n_ctx, size=c, replace=False).tolist())
        return views

    def train_step(self, images: torch.Tensor, group_ids: np.ndarray | torch.Tensor) -> dict:
        """One optimization step; returns scalar metrics for logging."""
        cfg = self.cfg
        views = self.build_step_views(images)
        t_temp = teacher_temperature(self.step, cfg.teacher_temp_start,
                                     cfg.teacher_temp_end, cfg.teacher_temp_warmup_steps)
        momentum = cosine_momentum(self.step, cfg.steps, cfg.ema_momentum)
        lr = cosine_lr(self.step, cfg.steps, cfg.lr, cfg.warmup_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        with torch.no_grad():
            t_out = [self._teacher_forward(v, views.teacher_dropped_context)
                     for v in views.global_views]
            t_cls_logits = [self.teacher_cls_head(o.cls) for o in t_out]
            t_patch_logits = [self.teacher_patch_head(o.patches) for o in t_out]
            t_cls_probs = [torch.softmax((lg - self.cls_center) / t_temp, dim=-1)
                           for lg in t_cls_logits]
            t_patch_probs = [torch.softmax((lg - self.patch_center) / t_temp, dim=-1)
                             for lg in t_patch_logits]

        s_global = [self._student_forward(v, views.dropped_context, m)
                    for v, m in zip(views.global_views, views.patch_masks)]
        s_local = [self._student_forward(v, views.dropped_context, None)
                   for v in views.local_views]
        s_cls_log = [F.log_softmax(self.student_cls_head(o.cls) / cfg.student_temp, dim=-1)
                     for o in s_global + s_local]

        cls_terms = []
        for ti, zt in enumerate(t_cls_probs):
            for si, log_zs in enumerate(s_cls_log):
                if si == ti:
                    continue
                cls_terms.append(_kl_from_log_probs(log_zs, zt))
        cls_loss = torch.stack(cls_terms).mean()

        patch_terms = []
        for i, (out, mask) in enumerate(zip(s_global, views.patch_masks)):
            if not mask.any():
                continue
            log_zs = F.log_softmax(
                self.student_patch_head(out.patches) / cfg.student_temp, dim=-1)
            zt = t_patch_probs[i]
            patch_terms.append(_kl_from_log_probs(log_zs[mask], zt[mask]))
        patch_loss = (torch.stack(patch_terms).mean() if patch_terms
                      else images.new_zeros((), dtype=self.dtype))

        ids = torch.as_tensor(np.asarray(group_ids))
        contrastive = group_contrastive_loss(
            torch.cat([o.cls for o in s_global], dim=0),
            torch.cat([ids, ids]), temperature=cfg.contrastive_temp)

        total = cls_loss + cfg.patch_loss_weight * patch_loss \
            + cfg.contrastive_weight * contrastive
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step}: cls={cls_loss.item()!r} "
                f"patch={patch_loss.item()!r} contrastive={contrastive.item()!r} "
                f"lr={lr:.3g} teacher_temp={t_temp:.3g}")

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if cfg.clip_grad:
            params = [p for g in self.optimizer.param_groups for p in g["params"]]
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_grad)
        self.optimizer.step()

        ema_update(self.teacher, self.student, momentum)
        ema_update(self.teacher_cls_head, self.student_cls_head, momentum)
        ema_update(self.teacher_patch_head, self.student_patch_head, momentum)

        with torch.no_grad():
            cls_batch_mean = torch.cat(t_cls_logits, dim=0).mean(dim=0, keepdim=True)
            patch_batch_mean = torch.cat(
                [lg.reshape(-1, lg.shape[-1]) for lg in t_patch_logits], dim=0
            ).mean(dim=0, keepdim=True)
            m = cfg.center_momentum
            self.cls_center = m * self.cls_center + (1 - m) * cls_batch_mean
            self.patch_center = m * self.patch_center + (1 - m) * patch_batch_mean
            if cfg.record_diagnostics:
                self.diagnostics.append({
                    "step": self.step,
                    "teacher_cls_batch_mean": cls_batch_mean.clone(),
                    "teacher_patch_batch_mean": patch_batch_mean.clone(),
                    "dropped_context": list(views.dropped_context),
                })

        self.step += 1
        return {
            "step": self.step,
            "loss": float(total.item()),
            "cls_loss": float(cls_loss.item()),
            "patch_loss": float(patch_loss.item()),
            "contrastive_loss": float(contrastive.item()),
            "lr": lr,
            "ema_momentum": momentum,
            "teacher_temp": t_temp,
            "dropped_context": list(views.dropped_context),
        }

    # --------------------------------------------------------------- data feed
    def sample_batch_indices(self, group_ids: np.ndarray) -> np.ndarray:
        """Group-structured batch: a few groups, several cells each."""
        cfg = self.cfg
        unique = np.unique(group_ids)
        n_groups = min(cfg.batch_groups, len(unique))
        chosen = self.rng.choice(unique, size=n_groups, replace=False)
        idx = []
        for g in chosen:
            members = np.flatnonzero(group_ids == g)
            take = self.rng.choice(members, size=cfg.cells_per_group,
                                   replace=len(members) < cfg.cells_per_group)
            idx.extend(take.tolist())
        return np.array(idx)

    def fit(self, images: torch.Tensor | np.ndarray, group_ids: np.ndarray,
            steps: int | None = None, log_every: int = 0) -> list[dict]:
        """Run ``steps`` optimization steps over group-sampled batches."""
        images = torch.as_tensor(np.asarray(images))
        group_ids = np.asarray(group_ids)
        history = []
        for _ in range(steps if steps is not None else self.cfg.steps):
            idx = self.sample_batch_indices(group_ids)
            metrics = self.train_step(images[idx], group_ids[idx])
            history.append(metrics)
            if log_every and metrics["step"] % log_every == 0:
                logger.info("step %d loss %.4f (cls %.4f patch %.4f con %.4f)",
                            metrics["step"], metrics["loss"], metrics["cls_loss"],
                            metrics["patch_loss"], metrics["contrastive_loss"])
        return history
