import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ccvit.distill import (ContextDistillationTrainer, DropPolicy, ProjectionHead,
                           TrainConfig, TrainingDivergedError, cosine_momentum,
                           drop_channels, ema_update, group_contrastive_loss,
                           kl_distillation_loss, masked_patch_loss, patch_mask,
                           project, sample_drop_count, sample_patch_mask)
from ccvit.encoder import EncoderConfig, GroupedEncoder
from ccvit.schema import parse_schema
from ccvit.synth import SynthConfig, generate


def toy_setup(seed=0, policy=DropPolicy("none"), steps=10, dtype=torch.float32,
              aggregation="post", record=False):
    ds = generate(SynthConfig(n_samples=64, image_size=32, n_context=3, n_concept=2,
                              n_classes=4, seed=123))
    schema = ds.schema()
    torch.manual_seed(seed)
    enc = GroupedEncoder(EncoderConfig(embed_dim=32, heads=4, branch_depth=1,
                                       shared_depth=1, patch_size=8, image_size=32,
                                       aggregation=aggregation))
    cfg = TrainConfig(steps=steps, prototypes=64, head_hidden=64, head_bottleneck=32,
                      n_local_views=2, drop_policy=policy, seed=seed,
                      record_diagnostics=record)
    trainer = ContextDistillationTrainer(enc, schema, cfg, dtype=dtype)
    return ds, trainer


# ---------------------------------------------------------------- channel drop

def test_drop_channels_counts():
    x = torch.rand(4, 3, 8, 8)
    out, dropped = drop_channels(x, 1, np.random.default_rng(0))
    assert out.shape == (4, 2, 8, 8)
    assert len(dropped) == 1


def test_drop_zero_is_identity():
    x = torch.rand(2, 3, 8, 8)
    out, dropped = drop_channels(x, 0, np.random.default_rng(0))
    assert torch.equal(out, x)
    assert dropped == []


def test_drop_is_deterministic_under_seed():
    x = torch.rand(2, 4, 8, 8)
    sets = [drop_channels(x, 2, np.random.default_rng(7))[1] for _ in range(5)]
    assert all(s == sets[0] for s in sets)


def test_drop_rejects_full_context_removal():
    with pytest.raises(ValueError):
        drop_channels(torch.rand(1, 3, 4, 4), 3, np.random.default_rng(0))


def test_drop_policy_validation():
    with pytest.raises(ValueError):
        DropPolicy("sometimes", 1)
    DropPolicy("fixed_student", 2).validate_for(3)
    with pytest.raises(ValueError):
        DropPolicy("fixed_student", 3).validate_for(3)
    with pytest.raises(ValueError):
        DropPolicy("uniform_student", 3).validate_for(3)


def test_sample_drop_count_modes():
    rng = np.random.default_rng(0)
    assert all(sample_drop_count(DropPolicy("none"), rng) == 0 for _ in range(10))
    assert all(sample_drop_count(DropPolicy("fixed_student", 1), rng) == 1
               for _ in range(10))
    assert all(sample_drop_count(DropPolicy("student_and_teacher", 2), rng) == 2
               for _ in range(10))
    draws = [sample_drop_count(DropPolicy("uniform_student", 2), rng)
             for _ in range(3000)]
    freqs = np.bincount(draws, minlength=3) / len(draws)
    assert np.all(np.abs(freqs - 1 / 3) < 0.05)


# ---------------------------------------------------------------- patch masks

def test_patch_mask_floor_rule():
    mask = sample_patch_mask(8, 4, (0.5, 0.5), np.random.default_rng(0))
    assert (mask.sum(dim=1) == 2).all()


def test_patch_mask_zero_ratio():
    mask = sample_patch_mask(4, 16, (0.0, 0.0), np.random.default_rng(0))
    assert not mask.any()


def test_patch_mask_replaces_with_token():
    tokens = torch.zeros(2, 3, 4, 8)
    token = torch.ones(8)
    out, mask = patch_mask(tokens, (0.5, 0.5), np.random.default_rng(0), token)
    assert (mask.sum(dim=1) == 2).all()
    assert torch.equal(out[mask.unsqueeze(1).expand(-1, 3, -1)],
                       torch.ones_like(out[mask.unsqueeze(1).expand(-1, 3, -1)]))
    assert torch.equal(out[~mask.unsqueeze(1).expand(-1, 3, -1)],
                       torch.zeros_like(out[~mask.unsqueeze(1).expand(-1, 3, -1)]))


def test_patch_mask_invalid_range():
    with pytest.raises(ValueError):
        sample_patch_mask(1, 4, (0.5, 0.2), np.random.default_rng(0))


# ---------------------------------------------------------------- projection

def test_project_student_teacher_symmetry():
    torch.manual_seed(0)
    head = ProjectionHead(16, 32, hidden_dim=32, bottleneck_dim=16)
    y = torch.rand(4, 16)
    zero_center = torch.zeros(1, 32)
    z_s = project(y, head, temperature=0.1)
    z_t = project(y, head, temperature=0.1, center=zero_center, detach=True)
    assert torch.allclose(z_s, z_t, atol=1e-7)
    assert not z_t.requires_grad


def test_project_center_equal_to_logits_gives_uniform():
    torch.manual_seed(0)
    head = ProjectionHead(8, 16, hidden_dim=16, bottleneck_dim=8)
    y = torch.rand(1, 8)
    logits = head(y)
    z = project(y, head, temperature=0.07, center=logits, detach=True)
    assert torch.allclose(z, torch.full_like(z, 1 / 16), atol=1e-6)


def test_project_probabilities_sum_to_one():
    torch.manual_seed(1)
    head = ProjectionHead(8, 16, hidden_dim=16, bottleneck_dim=8)
    z = project(torch.rand(5, 8), head, temperature=0.1)
    assert torch.allclose(z.sum(dim=-1), torch.ones(5), atol=1e-6)


# ---------------------------------------------------------------- KL losses

def test_kl_identity_is_zero():
    z = torch.softmax(torch.rand(4, 8), dim=-1)
    assert kl_distillation_loss(z, z).item() == pytest.approx(0.0, abs=1e-7)


def test_kl_one_hot_vs_uniform_closed_form():
    z_t = torch.zeros(1, 8)
    z_t[0, 3] = 1.0
    z_s = torch.full((1, 8), 1 / 8)
    assert kl_distillation_loss(z_s, z_t).item() == pytest.approx(math.log(8), abs=1e-6)


def test_kl_matches_independent_oracle():
    from scipy.stats import entropy
    rng = np.random.default_rng(0)
    for _ in range(25):
        a = rng.dirichlet(np.ones(12))
        b = rng.dirichlet(np.ones(12))
        ours = kl_distillation_loss(torch.tensor(a).unsqueeze(0),
                                    torch.tensor(b).unsqueeze(0)).item()
        assert ours == pytest.approx(entropy(b, a), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=4, max_size=4),
       st.lists(st.floats(0.01, 10.0), min_size=4, max_size=4))
def test_kl_nonnegative_property(raw_s, raw_t):
    z_s = torch.tensor(raw_s, dtype=torch.float64)
    z_s /= z_s.sum()
    z_t = torch.tensor(raw_t, dtype=torch.float64)
    z_t /= z_t.sum()
    val = kl_distillation_loss(z_s.unsqueeze(0), z_t.unsqueeze(0)).item()
    assert val >= -1e-12
    if torch.allclose(z_s, z_t, atol=1e-9):
        assert abs(val) < 1e-7


def test_masked_patch_loss_empty_mask_is_zero():
    z = torch.softmax(torch.rand(2, 4, 8), dim=-1)
    mask = torch.zeros(2, 4, dtype=torch.bool)
    assert masked_patch_loss(z, z * 0 + 1 / 8, mask).item() == 0.0


def test_masked_patch_loss_equal_distributions_zero():
    z = torch.softmax(torch.rand(2, 4, 8), dim=-1)
    mask = torch.ones(2, 4, dtype=torch.bool)
    assert masked_patch_loss(z, z, mask).item() == pytest.approx(0.0, abs=1e-7)


def test_masked_patch_loss_single_position_reduces_to_kl():
    torch.manual_seed(0)
    z_s = torch.softmax(torch.rand(1, 4, 8), dim=-1)
    z_t = torch.softmax(torch.rand(1, 4, 8), dim=-1)
    mask = torch.zeros(1, 4, dtype=torch.bool)
    mask[0, 2] = True
    expected = kl_distillation_loss(z_s[0, 2:3], z_t[0, 2:3]).item()
    assert masked_patch_loss(z_s, z_t, mask).item() == pytest.approx(expected, abs=1e-7)


# ---------------------------------------------------------------- contrastive

def test_contrastive_two_groups_positive_and_improves_when_collinear():
    torch.manual_seed(0)
    ids = torch.tensor([0] * 8 + [1] * 8)
    random_emb = torch.randn(16, 16)
    loose = group_contrastive_loss(random_emb, ids).item()
    anchor = torch.randn(1, 16)
    other = torch.randn(1, 16)
    tight = torch.cat([anchor.repeat(8, 1) + 0.01 * torch.randn(8, 16),
                       other.repeat(8, 1) + 0.01 * torch.randn(8, 16)])
    assert loose > 0
    assert group_contrastive_loss(tight, ids).item() < loose


def test_contrastive_identical_embeddings_closed_form():
    ids = torch.tensor([0] * 8 + [1] * 8)
    emb = torch.ones(16, 8)
    val = group_contrastive_loss(emb, ids).item()
    assert val == pytest.approx(math.log(15), abs=1e-5)


def test_contrastive_single_group_returns_zero():
    emb = torch.randn(6, 8)
    assert group_contrastive_loss(emb, torch.zeros(6)).item() == 0.0


# ---------------------------------------------------------------- EMA

def test_ema_endpoints_and_interpolation():
    a = torch.nn.Linear(4, 4)
    b = torch.nn.Linear(4, 4)
    orig = b.weight.detach().clone()
    ema_update(b, a, 1.0)
    assert torch.equal(b.weight, orig)
    ema_update(b, a, 0.0)
    assert torch.equal(b.weight, a.weight)


def test_ema_scalar_arithmetic():
    t = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    s = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    holder_t = torch.nn.ParameterList([t])
    holder_s = torch.nn.ParameterList([s])
    ema_update(holder_t, holder_s, 0.996)
    assert t.item() == pytest.approx(0.996, abs=1e-12)


def test_ema_closed_form_over_steps():
    t = torch.nn.Linear(3, 3).double()
    s = torch.nn.Linear(3, 3).double()
    t0 = t.weight.detach().clone()
    for _ in range(5):
        ema_update(t, s, 0.9)
    expected = 0.9 ** 5 * t0 + (1 - 0.9 ** 5) * s.weight.detach()
    assert torch.allclose(t.weight, expected, atol=1e-12)


def test_cosine_momentum_schedule_endpoints():
    assert cosine_momentum(0, 100, 0.996) == pytest.approx(0.996)
    assert cosine_momentum(100, 100, 0.996) == pytest.approx(1.0)
    assert cosine_momentum(50, 100, 0.996) == pytest.approx(0.998)


# ---------------------------------------------------------------- train steps

def test_teacher_never_accumulates_gradients():
    ds, trainer = toy_setup(policy=DropPolicy("uniform_student", 2))
    trainer.train_step(torch.as_tensor(ds.images[:8]), ds.group_ids[:8])
    for mod in (trainer.teacher, trainer.teacher_cls_head, trainer.teacher_patch_head):
        for p in mod.parameters():
            assert not p.requires_grad
            assert p.grad is None


def test_teacher_starts_as_exact_student_copy():
    _, trainer = toy_setup()
    for (tn, tp), (sn, sp) in zip(trainer.teacher.named_parameters(),
                                  trainer.student.named_parameters()):
        assert tn == sn
        assert torch.equal(tp, sp)


def test_dropped_indices_are_context_only():
    ds, trainer = toy_setup(policy=DropPolicy("fixed_student", 2))
    n_ctx = trainer.schema.n_context
    for _ in range(5):
        views = trainer.build_step_views(torch.as_tensor(ds.images[:4]))
        assert len(views.dropped_context) == 2
        assert all(0 <= i < n_ctx for i in views.dropped_context)
        assert views.teacher_dropped_context == []


def test_student_and_teacher_mode_drops_both():
    ds, trainer = toy_setup(policy=DropPolicy("student_and_teacher", 1))
    views = trainer.build_step_views(torch.as_tensor(ds.images[:4]))
    assert len(views.dropped_context) == 1
    assert len(views.teacher_dropped_context) == 1


def test_train_step_is_bit_reproducible_in_double():
    ds, t1 = toy_setup(seed=5, policy=DropPolicy("uniform_student", 2),
                       dtype=torch.float64)
    _, t2 = toy_setup(seed=5, policy=DropPolicy("uniform_student", 2),
                      dtype=torch.float64)
    x = torch.as_tensor(ds.images[:8])
    for _ in range(3):
        m1 = t1.train_step(x, ds.group_ids[:8])
        m2 = t2.train_step(x, ds.group_ids[:8])
        assert m1["loss"] == m2["loss"]
        assert m1["dropped_context"] == m2["dropped_context"]
    for p1, p2 in zip(t1.student.parameters(), t2.student.parameters()):
        assert torch.equal(p1, p2)


def test_center_tracks_teacher_logit_means_closed_form():
    ds, trainer = toy_setup(policy=DropPolicy("none"), record=True,
                            dtype=torch.float64)
    x = torch.as_tensor(ds.images[:8])
    for _ in range(5):
        trainer.train_step(x, ds.group_ids[:8])
    m = trainer.cfg.center_momentum
    center = torch.zeros_like(trainer.cls_center)
    for diag in trainer.diagnostics:
        center = m * center + (1 - m) * diag["teacher_cls_batch_mean"]
    assert torch.allclose(center, trainer.cls_center, atol=1e-12)


def test_loss_decreases_over_short_run():
    ds, trainer = toy_setup(policy=DropPolicy("uniform_student", 2), steps=40)
    history = trainer.fit(ds.images, ds.group_ids, steps=40)
    assert history[-1]["loss"] < history[0]["loss"]


def test_non_finite_loss_raises_with_diagnostics():
    ds, trainer = toy_setup()
    with torch.no_grad():
        trainer.student_cls_head.prototypes.weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="cls="):
        trainer.train_step(torch.as_tensor(ds.images[:4]), ds.group_ids[:4])


def test_baseline_model_rejects_drop_policy():
    from ccvit.encoder import BaselineConfig, BaselineViT
    ds = generate(SynthConfig(n_samples=16, image_size=32, seed=1))
    vit = BaselineViT(BaselineConfig(in_channels=5, embed_dim=32, heads=4, depth=1,
                                     patch_size=8, image_size=32))
    with pytest.raises(ValueError, match="grouped"):
        ContextDistillationTrainer(vit, ds.schema(),
                                   TrainConfig(drop_policy=DropPolicy("fixed_student", 1)))


def test_temperature_ordering_enforced():
    with pytest.raises(ValueError, match="temperature"):
        TrainConfig(student_temp=0.05, teacher_temp_start=0.04, teacher_temp_end=0.07)
