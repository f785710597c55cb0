import numpy as np
import pytest
import torch

from ccvit.schema import parse_schema, split_groups
from ccvit.stems import GroupStem, StemConfig, instance_normalize, naive_grouped_stem

SCHEMA = parse_schema({"channels": [
    {"name": "a", "role": "context", "index": 0},
    {"name": "b", "role": "context", "index": 1},
    {"name": "c", "role": "context", "index": 2},
    {"name": "d", "role": "concept", "index": 3},
]})


def test_constant_plane_maps_to_zeros():
    # float32 mean rounding over sqrt(eps) leaves a ~2e-4 residual at most
    x = torch.full((2, 3, 8, 8), 7.3)
    out = instance_normalize(x)
    assert torch.allclose(out, torch.zeros_like(out), atol=1e-3)
    exact = instance_normalize(torch.full((1, 1, 8, 8), 0.5))
    assert torch.equal(exact, torch.zeros_like(exact))


def test_two_point_plane_standardizes_to_plus_minus_one():
    plane = torch.zeros(1, 1, 4, 4)
    plane[0, 0, :2] = 1.0
    out = instance_normalize(plane)
    assert torch.allclose(out.abs(), torch.ones_like(out), atol=1e-3)
    assert out[0, 0, 0, 0] > 0 and out[0, 0, 3, 0] < 0


def test_random_plane_moments():
    torch.manual_seed(0)
    x = torch.rand(4, 5, 16, 16)
    out = instance_normalize(x)
    mu = out.mean(dim=(2, 3))
    sigma = out.std(dim=(2, 3), unbiased=False)
    assert mu.abs().max() <= 1e-4
    assert (sigma - 1).abs().max() <= 1e-3


def test_instance_norm_idempotent_up_to_eps():
    torch.manual_seed(1)
    x = torch.rand(2, 3, 12, 12)
    once = instance_normalize(x)
    twice = instance_normalize(once)
    rel = (twice - once).abs().max() / once.abs().max()
    assert rel <= 1e-3


def test_tokenize_shapes():
    stem = GroupStem(StemConfig(patch_size=16, token_dim=32, image_size=32))
    tokens = stem.tokenize(torch.rand(2, 3, 32, 32))
    assert tokens.shape == (2, 3, 4, 32)


def test_duplicated_channel_duplicates_token_slice():
    stem = GroupStem(StemConfig(patch_size=8, token_dim=16, image_size=16))
    plane = torch.rand(2, 1, 16, 16)
    tokens = stem.tokenize(torch.cat([plane, plane], dim=1))
    assert torch.equal(tokens[:, 0], tokens[:, 1])


def test_zero_input_gives_bias_plus_positional():
    stem = GroupStem(StemConfig(patch_size=8, token_dim=16, image_size=16))
    tokens = stem.tokenize(torch.zeros(1, 1, 16, 16))
    expected = stem.proj.bias.reshape(1, 1, 1, -1) + stem.pos_embed.unsqueeze(1)
    assert torch.allclose(tokens, expected, atol=1e-7)


def test_positional_table_interpolates_for_other_resolutions():
    stem = GroupStem(StemConfig(patch_size=8, token_dim=16, image_size=32))
    tokens = stem.tokenize(torch.rand(1, 2, 16, 16))
    assert tokens.shape == (1, 2, 4, 16)


def test_naive_grouped_stem_shape():
    ctx = GroupStem(StemConfig(patch_size=16, token_dim=32, image_size=32))
    con = GroupStem(StemConfig(patch_size=16, token_dim=32, image_size=32))
    out = naive_grouped_stem(torch.rand(2, 4, 32, 32), SCHEMA, ctx, con)
    assert out.shape == (2, 4, 64)


def test_naive_grouped_stem_within_group_permutation_invariance():
    torch.manual_seed(0)
    ctx = GroupStem(StemConfig(patch_size=8, token_dim=16, image_size=16))
    con = GroupStem(StemConfig(patch_size=8, token_dim=16, image_size=16))
    x = torch.rand(2, 4, 16, 16)
    base = naive_grouped_stem(x, SCHEMA, ctx, con)
    permuted = x[:, [2, 0, 1, 3]]   # permute the three context channels
    out = naive_grouped_stem(permuted, SCHEMA, ctx, con)
    assert (out - base).abs().max() <= 1e-5


def test_naive_grouped_stem_singleton_groups_equal_concat():
    schema = parse_schema({"channels": [
        {"name": "x", "role": "context", "index": 0},
        {"name": "y", "role": "concept", "index": 1},
    ]})
    ctx = GroupStem(StemConfig(patch_size=8, token_dim=16, image_size=16))
    con = GroupStem(StemConfig(patch_size=8, token_dim=16, image_size=16))
    x = torch.rand(2, 2, 16, 16)
    gb = split_groups(x, schema)
    direct = torch.cat([
        ctx.tokenize(instance_normalize(gb.x_c1))[:, 0],
        con.tokenize(instance_normalize(gb.x_c2))[:, 0]], dim=-1)
    assert torch.allclose(naive_grouped_stem(x, schema, ctx, con), direct, atol=1e-7)


def test_stem_gradients_match_finite_differences():
    torch.manual_seed(0)
    stem = GroupStem(StemConfig(patch_size=4, token_dim=6, image_size=8)).double()
    x = torch.rand(1, 2, 8, 8, dtype=torch.float64)
    weights = torch.rand(1, 2, 4, 6, dtype=torch.float64)

    def loss_fn():
        return (stem.tokenize(x) * weights).sum()

    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(0)
    checked = 0
    for name, param in stem.named_parameters():
        grad = param.grad
        flat = param.data.reshape(-1)
        for idx in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
            h = 1e-6 * max(1.0, abs(flat[idx].item()))
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss_fn().item()
            flat[idx] = orig - h
            down = loss_fn().item()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = grad.reshape(-1)[idx].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8), \
                f"{name}[{idx}]: fd {fd} vs autograd {an}"
            checked += 1
    assert checked >= 12


def test_mask_requires_token():
    stem = GroupStem(StemConfig(patch_size=8, token_dim=16, image_size=16))
    mask = torch.ones(1, 4, dtype=torch.bool)
    with pytest.raises(ValueError, match="mask token"):
        stem.tokenize(torch.rand(1, 1, 16, 16), mask=mask)
