import pytest
import torch

from ccvit.schema import (ChannelRole, GroupedBatch, SchemaError, build_ood_plan,
                          merge_groups, parse_schema, split_groups)

HPA_MANIFEST = {"channels": [
    {"name": "microtubules", "role": "context", "index": 0},
    {"name": "nucleus", "role": "context", "index": 1},
    {"name": "er", "role": "context", "index": 2},
    {"name": "protein", "role": "concept", "index": 3},
]}

JUMP_MANIFEST = {"channels": [
    {"name": "nucleus", "role": "ctx", "index": 0},
    {"name": "er", "role": "ctx", "index": 1},
    {"name": "rna", "role": "con", "index": 2},
    {"name": "agp", "role": "con", "index": 3},
    {"name": "mito", "role": "con", "index": 4},
]}


def test_parse_hpa_manifest_counts():
    schema = parse_schema(HPA_MANIFEST)
    assert schema.n_context == 3
    assert schema.n_concept == 1
    assert schema.n_channels == 4
    assert schema.channel("protein").role is ChannelRole.CONCEPT


def test_parse_jump_manifest_counts_and_aliases():
    schema = parse_schema(JUMP_MANIFEST)
    assert schema.n_context == 2
    assert schema.n_concept == 3
    assert [c.name for c in schema.concept_channels] == ["rna", "agp", "mito"]


def test_all_context_manifest_rejected():
    manifest = {"channels": [
        {"name": "a", "role": "context", "index": 0},
        {"name": "b", "role": "context", "index": 1},
    ]}
    with pytest.raises(SchemaError, match="concept"):
        parse_schema(manifest)


def test_duplicate_names_rejected():
    manifest = {"channels": [
        {"name": "a", "role": "context", "index": 0},
        {"name": "a", "role": "concept", "index": 1},
    ]}
    with pytest.raises(SchemaError, match="duplicate"):
        parse_schema(manifest)


def test_index_gap_rejected():
    manifest = {"channels": [
        {"name": "a", "role": "context", "index": 0},
        {"name": "b", "role": "concept", "index": 2},
    ]}
    with pytest.raises(SchemaError, match="permutation"):
        parse_schema(manifest)


def test_parse_is_idempotent_through_text():
    schema = parse_schema(JUMP_MANIFEST)
    assert parse_schema(schema.to_text()) == schema
    assert parse_schema(schema.to_manifest()) == schema


def test_split_groups_hpa_shapes():
    schema = parse_schema(HPA_MANIFEST)
    x = torch.rand(2, 4, 16, 16)
    gb = split_groups(x, schema)
    assert gb.x_c1.shape == (2, 3, 16, 16)
    assert gb.x_c2.shape == (2, 1, 16, 16)


def test_split_groups_minimal_schema():
    schema = parse_schema({"channels": [
        {"name": "ctx", "role": "context", "index": 0},
        {"name": "con", "role": "concept", "index": 1},
    ]})
    gb = split_groups(torch.rand(3, 2, 8, 8), schema)
    assert gb.x_c1.shape == (3, 1, 8, 8)
    assert gb.x_c2.shape == (3, 1, 8, 8)


def test_split_groups_channel_count_mismatch():
    schema = parse_schema(HPA_MANIFEST)
    with pytest.raises(SchemaError, match="channels"):
        split_groups(torch.rand(2, 5, 8, 8), schema)


def test_split_then_merge_is_bit_exact():
    # interleaved roles so that the reindexing actually permutes
    manifest = {"channels": [
        {"name": "c0", "role": "concept", "index": 0},
        {"name": "x1", "role": "context", "index": 1},
        {"name": "c2", "role": "concept", "index": 2},
        {"name": "x3", "role": "context", "index": 3},
    ]}
    schema = parse_schema(manifest)
    x = torch.rand(4, 4, 8, 8)
    assert torch.equal(merge_groups(split_groups(x, schema), schema), x)


def test_grouped_batch_rejects_nonfinite():
    bad = torch.full((1, 1, 4, 4), float("nan"))
    with pytest.raises(SchemaError, match="finite"):
        GroupedBatch(x_c1=bad, x_c2=torch.rand(1, 1, 4, 4))


def test_ood_plan_jump():
    schema = parse_schema(JUMP_MANIFEST)
    plan = build_ood_plan(schema)
    assert len(plan.passes) == 3
    assert plan.concat_order == ("rna", "agp", "mito")
    ctx_lists = {p[0] for p in plan.passes}
    assert ctx_lists == {("nucleus", "er")}


def test_ood_plan_single_concept_degenerate():
    schema = parse_schema(HPA_MANIFEST)
    plan = build_ood_plan(schema)
    assert len(plan.passes) == 1
    assert plan.concat_order == ("protein",)


def test_ood_plan_partition_property():
    manifest = {"channels": [{"name": "ctx", "role": "context", "index": 0}]
                + [{"name": f"con{i}", "role": "concept", "index": i + 1}
                   for i in range(4)]}
    plan = build_ood_plan(parse_schema(manifest))
    covered = [concept for _, concept in plan.passes]
    assert sorted(covered) == [f"con{i}" for i in range(4)]
    assert len(set(covered)) == 4
