import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plantocc import io
from plantocc.geometry import (
    collision_broad,
    collision_narrow,
    overlap_fraction,
    pack_voxels,
    unpack_voxels,
    voxel_centers,
    voxelize,
)
from plantocc.scene import (
    PROTOTYPES,
    RELATION_KINDS,
    AttachmentEdge,
    GenerationConfig,
    OrganInstance,
    OrganKind,
    OrganPrototype,
    PlacementError,
    Relation,
    Scene,
    Socket,
    generate_scene,
    sample_instance_points,
)

RES = 0.004


# --- voxels and collisions ---------------------------------------------------


def test_voxelize_examples():
    assert voxelize([(0, 0, 0)], RES).tolist() == [[0, 0, 0]]
    assert len(voxelize([(0, 0, 0), (0.001, 0, 0)], RES)) == 1
    assert voxelize([(0, 0, 0), (0.004, 0, 0)], RES).tolist() == [[0, 0, 0], [1, 0, 0]]
    assert voxelize(np.zeros((0, 3)), RES).shape == (0, 3)
    with pytest.raises(ValueError):
        voxelize([(0, 0, 0)], 0.0)


def test_voxelize_sorted_and_negative():
    v = voxelize([(0.01, 0, 0), (-0.001, 0, 0), (0, -0.01, 0.02)], RES)
    assert v.tolist() == sorted(v.tolist())
    assert [-1, 0, 0] in v.tolist()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-2, 2, allow_nan=False)] * 3), min_size=1, max_size=60))
def test_voxelize_idempotent(points):
    v = voxelize(points, RES)
    assert np.array_equal(voxelize(voxel_centers(v, RES), RES), v)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(*[st.integers(-(1 << 20), (1 << 20) - 1)] * 3), min_size=1, max_size=30))
def test_pack_roundtrip_preserves_order(rows):
    arr = np.array(rows, dtype=np.int64)
    keys = pack_voxels(arr)
    assert np.array_equal(unpack_voxels(keys), arr)
    assert np.array_equal(np.argsort(keys, kind="stable"), np.lexsort(arr.T[::-1]))


def test_collision_broad_conventions():
    unit = (np.zeros(3), np.ones(3))
    assert not collision_broad(unit, (np.full(3, 4.0), np.full(3, 5.0)))
    assert collision_broad(unit, unit)
    assert collision_broad(unit, (np.array([1.0, 0, 0]), np.array([2.0, 1, 1])))  # shared face
    with pytest.raises(ValueError):
        collision_broad((np.ones(3), np.zeros(3)), unit)


def test_collision_narrow_conventions():
    a = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert not collision_narrow(a, a + 10, 0.05)
    assert collision_narrow(a[:2], a, 0.0)
    # one of four shared -> fraction 0.25, exactly the threshold
    assert overlap_fraction(a, np.array([[3, 0, 0], [9, 9, 9], [8, 8, 8], [7, 7, 7]])) == 0.25
    assert not collision_narrow(a, np.array([[3, 0, 0], [9, 9, 9], [8, 8, 8], [7, 7, 7]]), 0.25)
    with pytest.raises(ValueError):
        collision_narrow(a, np.zeros((0, 3)), 0.1)


# --- prototypes and instances -----------------------------------------------


def test_prototypes_valid():
    for kind, proto in PROTOTYPES.items():
        assert proto.kind == kind
        assert all(v > 0 for v in proto.shape_params.values())
    with pytest.raises(ValueError):
        OrganPrototype(OrganKind.LEAF, {"length": -1.0}, ())
    with pytest.raises(ValueError):
        OrganPrototype(OrganKind.LEAF, {"length": 1.0}, (Socket((0.0, 1.0), (OrganKind.FRUIT,)),))


def test_instance_centroid_and_extents():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [1, 2, 3.0]])
    inst = OrganInstance(0, OrganKind.LEAF, pts)
    assert np.allclose(inst.centroid, pts.mean(axis=0))
    assert np.allclose(inst.extents, [1, 2, 3])
    with pytest.raises(ValueError):
        OrganInstance(0, OrganKind.LEAF, np.zeros((0, 3)))


def test_sample_instance_points():
    rng = np.random.default_rng(0)
    inst = OrganInstance(3, OrganKind.LEAF, rng.normal(size=(500, 3)))
    s = sample_instance_points(inst, 128, seed=5)
    assert s.shape == (128, 3)
    surface = {tuple(p) for p in inst.surface_points.tolist()}
    assert all(tuple(p) in surface for p in s.tolist())
    assert len({tuple(p) for p in s.tolist()}) == 128
    assert np.array_equal(s, sample_instance_points(inst, 128, seed=5))
    small = OrganInstance(1, OrganKind.LEAF, rng.normal(size=(10, 3)))
    big = sample_instance_points(small, 40, seed=0)
    assert len(big) == 40 and len({tuple(p) for p in big.tolist()}) <= 10
    with pytest.raises(ValueError):
        sample_instance_points(small, 0, seed=0)


def test_scene_validation_rejects_bad_topology():
    pts = np.random.default_rng(0).normal(size=(5, 3))
    stem = OrganInstance(0, OrganKind.STEM, pts)
    fruit = OrganInstance(1, OrganKind.FRUIT, pts)
    with pytest.raises(ValueError, match="no parent"):
        Scene([stem, fruit], [], 0, "x")
    with pytest.raises(ValueError, match="joins"):
        Scene([stem, fruit], [AttachmentEdge(0, 1, Relation.STEM_LEAF, (0, 0, 0))], 0, "x")
    with pytest.raises(ValueError, match="contiguous"):
        Scene([OrganInstance(1, OrganKind.STEM, pts)], [], 0, "x")


# --- generation --------------------------------------------------------------


def test_minimal_config_single_stem():
    cfg = GenerationConfig(stem_count_range=(1, 1), leaves_per_stem_range=(0, 0), fruits_per_stem_range=(0, 0))
    scene = generate_scene(cfg, 7)
    assert len(scene.instances) == 1 and scene.attachments == []


def test_instance_counts_follow_config():
    cfg = GenerationConfig(stem_count_range=(2, 2), leaves_per_stem_range=(4, 4), fruits_per_stem_range=(2, 2))
    scene = generate_scene(cfg, 42)
    kinds = [inst.kind for inst in scene.instances]
    assert len(kinds) == 18 and len(scene.attachments) == 16
    assert kinds.count(OrganKind.STEM) == 2
    assert kinds.count(OrganKind.LEAF) == 8
    assert kinds.count(OrganKind.PEDUNCLE) == 4
    assert kinds.count(OrganKind.FRUIT) == 4


def test_generation_is_byte_deterministic():
    cfg = GenerationConfig()
    assert generate_scene(cfg, 3).to_json() == generate_scene(cfg, 3).to_json()
    assert generate_scene(cfg, 3).to_json() != generate_scene(cfg, 4).to_json()


@pytest.mark.parametrize("seed", range(12))
def test_generated_topology_and_collisions(seed):
    cfg = GenerationConfig()
    scene = generate_scene(cfg, seed)
    for e in scene.attachments:
        assert (scene.kind_of(e.parent_id), scene.kind_of(e.child_id)) == RELATION_KINDS[e.relation]
    children = [e.child_id for e in scene.attachments]
    assert len(children) == len(set(children))
    for inst in scene.instances:
        assert (inst.kind == OrganKind.STEM) == (inst.id not in children)
    vox = scene.voxels_by_instance(cfg.voxel_resolution)
    for a in range(len(vox)):
        for b in range(a + 1, len(vox)):
            assert not collision_narrow(vox[a], vox[b], cfg.collision_overlap_threshold)


def test_scene_json_roundtrip():
    scene = generate_scene(GenerationConfig(), 11)
    text = scene.to_json()
    data = json.loads(text)
    assert data["schema"] == "plantocc.scene/1"
    again = Scene.from_dict(data)
    assert again.to_json() == text


def test_impossible_placement_raises():
    cfg = GenerationConfig(stem_count_range=(1, 1), leaves_per_stem_range=(40, 40), fruits_per_stem_range=(0, 0),
                           attachment_height_range=(0.5, 0.5000001), orientation_jitter_range=(0.0, 0.0),
                           collision_overlap_threshold=0.0)
    with pytest.raises(PlacementError):
        generate_scene(cfg, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        GenerationConfig(voxel_resolution=0.0)
    with pytest.raises(ValueError):
        GenerationConfig(points_per_instance=3)
    with pytest.raises(ValueError):
        GenerationConfig(stem_count_range=(3, 2))
    assert GenerationConfig.from_dict(GenerationConfig().to_dict()) == GenerationConfig()


# --- serialization ----------------------------------------------------------


def test_round_sig_and_dumps():
    assert io.round_sig(1.23456789012) == 1.23456789
    assert io.dumps({"a": -0.0, "b": np.float32(0.5), "c": np.arange(2)}) == '{"a":0.0,"b":0.5,"c":[0,1]}'
    with pytest.raises(ValueError):
        io.dumps({"x": float("nan")})


def test_read_json_names_file(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text("{nope")
    with pytest.raises(ValueError, match="broken.json"):
        io.read_json(bad)
