import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plantocc.graph import (
    SourceRule,
    attachment_recall,
    candidate_edges,
    candidate_occluders,
    direction_features,
    edge_attributes,
    knn_edges,
    pair_geometry,
    radius_edges,
    scene_graph,
    stem_edges,
)
from plantocc.scene import GenerationConfig, OrganInstance, OrganKind, generate_scene

LINE = [(0, 0, 0), (1, 0, 0), (3, 0, 0)]


def test_knn_on_a_line():
    assert knn_edges(LINE, 1) == {(1, 0), (0, 1), (1, 2)}
    with pytest.raises(ValueError):
        knn_edges(LINE, 0)
    assert knn_edges([(0, 0, 0)], 3) == set()


def test_knn_tie_prefers_lower_id():
    # node 1 sits between 0 and 2 at equal distance
    assert (0, 1) in knn_edges([(0, 0, 0), (1, 0, 0), (2, 0, 0)], 1)
    assert (2, 1) not in knn_edges([(0, 0, 0), (1, 0, 0), (2, 0, 0)], 1)


def test_radius_closed_ball():
    assert radius_edges(LINE, 1.5) == {(0, 1), (1, 0)}
    assert radius_edges(LINE, 1.0) == {(0, 1), (1, 0)}
    with pytest.raises(ValueError):
        radius_edges(LINE, 0.0)


def test_stem_edges_and_no_stem_flag():
    kinds = [OrganKind.STEM, OrganKind.LEAF, OrganKind.FRUIT]
    edges, flag = stem_edges(kinds, LINE)
    assert edges == {(0, 1), (1, 0)} and not flag
    edges, flag = stem_edges([OrganKind.LEAF, OrganKind.LEAF], LINE[:2])
    assert edges == set() and flag


def test_edge_attributes_example():
    delta, dist = edge_attributes((0, 0, 0), (1, 2, 2))
    assert np.allclose(delta, [1, 2, 2]) and dist == 3.0


def test_candidate_edges_union_and_tags():
    kinds = [OrganKind.STEM, OrganKind.LEAF, OrganKind.FRUIT]
    edges = candidate_edges(kinds, LINE, k=1, radius=1.5)
    pairs = [(e.src, e.dst) for e in edges]
    assert pairs == sorted(pairs) and len(set(pairs)) == len(pairs)
    assert set(pairs) == {(1, 0), (0, 1), (1, 2)}
    assert all(e.source_rule == SourceRule.KNN for e in edges)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3), min_size=2, max_size=15),
    st.integers(1, 5),
    st.floats(0.05, 1.0),
)
def test_candidate_edges_cover_each_rule(points, k, r):
    kinds = [OrganKind.STEM if i % 4 == 0 else OrganKind.LEAF for i in range(len(points))]
    edges = candidate_edges(kinds, points, k, r)
    pairs = {(e.src, e.dst) for e in edges}
    assert knn_edges(points, k) | radius_edges(points, r) | stem_edges(kinds, points)[0] == pairs
    for e in edges:
        assert e.src != e.dst
        assert np.isclose(e.dist, np.linalg.norm(e.delta_c))
    # each node gets min(k, n-1) kNN in-edges
    for i in range(len(points)):
        assert sum(1 for a, b in knn_edges(points, k) if b == i) == min(k, len(points) - 1)


def test_candidate_occluders_closed_radius():
    leaves = {5: np.array([0.1, 0, 0]), 6: np.array([0.19, 0, 0]), 7: np.array([0.3, 0, 0])}
    assert candidate_occluders((0, 0, 0), leaves, 0.2) == [5, 6]
    assert candidate_occluders((0, 0, 0), {1: np.array([0.2, 0, 0])}, 0.2) == [1]
    with pytest.raises(ValueError):
        candidate_occluders((0, 0, 0), leaves, -1)


def _box_instance(i, kind, lo, hi):
    return OrganInstance(i, kind, np.array([lo, hi], dtype=float))


def test_direction_features_examples():
    fruit = _box_instance(0, OrganKind.FRUIT, (-1, -1, -1), (1, 1, 1))
    leaf = _box_instance(1, OrganKind.LEAF, (0.09, -0.01, -0.01), (0.11, 0.01, 0.01))
    assert np.allclose(direction_features(fruit, leaf, (1, 0, 0)), [0.1, 0.0])
    leaf2 = _box_instance(2, OrganKind.LEAF, (-0.01, 0.04, -0.01), (0.01, 0.06, 0.01))
    assert np.allclose(direction_features(fruit, leaf2, (1, 0, 0)), [0.0, 0.05])
    with pytest.raises(ValueError):
        direction_features(fruit, leaf, (2, 0, 0))


@settings(max_examples=80, deadline=None)
@given(st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3), st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3))
def test_direction_features_pythagoras(offset, d):
    d = np.asarray(d)
    if np.linalg.norm(d) < 1e-3:
        return
    d = d / np.linalg.norm(d)
    fruit = _box_instance(0, OrganKind.FRUIT, (-1, -1, -1), (1, 1, 1))
    o = np.asarray(offset)
    leaf = _box_instance(1, OrganKind.LEAF, o - 0.01, o + 0.01)
    depth, lateral = direction_features(fruit, leaf, d)
    assert np.isclose(depth**2 + lateral**2, o @ o, atol=1e-9)


def test_pair_geometry_layout():
    fruit = _box_instance(0, OrganKind.FRUIT, (0, 0, 0), (1, 1, 1))
    leaf = _box_instance(1, OrganKind.LEAF, (3, 0, 0), (5, 2, 1))
    g = pair_geometry(fruit, leaf, 10.0)
    assert g.shape == (11,)
    assert np.allclose(g[:3], np.array([3.5, 0.5, 0.0]) / np.hypot(3.5, 0.5))
    assert np.isclose(g[3], np.hypot(3.5, 0.5))
    assert np.allclose(g[4:7], [2, 2, 1]) and np.allclose(g[7:10], [0.2, 0.2, 0.1])
    assert np.isclose(g[10], 4.0)
    flat = OrganInstance(2, OrganKind.LEAF, np.array([[0, 0, 0], [1, 1, 0.0]]))
    with pytest.raises(ValueError):
        pair_geometry(fruit, flat, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_scene_graph_recall_on_generated_scenes(seed):
    scene = generate_scene(GenerationConfig(), seed)
    found, total = attachment_recall(scene, scene_graph(scene))
    assert found == total
