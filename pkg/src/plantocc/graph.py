"""Over-complete candidate edge proposals and pair/direction geometry features."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .scene import OrganInstance, OrganKind, Scene

log = logging.getLogger(__name__)

GRAPH_SCHEMA = "plantocc.graph/1"
DEFAULT_K = 8
DEFAULT_RADIUS = 0.15


class SourceRule(str, Enum):
    KNN = "knn"
    RADIUS = "radius"
    STEM = "stem"


@dataclass(frozen=True)
class CandidateEdge:
    src: int
    dst: int
    source_rule: SourceRule
    delta_c: np.ndarray
    dist: float


def _as_array(centroids) -> np.ndarray:
    return np.asarray(centroids, dtype=np.float64).reshape(-1, 3)


def knn_edges(centroids, k: int) -> set[tuple[int, int]]:
    """Directed edges j -> i from each node's k nearest neighbours (ties: lower id)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    c = _as_array(centroids)
    n = len(c)
    edges = set()
    if n < 2:
        return edges
    dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    ids = np.arange(n)
    for i in range(n):
        others = ids[ids != i]
        order = np.lexsort((others, dist[i, others]))
        for j in others[order[:k]]:
            edges.add((int(j), i))
    return edges


def radius_edges(centroids, r: float) -> set[tuple[int, int]]:
    """Both directed edges for every pair within the closed ball of radius ``r``."""
    if r <= 0:
        raise ValueError("radius must be positive")
    c = _as_array(centroids)
    dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    i, j = np.nonzero(dist <= r)
    return {(int(a), int(b)) for a, b in zip(i, j) if a != b}


def stem_edges(kinds, centroids, n_stems: int = 2) -> tuple[set[tuple[int, int]], bool]:
    """Link every leaf and peduncle with its nearest stems by xy-plane distance.

    Returns ``(edges, no_stems)``; the flag is set (and the set empty) when no
    node is a stem.
    """
    kinds = [OrganKind(k) for k in kinds]
    c = _as_array(centroids)
    stems = [i for i, k in enumerate(kinds) if k == OrganKind.STEM]
    if not stems:
        log.warning("no stem nodes; stem edge rule produced no edges")
        return set(), True
    stems_arr = np.array(stems)
    edges = set()
    for i, kind in enumerate(kinds):
        if kind not in (OrganKind.LEAF, OrganKind.PEDUNCLE):
            continue
        dxy = np.linalg.norm(c[stems_arr, :2] - c[i, :2], axis=1)
        for s in stems_arr[np.lexsort((stems_arr, dxy))[:n_stems]]:
            edges.add((int(s), i))
            edges.add((i, int(s)))
    return edges, False


def edge_attributes(c_i, c_j) -> tuple[np.ndarray, float]:
    delta = np.asarray(c_j, dtype=np.float64) - np.asarray(c_i, dtype=np.float64)
    return delta, float(np.linalg.norm(delta))


def candidate_edges(kinds, centroids, k: int = DEFAULT_K, radius: float = DEFAULT_RADIUS) -> list[CandidateEdge]:
    """Union of kNN, radius and stem proposals, sorted by (src, dst).

    An edge proposed by several rules is tagged with the first of knn, radius, stem.
    """
    c = _as_array(centroids)
    tagged: dict[tuple[int, int], SourceRule] = {}
    stem, _ = stem_edges(kinds, c)
    for rule, edges in (
        (SourceRule.KNN, knn_edges(c, k)),
        (SourceRule.RADIUS, radius_edges(c, radius)),
        (SourceRule.STEM, stem),
    ):
        for e in edges:
            tagged.setdefault(e, rule)
    out = []
    for src, dst in sorted(tagged):
        delta, dist = edge_attributes(c[src], c[dst])
        out.append(CandidateEdge(src, dst, tagged[(src, dst)], delta, dist))
    return out


def candidate_occluders(fruit_centroid, leaf_centroids: dict[int, np.ndarray], radius: float = 0.2) -> list[int]:
    """Leaves within the closed radius of the fruit, nearest first (id on ties)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    f = np.asarray(fruit_centroid, dtype=np.float64)
    scored = [(float(np.linalg.norm(np.asarray(c) - f)), int(j)) for j, c in leaf_centroids.items()]
    return [j for d, j in sorted(scored) if d <= radius]


def scene_scale(scene: Scene) -> float:
    """Diagonal length of the scene's axis-aligned bounding box."""
    pts = np.vstack([inst.surface_points for inst in scene.instances])
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def pair_geometry(fruit: OrganInstance, leaf: OrganInstance, scale: float) -> np.ndarray:
    """11-vector: unit displacement (3), distance (1), leaf/fruit extent ratios (3),
    leaf extents over scene scale (3), leaf/fruit box volume ratio (1)."""
    if np.any(fruit.extents <= 0) or np.any(leaf.extents <= 0):
        raise ValueError("pair geometry needs strictly positive extents")
    if scale <= 0:
        raise ValueError("scene scale must be positive")
    delta, dist = edge_attributes(fruit.centroid, leaf.centroid)
    unit = delta / dist if dist > 0 else np.zeros(3)
    ratio = leaf.extents / fruit.extents
    volume = np.prod(leaf.extents) / np.prod(fruit.extents)
    return np.concatenate([unit, [dist], ratio, leaf.extents / scale, [volume]])


def direction_features(fruit: OrganInstance, leaf: OrganInstance, direction) -> np.ndarray:
    """(signed depth of leaf along direction, lateral offset) relative to the fruit centroid."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    delta = leaf.centroid - fruit.centroid
    depth = float(delta @ d)
    lateral = float(np.linalg.norm(delta - depth * d))
    return np.array([depth, lateral])


def scene_graph(scene: Scene, k: int = DEFAULT_K, radius: float = DEFAULT_RADIUS, kinds=None) -> list[CandidateEdge]:
    """Candidate edges over a scene; ``kinds`` overrides ground-truth organ kinds (e.g. predicted)."""
    if kinds is None:
        kinds = [inst.kind for inst in scene.instances]
    return candidate_edges(kinds, [inst.centroid for inst in scene.instances], k, radius)


def attachment_recall(scene: Scene, edges: list[CandidateEdge]) -> tuple[int, int]:
    """(found, total) ground-truth parent->child attachments present in ``edges``."""
    present = {(e.src, e.dst) for e in edges}
    found = sum((a.parent_id, a.child_id) in present for a in scene.attachments)
    return found, len(scene.attachments)
