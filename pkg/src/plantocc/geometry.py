"""Voxel and box primitives shared by the generator, labeler and ray caster."""

from __future__ import annotations

import numpy as np


def voxelize(points, resolution: float) -> np.ndarray:
    """Map points to integer voxel indices.

    Each coordinate goes to ``floor(c / resolution)``; duplicates are collapsed
    and the result is sorted lexicographically. Returns an ``(n, 3)`` int64
    array (``n`` may be zero).
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    idx = np.floor(pts / resolution).astype(np.int64)
    if idx.min() < -_OFFSET or idx.max() >= _OFFSET:
        return np.unique(idx, axis=0)
    # packed keys sort in the same lexicographic order as the rows
    return unpack_voxels(np.unique(pack_voxels(idx)))


def voxel_centers(voxels, resolution: float) -> np.ndarray:
    return (np.asarray(voxels, dtype=np.float64) + 0.5) * resolution


def aabb_of(points) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot bound an empty point set")
    return pts.min(axis=0), pts.max(axis=0)


def collision_broad(a, b) -> bool:
    """Closed-interval AABB overlap test. ``a`` and ``b`` are ``(min, max)`` pairs."""
    amin, amax = (np.asarray(v, dtype=np.float64) for v in a)
    bmin, bmax = (np.asarray(v, dtype=np.float64) for v in b)
    if np.any(amin > amax) or np.any(bmin > bmax):
        raise ValueError("malformed box: min exceeds max")
    return bool(np.all(amin <= bmax) and np.all(bmin <= amax))


def overlap_fraction(a, b) -> float:
    """|a ∩ b| / min(|a|, |b|) for two voxel index sets."""
    ka, kb = np.unique(pack_voxels(a)), np.unique(pack_voxels(b))
    if not len(ka) or not len(kb):
        raise ValueError("overlap fraction undefined for an empty voxel set")
    return len(np.intersect1d(ka, kb, assume_unique=True)) / min(len(ka), len(kb))


def collision_narrow(a, b, threshold: float) -> bool:
    """Voxel-overlap collision; strict ``>`` so overlap exactly at threshold passes."""
    return overlap_fraction(a, b) > threshold


_OFFSET = 1 << 20
_MASK = (1 << 21) - 1


def pack_voxels(voxels) -> np.ndarray:
    """Encode voxel rows as single int64 keys (21 bits per axis, offset)."""
    v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3) + _OFFSET
    if len(v) and (v.min() < 0 or v.max() > _MASK):
        raise ValueError("voxel index out of packable range")
    return (v[:, 0] << 42) | (v[:, 1] << 21) | v[:, 2]


def unpack_voxels(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    return np.column_stack([(k >> 42) & _MASK, (k >> 21) & _MASK, k & _MASK]) - _OFFSET
