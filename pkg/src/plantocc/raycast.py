"""Ray-cast occlusion labels, independent of the z-buffer rasterizer.

Each fruit voxel shoots a ray toward the viewer (parallel rays for an
orthographic camera, rays converging on the camera center for a perspective
one) and intersects it with every nearby leaf voxel treated as a closed cube.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .geometry import voxel_centers, voxelize
from .labels import (
    DIRECTION_LABELS,
    DirectionLabels,
    LabelConfig,
    OcclusionLabels,
    ZBuffer,
    canonical_directions,
    compute_targets,
    fruit_local_frame,
    pixel_basis,
    stem_reference,
)
from .scene import OrganKind, Scene, organ_rng

RAY_CHUNK = 256


class Projection(str, Enum):
    ORTHOGRAPHIC = "ortho"
    PERSPECTIVE = "persp"


@dataclass(frozen=True)
class CameraSpec:
    projection: Projection = Projection.ORTHOGRAPHIC
    standoff: float = 3.0
    fov: float = math.radians(40.0)
    jitter_deg: float = 0.0
    rays_per_fruit_voxel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "projection", Projection(self.projection))
        if self.standoff <= 0:
            raise ValueError("standoff must be positive")
        if not 0.0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.jitter_deg < 0:
            raise ValueError("jitter_deg must be nonnegative")
        if self.rays_per_fruit_voxel < 1:
            raise ValueError("rays_per_fruit_voxel must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projection"] = self.projection.value
        return d


def jitter_direction(direction, jitter_deg: float, rng: np.random.Generator, frame) -> np.ndarray:
    """Rotate ``direction`` by ``jitter_deg`` about a random axis perpendicular to it."""
    d = np.asarray(direction, dtype=np.float64)
    if jitter_deg == 0:
        return d.copy()
    u, v = pixel_basis(d, frame)
    phi = rng.uniform(0.0, 2 * math.pi)
    axis = math.cos(phi) * u + math.sin(phi) * v
    angle = math.radians(jitter_deg)
    # Rodrigues with axis ⟂ d
    out = d * math.cos(angle) + np.cross(axis, d) * math.sin(angle)
    return out / np.linalg.norm(out)


def _scene_sphere(scene: Scene) -> tuple[np.ndarray, float]:
    pts = np.vstack([inst.surface_points for inst in scene.instances])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return (lo + hi) / 2, float(np.linalg.norm(hi - lo) / 2)


def ray_box_hits(origins, dirs, t_max, box_min, box_max):
    """Slab test for every (ray, box) pair; returns (hit mask, entry parameter).

    ``origins``/``dirs`` are (r, 3), boxes (b, 3); outputs are (r, b). A hit
    needs the closed box to meet the ray somewhere in (0, t_max).
    """
    o = origins[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs[:, None, :]
        t0 = (box_min[None, :, :] - o) * inv
        t1 = (box_max[None, :, :] - o) * inv
    flat = dirs[:, None, :] == 0.0
    inside = (o >= box_min[None]) & (o <= box_max[None])
    lo = np.where(flat, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    hi = np.where(flat, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    t_in = lo.max(axis=2)
    t_out = hi.min(axis=2)
    hit = (t_in <= t_out) & (t_out > 0.0) & (t_in < t_max[:, None])
    return hit, np.maximum(t_in, 0.0)


def cast_direction(
    fruit_vox: np.ndarray,
    leaf_vox: np.ndarray,
    leaf_owner: np.ndarray,
    direction: np.ndarray,
    camera: CameraSpec,
    config: LabelConfig,
    fruit_id: int,
    rng: np.random.Generator,
) -> ZBuffer:
    res = config.voxel_resolution
    d = direction
    centers = voxel_centers(fruit_vox, res)
    n_vox = len(centers)
    reps = camera.rays_per_fruit_voxel
    if reps == 1:
        origins = centers
    else:
        offsets = rng.uniform(-0.5, 0.5, size=(n_vox, reps, 3)) * res
        offsets[:, 0] = 0.0
        origins = (centers[:, None, :] + offsets).reshape(-1, 3)
    ray_vox = np.repeat(np.arange(n_vox), reps)
    fruit_c = centers.mean(axis=0)

    if camera.projection == Projection.ORTHOGRAPHIC:
        dirs = np.broadcast_to(d, origins.shape).copy()
        t_max = np.full(len(origins), np.inf)
    else:
        eye = fruit_c + camera.standoff * d
        to_eye = eye - origins
        t_max = np.linalg.norm(to_eye, axis=1)
        dirs = to_eye / t_max[:, None]

    lc = voxel_centers(leaf_vox, res)
    half = 0.5 * res
    reach = math.sqrt(3.0) * half
    fruit_r = float(np.linalg.norm(centers - fruit_c, axis=1).max()) + res
    rel = lc - fruit_c
    ahead = rel @ d
    lateral = np.linalg.norm(rel - ahead[:, None] * d, axis=1)
    keep = (ahead > -fruit_r - reach) & (lateral <= fruit_r + reach)
    lc, owner = lc[keep], leaf_owner[keep]

    pair_vox, pair_owner, pair_t = [], [], []
    for start in range(0, len(origins), RAY_CHUNK):
        sl = slice(start, start + RAY_CHUNK)
        o, dr, tm = origins[sl], dirs[sl], t_max[sl]
        if len(lc) == 0:
            break
        w = lc[None, :, :] - o[:, None, :]
        along = np.einsum("rbk,rk->rb", w, dr)
        perp2 = np.einsum("rbk,rbk->rb", w, w) - along**2
        near = (perp2 <= reach**2 * (1 + 1e-9)) & (along > -reach)
        r_idx, b_idx = np.nonzero(near)
        if len(r_idx) == 0:
            continue
        hit, t_in = _pairwise_slab(o[r_idx], dr[r_idx], tm[r_idx], lc[b_idx] - half, lc[b_idx] + half)
        pair_vox.append(ray_vox[sl][r_idx[hit]])
        pair_owner.append(owner[b_idx[hit]])
        pair_t.append(t_in[hit])

    if pair_vox:
        pv, po, pt = np.concatenate(pair_vox), np.concatenate(pair_owner), np.concatenate(pair_t)
    else:
        pv = po = np.zeros(0, dtype=np.int64)
        pt = np.zeros(0)
    order = np.lexsort((pt, po, pv))
    pv, po, pt = pv[order], po[order], pt[order]
    first = np.ones(len(pv), dtype=bool)
    first[1:] = (pv[1:] != pv[:-1]) | (po[1:] != po[:-1])
    pv, po, pt = pv[first], po[first], pt[first]
    order = np.lexsort((po, pt, pv))
    pv, po, pt = pv[order], po[order], pt[order]
    indptr = np.zeros(n_vox + 1, dtype=np.int64)
    np.cumsum(np.bincount(pv, minlength=n_vox), out=indptr[1:])
    return ZBuffer(fruit_id, config.Z, indptr, po, pt)


def _pairwise_slab(o, dr, t_max, bmin, bmax):
    """Row-aligned slab test: ray i against box i."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dr
        t0 = (bmin - o) * inv
        t1 = (bmax - o) * inv
    flat = dr == 0.0
    inside = (o >= bmin) & (o <= bmax)
    lo = np.where(flat, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    hi = np.where(flat, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    t_in, t_out = lo.max(axis=1), hi.min(axis=1)
    hit = (t_in <= t_out) & (t_out > 0.0) & (t_in < t_max)
    return hit, np.maximum(t_in, 0.0)


def cast_labels(
    scene: Scene,
    fruit_id: int,
    camera: CameraSpec,
    config: LabelConfig = LabelConfig(),
    seed: int = 0,
    leaf_ids=None,
) -> dict[str, DirectionLabels]:
    """Ray-cast targets for one fruit over its 18 canonical directions.

    ``leaf_ids`` fixes the listed leaves (defaults to every leaf that gets hit).
    Raises ``ValueError`` if any camera center falls inside the scene's
    bounding sphere.
    """
    res = config.voxel_resolution
    fruit = scene.instances[fruit_id]
    if fruit.kind != OrganKind.FRUIT:
        raise ValueError(f"instance {fruit_id} is not a fruit")
    ref = stem_reference(scene, fruit_id)
    frame = fruit_local_frame(fruit.centroid, fruit.centroid if ref is None else ref)
    dirs = canonical_directions(frame)
    sphere_c, sphere_r = _scene_sphere(scene)

    fruit_vox = voxelize(fruit.surface_points, res)
    if len(fruit_vox) == 0:
        raise ValueError(f"fruit {fruit_id} has no voxels")
    leaves = scene.ids_of(OrganKind.LEAF)
    per_leaf = [voxelize(scene.instances[j].surface_points, res) for j in leaves]
    leaf_vox = np.vstack(per_leaf) if leaves else np.zeros((0, 3), dtype=np.int64)
    leaf_owner = np.concatenate([np.full(len(v), j) for j, v in zip(leaves, per_leaf)]) if leaves else np.zeros(0, dtype=np.int64)

    zbufs = {}
    for k, (key, d) in enumerate(zip(dirs.labels, dirs.directions)):
        rng = organ_rng(seed, fruit_id, k)
        dj = jitter_direction(d, camera.jitter_deg, rng, frame)
        eye = fruit.centroid + camera.standoff * dj
        if np.linalg.norm(eye - sphere_c) <= sphere_r:
            raise ValueError(
                f"camera standoff {camera.standoff} m places the viewer inside the scene bounding sphere"
            )
        zbufs[key] = cast_direction(fruit_vox, leaf_vox, leaf_owner, dj, camera, config, fruit_id, rng)
    if leaf_ids is None:
        leaf_ids = sorted(set().union(*(z.occluders.tolist() for z in zbufs.values())))
    return {key: compute_targets(z, leaf_ids, config) for key, z in zbufs.items()}


def cast_scene(scene: Scene, camera: CameraSpec, config: LabelConfig = LabelConfig(), seed: int = 0,
               reference: OcclusionLabels | None = None) -> OcclusionLabels:
    """Ray-cast labels for every fruit; leaf lists follow ``reference`` when given."""
    fruits, frames = {}, {}
    for fid in scene.ids_of(OrganKind.FRUIT):
        listed = None
        if reference is not None and fid in reference.fruits:
            listed = next(iter(reference.fruits[fid].values())).leaves.keys()
        fruits[fid] = cast_labels(scene, fid, camera, config, seed, listed)
        ref = stem_reference(scene, fid)
        c = scene.instances[fid].centroid
        frames[fid] = fruit_local_frame(c, c if ref is None else ref)
    return OcclusionLabels(fruits, frames, config, scene.seed, scene.config_digest)


# ---------------------------------------------------------------------------
# agreement
# ---------------------------------------------------------------------------


@dataclass
class AgreementReport:
    union_mae: float
    top3_jaccard: float
    n_pairs: int
    per_direction: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def top_mass_set(dl: DirectionLabels, n: int = 3) -> set[int]:
    ranked = sorted((-t.mass, j) for j, t in dl.leaves.items() if t.mass > 0)
    return {j for _, j in ranked[:n]}


def _jaccard(a: set[int], b: set[int]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def compare_labels(a: OcclusionLabels, b: OcclusionLabels) -> AgreementReport:
    """Union MAE and mean top-3 graded-mass Jaccard between two label sets.

    Two empty top-3 sets count as full agreement.
    """
    ka, kb = set(a.keys()), set(b.keys())
    if ka != kb:
        missing = sorted(ka ^ kb)
        raise ValueError(f"label key sets differ; unmatched (fruit, direction) keys: {missing}")
    errs: dict[str, list[float]] = {key: [] for key in DIRECTION_LABELS}
    jacs: dict[str, list[float]] = {key: [] for key in DIRECTION_LABELS}
    for fid, key in sorted(ka, key=lambda x: (x[0], DIRECTION_LABELS.index(x[1]) if x[1] in DIRECTION_LABELS else 99, x[1])):
        da, db = a.fruits[fid][key], b.fruits[fid][key]
        errs.setdefault(key, []).append(abs(da.union - db.union))
        jacs.setdefault(key, []).append(_jaccard(top_mass_set(da), top_mass_set(db)))
    all_err = [e for v in errs.values() for e in v]
    all_jac = [j for v in jacs.values() for j in v]
    per_direction = {
        key: {"union_mae": float(np.mean(errs[key])), "top3_jaccard": float(np.mean(jacs[key]))}
        for key in errs
        if errs[key]
    }
    return AgreementReport(
        float(np.mean(all_err)) if all_err else 0.0,
        float(np.mean(all_jac)) if all_jac else 1.0,
        len(all_err),
        per_direction,
    )
