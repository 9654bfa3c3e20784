"""Direction-conditioned occlusion labels from a layered voxel z-buffer.

Every fruit gets a local frame (z up, x toward its stem in the xy-plane) and
18 approach directions. For each direction the leaf voxels are rasterized into
a pixel grid perpendicular to the direction; each fruit voxel then looks up
the leaf fragments in its pixel that sit between it and the viewer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from .geometry import voxel_centers, voxelize
from .scene import OrganKind, Scene

LABEL_SCHEMA = "plantocc.labels/1"
UP = np.array([0.0, 0.0, 1.0])
_DEGENERATE_XY = 1e-6


@dataclass(frozen=True)
class LabelConfig:
    Z: int = 3
    voxel_resolution: float = 0.004
    epsilon: float = 1e-8
    gamma: float = 1.0
    eps_pot: float = 0.02
    tau_union: float = 0.5
    candidate_radius: float = 0.2

    def __post_init__(self):
        if self.Z < 1:
            raise ValueError("Z must be >= 1")
        if self.voxel_resolution <= 0:
            raise ValueError("voxel_resolution must be positive")
        if self.epsilon <= 0 or self.gamma <= 0:
            raise ValueError("epsilon and gamma must be positive")
        if not 0.0 <= self.eps_pot < 1.0:
            raise ValueError("eps_pot must lie in [0, 1)")
        if not 0.0 < self.tau_union < 1.0:
            raise ValueError("tau_union must lie in (0, 1)")
        if self.candidate_radius <= 0:
            raise ValueError("candidate_radius must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LabelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown label config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# frames and directions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FruitFrame:
    origin: np.ndarray
    x_hat: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray
    degenerate: bool = False

    @property
    def axes(self) -> np.ndarray:
        """Rows are x_hat, y_hat, z_hat."""
        return np.vstack([self.x_hat, self.y_hat, self.z_hat])


def fruit_local_frame(fruit_centroid, stem_reference, up=UP) -> FruitFrame:
    up = np.asarray(up, dtype=np.float64)
    if not np.allclose(up, UP):
        raise ValueError("fruit-local frames are defined with global +z as up")
    origin = np.asarray(fruit_centroid, dtype=np.float64)
    toward = np.asarray(stem_reference, dtype=np.float64) - origin
    toward[2] = 0.0
    norm = float(np.linalg.norm(toward))
    degenerate = norm < _DEGENERATE_XY
    x_hat = np.array([1.0, 0.0, 0.0]) if degenerate else toward / norm
    y_hat = np.cross(UP, x_hat)
    return FruitFrame(origin, x_hat, y_hat, UP.copy(), degenerate)


# order of the 18 directions, as coefficients on (x_hat, y_hat, z_hat)
DIRECTION_LABELS: tuple[str, ...] = (
    "+x", "-x", "+y", "-y", "+z", "-z",
    "+x+y", "+x-y", "-x+y", "-x-y",
    "+x+z", "+x-z", "-x+z", "-x-z",
    "+y+z", "+y-z", "-y+z", "-y-z",
)  # fmt: skip


def _label_coefficients(label: str) -> np.ndarray:
    coeff = np.zeros(3)
    for sign, axis in zip(label[::2], label[1::2]):
        coeff["xyz".index(axis)] = 1.0 if sign == "+" else -1.0
    return coeff / np.linalg.norm(coeff)


LOCAL_DIRECTIONS = np.array([_label_coefficients(lab) for lab in DIRECTION_LABELS])


@dataclass(frozen=True)
class DirectionSet:
    directions: np.ndarray  # (18, 3) world-frame unit vectors
    labels: tuple[str, ...] = DIRECTION_LABELS

    def __len__(self) -> int:
        return len(self.labels)


def canonical_directions(frame: FruitFrame) -> DirectionSet:
    """6 axis-aligned plus 12 bi-diagonal unit directions, in ``DIRECTION_LABELS`` order."""
    return DirectionSet(LOCAL_DIRECTIONS @ frame.axes)


def pixel_basis(direction, frame: FruitFrame) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (u, v) spanning the plane normal to ``direction``.

    u comes from the frame axis least parallel to the direction (first axis on
    ties), Gram-Schmidt against the direction; v = direction x u.
    """
    d = np.asarray(direction, dtype=np.float64)
    axes = frame.axes
    dots = np.abs(axes @ d)
    a = axes[int(np.argmin(dots))]
    u = a - (a @ d) * d
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


# ---------------------------------------------------------------------------
# z-buffer
# ---------------------------------------------------------------------------


@dataclass
class ZBuffer:
    """Per fruit voxel, all occluding instances ordered by depth gap (id on ties).

    Stored CSR-style: occluders of fruit voxel ``v`` are
    ``occluders[indptr[v]:indptr[v + 1]]``.
    """

    fruit_id: int
    Z: int
    indptr: np.ndarray
    occluders: np.ndarray
    gaps: np.ndarray

    @property
    def n_voxels(self) -> int:
        return len(self.indptr) - 1

    def ordered(self, v: int) -> list[int]:
        return self.occluders[self.indptr[v] : self.indptr[v + 1]].tolist()

    def layers(self, v: int) -> list[int]:
        return self.ordered(v)[: self.Z]

    def as_lists(self, truncate: bool = True) -> list[list[int]]:
        return [self.layers(v) if truncate else self.ordered(v) for v in range(self.n_voxels)]


def _pixel_keys(pi: np.ndarray, pj: np.ndarray) -> np.ndarray:
    return ((pi + (1 << 31)) << 32) | (pj + (1 << 31))


def _zonotope_cover(delta: np.ndarray, generators: np.ndarray) -> np.ndarray:
    """True where 2D offsets lie in the zonotope sum of ±generators (closed)."""
    inside = np.ones(len(delta), dtype=bool)
    for g in generators:
        if np.hypot(g[0], g[1]) < 1e-15:
            continue
        normal = np.array([-g[1], g[0]])
        reach = np.abs(generators @ normal).sum()
        inside &= np.abs(delta @ normal) <= reach * (1.0 + 1e-12)
    return inside


def zbuffer_occlusion(
    voxels: dict[int, np.ndarray],
    occluder_ids,
    fruit_id: int,
    direction,
    frame: FruitFrame,
    config: LabelConfig,
) -> ZBuffer:
    """Layered z-buffer for one fruit and one approach direction.

    ``voxels`` maps instance id -> integer voxel indices (shared resolution and
    origin). Only ``occluder_ids`` are rasterized. The viewer sits far along
    ``+direction``; an occluder fragment counts for a fruit voxel when it falls
    in the same pixel and its voxel-center depth along ``direction`` is strictly
    larger. Pixel size equals the voxel size, the grid is anchored at the world
    origin, and a leaf voxel covers every pixel whose center lies inside the
    cube's projected outline.
    """
    res = config.voxel_resolution
    fruit_vox = np.asarray(voxels[fruit_id])
    if len(fruit_vox) == 0:
        raise ValueError(f"fruit {fruit_id} has no voxels")
    d = np.asarray(direction, dtype=np.float64)
    u, v = pixel_basis(d, frame)

    fc = voxel_centers(fruit_vox, res)
    f_depth = fc @ d
    f_pi = np.floor(fc @ u / res).astype(np.int64)
    f_pj = np.floor(fc @ v / res).astype(np.int64)
    n = len(fc)

    occ_ids = [i for i in occluder_ids if i != fruit_id and len(voxels[i])]
    if occ_ids:
        idx = np.vstack([np.asarray(voxels[i]) for i in occ_ids])
        centers = voxel_centers(idx, res)
        owner = np.concatenate([np.full(len(voxels[i]), i, dtype=np.int64) for i in occ_ids])
        depth = centers @ d
        qu, qv = centers @ u, centers @ v
        keep = (
            (depth > f_depth.min() - res)
            & (qu >= (f_pi.min() - 1) * res)
            & (qu < (f_pi.max() + 2) * res)
            & (qv >= (f_pj.min() - 1) * res)
            & (qv < (f_pj.max() + 2) * res)
        )
        idx, qu, qv, owner = idx[keep], qu[keep], qv[keep], owner[keep]
    else:
        idx = np.zeros((0, 3), dtype=np.int64)
        qu = qv = np.zeros(0)
        owner = np.zeros(0, dtype=np.int64)

    if len(owner):
        # projected half-edges of the voxel cube
        generators = 0.5 * res * np.column_stack([u, v])
        base_i = np.floor(qu / res).astype(np.int64)
        base_j = np.floor(qv / res).astype(np.int64)
        offsets = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)], dtype=np.int64)
        cand_i = (base_i[:, None] + offsets[None, :, 0]).ravel()
        cand_j = (base_j[:, None] + offsets[None, :, 1]).ravel()
        src = np.repeat(np.arange(len(owner)), len(offsets))
        delta = np.column_stack([(cand_i + 0.5) * res - qu[src], (cand_j + 0.5) * res - qv[src]])
        hit = _zonotope_cover(delta, generators)
        frag_key = _pixel_keys(cand_i[hit], cand_j[hit])
        frag_src = src[hit]
        order = np.argsort(frag_key, kind="stable")
        frag_key, frag_src = frag_key[order], frag_src[order]

        f_key = _pixel_keys(f_pi, f_pj)
        lo = np.searchsorted(frag_key, f_key, side="left")
        hi = np.searchsorted(frag_key, f_key, side="right")
        counts = hi - lo
        pair_vox = np.repeat(np.arange(n), counts)
        starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
        pair_frag = np.arange(len(pair_vox)) + starts
        # depth gap from integer index differences, so equal depths compare exactly
        delta_idx = (idx[frag_src[pair_frag]] - fruit_vox[pair_vox]).astype(np.float64)
        gap = (delta_idx[:, 0] * d[0] + delta_idx[:, 1] * d[1] + delta_idx[:, 2] * d[2]) * res
        front = gap > 0
        pair_vox, pair_owner, gap = pair_vox[front], owner[frag_src[pair_frag[front]]], gap[front]
        # nearest fragment per (voxel, instance)
        order = np.lexsort((gap, pair_owner, pair_vox))
        pair_vox, pair_owner, gap = pair_vox[order], pair_owner[order], gap[order]
        first = np.ones(len(pair_vox), dtype=bool)
        first[1:] = (pair_vox[1:] != pair_vox[:-1]) | (pair_owner[1:] != pair_owner[:-1])
        pair_vox, pair_owner, gap = pair_vox[first], pair_owner[first], gap[first]
        order = np.lexsort((pair_owner, gap, pair_vox))
        pair_vox, pair_owner, gap = pair_vox[order], pair_owner[order], gap[order]
    else:
        pair_vox = np.zeros(0, dtype=np.int64)
        pair_owner = np.zeros(0, dtype=np.int64)
        gap = np.zeros(0)

    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(pair_vox, minlength=n), out=indptr[1:])
    return ZBuffer(fruit_id, config.Z, indptr, pair_owner, gap)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


@dataclass
class LeafTargets:
    pot: float
    excl: float
    mass: float
    rank_t: float


@dataclass
class DirectionLabels:
    union: float
    fruit_voxels: int
    leaves: dict[int, LeafTargets] = field(default_factory=dict)


def compute_targets(zbuf: ZBuffer, leaf_ids, config: LabelConfig) -> DirectionLabels:
    """Union, potential, exclusive, graded mass and rank target for one (fruit, direction)."""
    n = zbuf.n_voxels
    counts = np.diff(zbuf.indptr)
    vox = np.repeat(np.arange(n), counts)
    rank = np.arange(len(vox)) - np.repeat(zbuf.indptr[:-1], counts)

    leaf_ids = sorted(set(int(j) for j in leaf_ids) | set(zbuf.occluders.tolist()))
    any_hits = {j: 0 for j in leaf_ids}
    layer_hits = dict(any_hits)
    sole_hits = dict(any_hits)
    for j, c in zip(*np.unique(zbuf.occluders, return_counts=True)):
        any_hits[int(j)] = int(c)
    in_layers = zbuf.occluders[rank < zbuf.Z]
    for j, c in zip(*np.unique(in_layers, return_counts=True)):
        layer_hits[int(j)] = int(c)
    sole = zbuf.occluders[zbuf.indptr[:-1][counts == 1]]
    for j, c in zip(*np.unique(sole, return_counts=True)):
        sole_hits[int(j)] = int(c)

    pot = {j: any_hits[j] / n for j in leaf_ids}
    mass = {
        j: (layer_hits[j] / n) ** config.gamma if pot[j] >= config.eps_pot and layer_hits[j] else 0.0
        for j in leaf_ids
    }
    total = sum(mass.values())
    leaves = {
        j: LeafTargets(pot[j], sole_hits[j] / n, mass[j], mass[j] / (total + config.epsilon)) for j in leaf_ids
    }
    return DirectionLabels(float(np.count_nonzero(counts)) / n, n, leaves)


def mass_at_K(direction_labels: dict[str, DirectionLabels], predicted_top: dict[str, list[int]], config: LabelConfig) -> float:
    """Mean over directions of the graded mass captured by the predicted top-Z leaves."""
    if not direction_labels:
        return 0.0
    total = 0.0
    for key, dl in direction_labels.items():
        top = predicted_top.get(key, [])[: config.Z]
        captured = sum(dl.leaves[j].mass for j in top if j in dl.leaves)
        total += captured / (sum(t.mass for t in dl.leaves.values()) + config.epsilon)
    return total / len(direction_labels)


# ---------------------------------------------------------------------------
# scene-level labeling
# ---------------------------------------------------------------------------


@dataclass
class OcclusionLabels:
    fruits: dict[int, dict[str, DirectionLabels]]
    frames: dict[int, FruitFrame]
    config: LabelConfig
    scene_seed: int | None = None
    config_digest: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema": LABEL_SCHEMA,
            "provenance": {
                "label_config": self.config.to_dict(),
                "scene_seed": self.scene_seed,
                "scene_config_digest": self.config_digest,
                "directions": list(DIRECTION_LABELS),
                "frames": {
                    str(fid): {
                        "origin": fr.origin,
                        "x_hat": fr.x_hat,
                        "y_hat": fr.y_hat,
                        "degenerate": fr.degenerate,
                    }
                    for fid, fr in self.frames.items()
                },
            },
            "fruits": {
                str(fid): {
                    key: {
                        "union": dl.union,
                        "fruit_voxels": dl.fruit_voxels,
                        "leaves": {str(j): asdict(t) for j, t in dl.leaves.items()},
                    }
                    for key, dl in dirs.items()
                }
                for fid, dirs in self.fruits.items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OcclusionLabels":
        try:
            prov = data["provenance"]
            frames = {}
            for fid, fr in prov.get("frames", {}).items():
                x = np.asarray(fr["x_hat"], dtype=np.float64)
                y = np.asarray(fr["y_hat"], dtype=np.float64)
                frames[int(fid)] = FruitFrame(np.asarray(fr["origin"]), x, y, UP.copy(), bool(fr["degenerate"]))
            fruits = {
                int(fid): {
                    key: DirectionLabels(
                        float(dl["union"]),
                        int(dl.get("fruit_voxels", 0)),
                        {int(j): LeafTargets(**t) for j, t in dl["leaves"].items()},
                    )
                    for key, dl in dirs.items()
                }
                for fid, dirs in data["fruits"].items()
            }
            return cls(
                fruits,
                frames,
                LabelConfig.from_dict(prov["label_config"]),
                prov.get("scene_seed"),
                prov.get("scene_config_digest"),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed label document: {exc!r}") from exc

    def keys(self) -> list[tuple[int, str]]:
        return [(fid, key) for fid, dirs in self.fruits.items() for key in dirs]


def stem_reference(scene: Scene, fruit_id: int) -> np.ndarray | None:
    stem = scene.stem_of(fruit_id)
    if stem is None:
        stems = scene.ids_of(OrganKind.STEM)
        if not stems:
            return None
        c = scene.instances[fruit_id].centroid
        stem = min(stems, key=lambda s: (np.linalg.norm((scene.instances[s].centroid - c)[:2]), s))
    return scene.instances[stem].centroid


def candidate_leaves(scene: Scene, fruit_id: int, radius: float) -> list[int]:
    from .graph import candidate_occluders

    leaves = {j: scene.instances[j].centroid for j in scene.ids_of(OrganKind.LEAF)}
    return candidate_occluders(scene.instances[fruit_id].centroid, leaves, radius)


def label_fruit(scene: Scene, voxels: dict[int, np.ndarray], fruit_id: int, config: LabelConfig):
    ref = stem_reference(scene, fruit_id)
    centroid = scene.instances[fruit_id].centroid
    frame = fruit_local_frame(centroid, centroid if ref is None else ref)
    dirs = canonical_directions(frame)
    leaf_ids = scene.ids_of(OrganKind.LEAF)
    listed = candidate_leaves(scene, fruit_id, config.candidate_radius)
    zbufs = {
        key: zbuffer_occlusion(voxels, leaf_ids, fruit_id, d, frame, config)
        for key, d in zip(dirs.labels, dirs.directions)
    }
    # one leaf list per fruit: radius candidates plus any leaf that occludes somewhere
    listed = sorted(set(listed).union(*(z.occluders.tolist() for z in zbufs.values())))
    return frame, {key: compute_targets(z, listed, config) for key, z in zbufs.items()}


def label_scene(scene: Scene, config: LabelConfig = LabelConfig()) -> OcclusionLabels:
    """Labels for every fruit and all 18 directions; scenes without fruit give an empty set."""
    voxels = {inst.id: voxelize(inst.surface_points, config.voxel_resolution) for inst in scene.instances}
    fruits, frames = {}, {}
    for fid in scene.ids_of(OrganKind.FRUIT):
        frames[fid], fruits[fid] = label_fruit(scene, voxels, fid, config)
    return OcclusionLabels(fruits, frames, config, scene.seed, scene.config_digest)


def load_labels(path) -> OcclusionLabels:
    return OcclusionLabels.from_dict(io.read_json(path))


def direction_vector(frame: FruitFrame, label: str) -> np.ndarray:
    return LOCAL_DIRECTIONS[DIRECTION_LABELS.index(label)] @ frame.axes


__all__ = [
    "DIRECTION_LABELS",
    "DirectionLabels",
    "DirectionSet",
    "FruitFrame",
    "LabelConfig",
    "LeafTargets",
    "OcclusionLabels",
    "ZBuffer",
    "canonical_directions",
    "compute_targets",
    "fruit_local_frame",
    "label_scene",
    "mass_at_K",
    "pixel_basis",
    "zbuffer_occlusion",
]
