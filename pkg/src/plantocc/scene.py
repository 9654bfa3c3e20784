"""Procedural multi-stem pepper scenes with exact attachment topology.

Organs are parametric primitives (tapered cylinder stems, bent elliptical leaf
sheets, curved tube peduncles, superellipsoid fruits). Every organ is placed
at a socket on its parent, then accepted only if it passes a closed-interval
AABB broad phase followed by a voxel-overlap narrow phase against every organ
already in the scene.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import io
from .geometry import aabb_of, collision_broad, collision_narrow, voxel_centers, voxelize

SCENE_SCHEMA = "plantocc.scene/1"
MAX_PLACEMENT_ATTEMPTS = 50
SURFACE_STEP_FRACTION = 1.0 / 3.0  # grid step as a fraction of voxel size


class OrganKind(str, Enum):
    STEM = "stem"
    LEAF = "leaf"
    PEDUNCLE = "peduncle"
    FRUIT = "fruit"


class Relation(str, Enum):
    STEM_LEAF = "stem_leaf"
    STEM_PEDUNCLE = "stem_peduncle"
    PEDUNCLE_FRUIT = "peduncle_fruit"


RELATION_KINDS = {
    Relation.STEM_LEAF: (OrganKind.STEM, OrganKind.LEAF),
    Relation.STEM_PEDUNCLE: (OrganKind.STEM, OrganKind.PEDUNCLE),
    Relation.PEDUNCLE_FRUIT: (OrganKind.PEDUNCLE, OrganKind.FRUIT),
}
KIND_ORDER = (OrganKind.STEM, OrganKind.LEAF, OrganKind.PEDUNCLE, OrganKind.FRUIT)


class PlacementError(RuntimeError):
    """A mandatory organ could not be placed within the retry budget."""


@dataclass(frozen=True)
class Socket:
    height_range: tuple[float, float]
    child_kinds: tuple[OrganKind, ...]


@dataclass(frozen=True)
class OrganPrototype:
    kind: OrganKind
    shape_params: dict
    sockets: tuple[Socket, ...] = ()

    def __post_init__(self):
        for name, value in self.shape_params.items():
            if not value > 0:
                raise ValueError(f"{self.kind.value}.{name} must be positive")
        for socket in self.sockets:
            for child in socket.child_kinds:
                if (self.kind, child) not in RELATION_KINDS.values():
                    raise ValueError(f"illegal socket {self.kind.value}->{child.value}")


PROTOTYPES = {
    OrganKind.STEM: OrganPrototype(
        OrganKind.STEM,
        {"height": 0.95, "base_radius": 0.009, "top_radius": 0.005},
        (Socket((0.0, 1.0), (OrganKind.LEAF, OrganKind.PEDUNCLE)),),
    ),
    OrganKind.LEAF: OrganPrototype(
        OrganKind.LEAF, {"length": 0.12, "width": 0.06, "droop": 0.35, "curl": 6.0}
    ),
    OrganKind.PEDUNCLE: OrganPrototype(
        OrganKind.PEDUNCLE,
        {"length": 0.035, "radius": 0.0035, "sag": 0.012},
        (Socket((1.0, 1.0), (OrganKind.FRUIT,)),),
    ),
    OrganKind.FRUIT: OrganPrototype(
        OrganKind.FRUIT, {"radius_xy": 0.035, "radius_z": 0.045, "exponent": 2.8}
    ),
}


@dataclass(frozen=True)
class GenerationConfig:
    stem_count_range: tuple[int, int] = (2, 3)
    leaves_per_stem_range: tuple[int, int] = (4, 6)
    fruits_per_stem_range: tuple[int, int] = (1, 2)
    scale_jitter_range: tuple[float, float] = (0.85, 1.15)
    orientation_jitter_range: tuple[float, float] = (-0.35, 0.35)
    attachment_height_range: tuple[float, float] = (0.3, 0.75)
    row_spacing: float = 0.3
    collision_overlap_threshold: float = 0.05
    voxel_resolution: float = 0.004
    points_per_instance: int = 128

    def __post_init__(self):
        for name in (
            "stem_count_range",
            "leaves_per_stem_range",
            "fruits_per_stem_range",
            "scale_jitter_range",
            "orientation_jitter_range",
            "attachment_height_range",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.stem_count_range[0] < 1:
            raise ValueError("at least one stem is required")
        if self.leaves_per_stem_range[0] < 0 or self.fruits_per_stem_range[0] < 0:
            raise ValueError("organ counts must be nonnegative")
        if self.scale_jitter_range[0] <= 0:
            raise ValueError("scale jitter must be positive")
        if self.voxel_resolution <= 0:
            raise ValueError("voxel_resolution must be positive")
        if self.points_per_instance < 4:
            raise ValueError("points_per_instance must be >= 4")
        if not 0.0 <= self.collision_overlap_threshold <= 1.0:
            raise ValueError("collision_overlap_threshold must lie in [0, 1]")
        if self.row_spacing <= 0:
            raise ValueError("row_spacing must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generation config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    def digest(self) -> str:
        return io.digest(self.to_dict())


@dataclass
class OrganInstance:
    id: int
    kind: OrganKind
    surface_points: np.ndarray
    pose: tuple[np.ndarray, np.ndarray] | None = None
    scale: float = 1.0
    centroid: np.ndarray = field(init=False)
    extents: np.ndarray = field(init=False)

    def __post_init__(self):
        self.kind = OrganKind(self.kind)
        pts = np.asarray(self.surface_points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError(f"instance {self.id} has no surface points")
        self.surface_points = pts
        self.centroid = pts.mean(axis=0)
        lo, hi = aabb_of(pts)
        self.extents = hi - lo

    @property
    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return aabb_of(self.surface_points)


@dataclass(frozen=True)
class AttachmentEdge:
    parent_id: int
    child_id: int
    relation: Relation
    anchor: tuple[float, float, float]


@dataclass
class Scene:
    instances: list[OrganInstance]
    attachments: list[AttachmentEdge]
    seed: int
    config_digest: str

    def __post_init__(self):
        validate_scene(self)

    def kind_of(self, instance_id: int) -> OrganKind:
        return self.instances[instance_id].kind

    def ids_of(self, kind: OrganKind) -> list[int]:
        return [inst.id for inst in self.instances if inst.kind == kind]

    def parent_of(self, child_id: int) -> int | None:
        for edge in self.attachments:
            if edge.child_id == child_id:
                return edge.parent_id
        return None

    def stem_of(self, instance_id: int) -> int | None:
        """Walk the attachment forest up to the root stem."""
        current = instance_id
        while self.kind_of(current) != OrganKind.STEM:
            parent = self.parent_of(current)
            if parent is None:
                return None
            current = parent
        return current

    def voxels_by_instance(self, resolution: float) -> dict[int, np.ndarray]:
        return {inst.id: voxelize(inst.surface_points, resolution) for inst in self.instances}

    def to_dict(self) -> dict:
        return {
            "schema": SCENE_SCHEMA,
            "seed": int(self.seed),
            "config_digest": self.config_digest,
            "instances": [
                {
                    "id": inst.id,
                    "kind": inst.kind.value,
                    "centroid": inst.centroid,
                    "extents": inst.extents,
                    "points": inst.surface_points,
                }
                for inst in self.instances
            ],
            "attachments": [
                {
                    "parent": e.parent_id,
                    "child": e.child_id,
                    "relation": e.relation.value,
                    "anchor": list(e.anchor),
                }
                for e in self.attachments
            ],
        }

    def to_json(self) -> str:
        return io.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        try:
            instances = [
                OrganInstance(int(d["id"]), OrganKind(d["kind"]), np.asarray(d["points"], dtype=np.float64))
                for d in data["instances"]
            ]
            attachments = [
                AttachmentEdge(int(a["parent"]), int(a["child"]), Relation(a["relation"]), tuple(a["anchor"]))
                for a in data["attachments"]
            ]
            return cls(instances, attachments, int(data["seed"]), str(data["config_digest"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scene document: {exc!r}") from exc


def validate_scene(scene: Scene) -> None:
    ids = [inst.id for inst in scene.instances]
    if ids != list(range(len(ids))):
        raise ValueError("instance ids must be unique and contiguous from 0")
    parents: dict[int, int] = {}
    for edge in scene.attachments:
        for end in (edge.parent_id, edge.child_id):
            if not 0 <= end < len(ids):
                raise ValueError(f"attachment references unknown instance {end}")
        expected = RELATION_KINDS[edge.relation]
        actual = (scene.kind_of(edge.parent_id), scene.kind_of(edge.child_id))
        if actual != expected:
            raise ValueError(f"relation {edge.relation.value} joins {actual[0].value}->{actual[1].value}")
        if edge.child_id in parents:
            raise ValueError(f"instance {edge.child_id} has more than one parent")
        parents[edge.child_id] = edge.parent_id
    for inst in scene.instances:
        has_parent = inst.id in parents
        if inst.kind == OrganKind.STEM and has_parent:
            raise ValueError(f"stem {inst.id} must be a root")
        if inst.kind != OrganKind.STEM and not has_parent:
            raise ValueError(f"{inst.kind.value} {inst.id} has no parent")
    # relation kinds already force depth <= 2, so the forest cannot contain cycles


# ---------------------------------------------------------------------------
# primitive surfaces (local frame: socket at origin, +x outward, +z up)
# ---------------------------------------------------------------------------


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def stem_surface(height: float, base_radius: float, top_radius: float, step: float) -> np.ndarray:
    zs = np.arange(0.0, height + step / 2, step)
    rows = []
    for z in zs:
        r = base_radius + (top_radius - base_radius) * z / height
        n = max(8, math.ceil(2 * math.pi * r / step))
        theta = np.arange(n) * (2 * math.pi / n)
        rows.append(np.column_stack([r * np.cos(theta), r * np.sin(theta), np.full(n, z)]))
    return np.vstack(rows)


def stem_radius_at(params: dict, scale: float, z: float) -> float:
    h = params["height"] * scale
    r0, r1 = params["base_radius"] * scale, params["top_radius"] * scale
    return r0 + (r1 - r0) * min(max(z / h, 0.0), 1.0)


def leaf_surface(length: float, width: float, droop: float, curl: float, step: float) -> np.ndarray:
    """Elliptical sheet drooping quadratically along its length, curled across it."""
    xs = np.arange(0.0, length + step / 2, step)
    ys = np.arange(-width / 2, width / 2 + step / 2, step)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    s = gx / length
    half = (width / 2) * np.sqrt(np.clip(1.0 - (2.0 * s - 1.0) ** 2, 0.0, 1.0))
    keep = np.abs(gy) <= half + 1e-12
    x, y = gx[keep], gy[keep]
    z = -droop * length * (x / length) ** 2 + curl * y**2
    return np.column_stack([x, y, z])


def peduncle_centerline(length: float, sag: float, t: np.ndarray) -> np.ndarray:
    return np.column_stack([length * t, np.zeros_like(t), -sag * t**2 - 0.5 * length * t**2])


def peduncle_surface(length: float, radius: float, sag: float, step: float) -> np.ndarray:
    n_along = max(4, math.ceil(1.6 * length / step))
    t = np.linspace(0.0, 1.0, n_along)
    centers = peduncle_centerline(length, sag, t)
    tangents = np.gradient(centers, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    n_around = max(8, math.ceil(2 * math.pi * radius / step))
    theta = np.arange(n_around) * (2 * math.pi / n_around)
    rows = []
    for c, tan in zip(centers, tangents):
        a = np.cross(tan, [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(tan, a)
        ring = c + radius * (np.outer(np.cos(theta), a) + np.outer(np.sin(theta), b))
        rows.append(ring)
    return np.vstack(rows)


def fruit_surface(radius_xy: float, radius_z: float, exponent: float, step: float) -> np.ndarray:
    """Superellipsoid |x/a|^n + |y/a|^n + |z/b|^n = 1 via radial projection of a Fibonacci sphere."""
    r_max = max(radius_xy, radius_z)
    n = math.ceil(3.0 * 4 * math.pi * r_max**2 / step**2)
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = math.pi * (1.0 + 5**0.5) * i
    u = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    scaled = np.abs(u / np.array([radius_xy, radius_xy, radius_z]))
    f = (scaled**exponent).sum(axis=1)
    return u * f[:, None] ** (-1.0 / exponent)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def organ_rng(seed: int, *slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in slot)))


@dataclass
class _Candidate:
    kind: OrganKind
    points: np.ndarray
    voxels: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    anchor: np.ndarray
    anchor_end: np.ndarray | None = None


class _Placer:
    def __init__(self, config: GenerationConfig):
        self.config = config
        self.accepted: list[_Candidate] = []
        self.boxes: list[tuple[np.ndarray, np.ndarray]] = []
        self.rejections = 0

    def fits(self, cand: _Candidate, others: list[_Candidate] = ()) -> bool:
        box = aabb_of(cand.points)
        pool = [(c, aabb_of(c.points)) for c in others] + list(zip(self.accepted, self.boxes))
        for other, other_box in pool:
            if not collision_broad(box, other_box):
                continue
            if collision_narrow(cand.voxels, other.voxels, self.config.collision_overlap_threshold):
                return False
        return True

    def accept(self, cand: _Candidate) -> int:
        self.accepted.append(cand)
        self.boxes.append(aabb_of(cand.points))
        return len(self.accepted) - 1


def _materialize(kind, local_points, rotation, translation, scale, anchor, res) -> _Candidate:
    world = (local_points * scale) @ rotation.T + translation
    voxels = voxelize(world, res)
    # stored surface = voxel centers; idempotent under re-voxelization
    return _Candidate(kind, voxel_centers(voxels, res), voxels, rotation, translation, scale, anchor)


def _uniform(rng, bounds) -> float:
    lo, hi = bounds
    return float(lo if lo == hi else rng.uniform(lo, hi))


def _integers(rng, bounds) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def generate_scene(config: GenerationConfig, seed: int) -> Scene:
    """Generate one scene; identical ``(config, seed)`` yields identical output.

    Raises :class:`PlacementError` when any configured organ fails placement
    after ``MAX_PLACEMENT_ATTEMPTS`` attempts.
    """
    res = config.voxel_resolution
    step = res * SURFACE_STEP_FRACTION
    layout = organ_rng(seed, 0)
    n_stems = _integers(layout, config.stem_count_range)
    leaf_counts = [_integers(layout, config.leaves_per_stem_range) for _ in range(n_stems)]
    fruit_counts = [_integers(layout, config.fruits_per_stem_range) for _ in range(n_stems)]

    placer = _Placer(config)
    stem_params = PROTOTYPES[OrganKind.STEM].shape_params
    stems: list[tuple[int, float, np.ndarray]] = []
    for s in range(n_stems):
        rng = organ_rng(seed, 1, s)
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            scale = _uniform(rng, config.scale_jitter_range)
            base = np.array(
                [s * config.row_spacing + rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), 0.0]
            )
            local = stem_surface(
                stem_params["height"], stem_params["base_radius"], stem_params["top_radius"], step / scale
            )
            cand = _materialize(OrganKind.STEM, local, np.eye(3), base, scale, base, res)
            if placer.fits(cand):
                placer.accept(cand)
                stems.append((s, scale, base))
                break
        else:
            raise PlacementError(f"seed {seed}: stem {s} not placed after {MAX_PLACEMENT_ATTEMPTS} attempts")

    # slots in `placer.accepted` follow placement order; ids are assigned afterwards
    leaf_slots: dict[int, list[tuple[int, np.ndarray]]] = {s: [] for s in range(n_stems)}
    fruit_slots: dict[int, list[tuple[int, int, np.ndarray]]] = {s: [] for s in range(n_stems)}

    for s, stem_scale, base in stems:
        for j in range(leaf_counts[s]):
            rng = organ_rng(seed, 2, s, j)
            for _ in range(MAX_PLACEMENT_ATTEMPTS):
                cand, anchor = _propose_leaf(rng, config, stem_scale, base, step)
                if placer.fits(cand):
                    leaf_slots[s].append((placer.accept(cand), anchor))
                    break
            else:
                raise PlacementError(
                    f"seed {seed}: leaf {j} of stem {s} not placed after {MAX_PLACEMENT_ATTEMPTS} attempts"
                )
        for j in range(fruit_counts[s]):
            rng = organ_rng(seed, 3, s, j)
            for _ in range(MAX_PLACEMENT_ATTEMPTS):
                ped, fruit, anchor = _propose_fruit(rng, config, stem_scale, base, step)
                if placer.fits(ped) and placer.fits(fruit, [ped]):
                    ped_slot = placer.accept(ped)
                    fruit_slots[s].append((ped_slot, placer.accept(fruit), anchor))
                    break
            else:
                raise PlacementError(
                    f"seed {seed}: fruit {j} of stem {s} not placed after {MAX_PLACEMENT_ATTEMPTS} attempts"
                )

    instances: list[OrganInstance] = []
    attachments: list[AttachmentEdge] = []

    def add(slot: int) -> int:
        cand = placer.accepted[slot]
        new_id = len(instances)
        instances.append(
            OrganInstance(new_id, cand.kind, cand.points, (cand.rotation, cand.translation), cand.scale)
        )
        return new_id

    stem_ids = {s: add(i) for i, (s, _, _) in enumerate(stems)}
    for s, _, _ in stems:
        for slot, anchor in leaf_slots[s]:
            attachments.append(AttachmentEdge(stem_ids[s], add(slot), Relation.STEM_LEAF, tuple(anchor)))
        for ped_slot, fruit_slot, anchor in fruit_slots[s]:
            ped_id = add(ped_slot)
            attachments.append(AttachmentEdge(stem_ids[s], ped_id, Relation.STEM_PEDUNCLE, tuple(anchor)))
            fruit_anchor = placer.accepted[ped_slot].anchor_end
            attachments.append(AttachmentEdge(ped_id, add(fruit_slot), Relation.PEDUNCLE_FRUIT, tuple(fruit_anchor)))
    return Scene(instances, attachments, int(seed), config.digest())


def _stem_socket(rng, config, stem_scale, base):
    params = PROTOTYPES[OrganKind.STEM].shape_params
    height = min(_uniform(rng, config.attachment_height_range), params["height"] * stem_scale)
    azimuth = float(rng.uniform(0.0, 2 * math.pi))
    radius = stem_radius_at(params, stem_scale, height)
    radial = np.array([math.cos(azimuth), math.sin(azimuth), 0.0])
    anchor = base + radial * radius + np.array([0.0, 0.0, height])
    return anchor, azimuth, radial


def _propose_leaf(rng, config, stem_scale, base, step):
    params = PROTOTYPES[OrganKind.LEAF].shape_params
    anchor, azimuth, radial = _stem_socket(rng, config, stem_scale, base)
    scale = _uniform(rng, config.scale_jitter_range)
    pitch = -0.25 + _uniform(rng, config.orientation_jitter_range)  # negative pitch lifts the tip
    roll = _uniform(rng, config.orientation_jitter_range)
    yaw = azimuth + _uniform(rng, config.orientation_jitter_range)
    rotation = _rot_z(yaw) @ _rot_y(pitch) @ _rot_x(roll)
    local = leaf_surface(params["length"], params["width"], params["droop"], params["curl"] / scale, step / scale)
    gap = 1.5 * config.voxel_resolution
    return _materialize(OrganKind.LEAF, local, rotation, anchor + radial * gap, scale, anchor, config.voxel_resolution), anchor


def _propose_fruit(rng, config, stem_scale, base, step):
    res = config.voxel_resolution
    p_params = PROTOTYPES[OrganKind.PEDUNCLE].shape_params
    f_params = PROTOTYPES[OrganKind.FRUIT].shape_params
    anchor, azimuth, radial = _stem_socket(rng, config, stem_scale, base)
    p_scale = _uniform(rng, config.scale_jitter_range)
    yaw = azimuth + _uniform(rng, config.orientation_jitter_range)
    rotation = _rot_z(yaw)
    start = anchor + radial * 1.5 * res
    local = peduncle_surface(p_params["length"], p_params["radius"], p_params["sag"], step / p_scale)
    ped = _materialize(OrganKind.PEDUNCLE, local, rotation, start, p_scale, anchor, res)
    end_local = peduncle_centerline(p_params["length"], p_params["sag"], np.array([1.0]))[0]
    end = start + rotation @ (end_local * p_scale)
    ped.anchor_end = end

    f_scale = _uniform(rng, config.scale_jitter_range)
    f_yaw = _uniform(rng, (0.0, 2 * math.pi))
    tilt = _uniform(rng, config.orientation_jitter_range) * 0.5
    f_rot = _rot_z(f_yaw) @ _rot_x(tilt)
    top_offset = f_params["radius_z"] * f_scale + p_params["radius"] * p_scale + 1.5 * res
    center = end - np.array([0.0, 0.0, top_offset])
    local = fruit_surface(f_params["radius_xy"], f_params["radius_z"], f_params["exponent"], step / f_scale)
    fruit = _materialize(OrganKind.FRUIT, local, f_rot, center, f_scale, end, res)
    return ped, fruit, anchor


def sample_instance_points(instance: OrganInstance, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` surface points uniformly; with replacement only when the surface has fewer than ``n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = np.asarray(instance.surface_points)
    if len(pts) == 0:
        raise ValueError(f"instance {instance.id} has no surface points")
    rng = organ_rng(seed, 7, instance.id)
    idx = rng.choice(len(pts), size=n, replace=len(pts) < n)
    return pts[idx]


def load_scene(path) -> Scene:
    return Scene.from_dict(io.read_json(path))
