"""Per-scene graph records and prediction bundles.

A graph record carries the candidate edges, node ground truth and per-pair
features for one scene. A prediction bundle holds model outputs keyed the same
way as labels, so objectives and metrics can consume it directly.
"""

from __future__ import annotations

import math

import numpy as np

from .graph import DEFAULT_K, DEFAULT_RADIUS, GRAPH_SCHEMA, direction_features, pair_geometry, scene_graph, scene_scale
from .labels import DIRECTION_LABELS, OcclusionLabels, direction_vector
from .objectives import PROB_CLAMP
from .scene import KIND_ORDER, OrganKind, Relation, Scene, sample_instance_points
from .scorer import ScorerWeights, score_fruit

PREDICTIONS_SCHEMA = "plantocc.predictions/1"
RELATION_ORDER = tuple(Relation)
DEFAULT_POINTS = 128


def graph_record(scene: Scene, labels: OcclusionLabels, k: int = DEFAULT_K, radius: float = DEFAULT_RADIUS,
                 n_points: int = DEFAULT_POINTS) -> dict:
    """Candidate edges with attachment truth, node targets and pair features g / r."""
    truth = {(a.parent_id, a.child_id): a.relation for a in scene.attachments}
    edges = scene_graph(scene, k, radius)
    nodes = []
    for inst in scene.instances:
        sample = sample_instance_points(inst, n_points, scene.seed)
        nodes.append({
            "id": inst.id,
            "kind": inst.kind.value,
            "dc": inst.centroid - sample.mean(axis=0),
            "extents": inst.extents,
        })
    scale = scene_scale(scene)
    pairs = {}
    for fid, dirs in labels.fruits.items():
        fruit = scene.instances[fid]
        frame = labels.frames[fid]
        listed = sorted(next(iter(dirs.values())).leaves) if dirs else []
        pairs[str(fid)] = {
            str(j): {
                "g": pair_geometry(fruit, scene.instances[j], scale),
                "r": {key: direction_features(fruit, scene.instances[j], direction_vector(frame, key))
                      for key in DIRECTION_LABELS},
            }
            for j in listed
        }
    return {
        "schema": GRAPH_SCHEMA,
        "scene_seed": scene.seed,
        "params": {"k": k, "radius": radius, "n_points": n_points},
        "nodes": nodes,
        "edges": [
            {
                "src": e.src,
                "dst": e.dst,
                "source_rule": e.source_rule.value,
                "delta_c": e.delta_c,
                "dist": e.dist,
                "attached": (e.src, e.dst) in truth,
                "relation": truth[(e.src, e.dst)].value if (e.src, e.dst) in truth else None,
            }
            for e in edges
        ],
        "pairs": pairs,
    }


def _clamp(x: float) -> float:
    return min(max(float(x), PROB_CLAMP), 1.0 - PROB_CLAMP)


def oracle_predictions(labels: OcclusionLabels, graph: dict | None = None) -> dict:
    """Predictions that reproduce the labels exactly; the losses clamp 0/1 themselves."""
    occl = {}
    for fid, dirs in labels.fruits.items():
        occl[str(fid)] = {
            key: {
                "u_hat": dl.union,
                "leaves": {
                    str(j): {"s_hat": t.pot, "z": math.log(max(t.mass, 1e-12))}
                    for j, t in dl.leaves.items()
                },
            }
            for key, dl in dirs.items()
        }
    out = {"occlusion": occl}
    if graph is not None:
        nodes = {}
        for n in graph["nodes"]:
            p = np.zeros(len(KIND_ORDER))
            p[kind_index(n["kind"])] = 1.0
            nodes[str(n["id"])] = {"p_hat": p, "dc_hat": n["dc"], "s_hat": n["extents"]}
        edges = []
        for e in graph["edges"]:
            r = np.full(len(RELATION_ORDER), 1.0 / len(RELATION_ORDER))
            if e["relation"] is not None:
                r = np.zeros(len(RELATION_ORDER))
                r[relation_index(e["relation"])] = 1.0
            edges.append({"src": e["src"], "dst": e["dst"], "e_hat": float(e["attached"]), "r_hat": r})
        out["nodes"] = nodes
        out["edges"] = edges
    return out


def instance_embedding(inst, scale: float) -> np.ndarray:
    """Fixed 16-d shape descriptor standing in for a learned point-cloud embedding."""
    onehot = np.array([inst.kind == k for k in KIND_ORDER], dtype=np.float64)
    pts = np.asarray(inst.surface_points)
    spread = pts.std(axis=0)
    ext = np.asarray(inst.extents, dtype=np.float64)
    aspect = ext / max(float(ext.max()), 1e-12)
    return np.concatenate([onehot, 10.0 * ext, ext / scale, 10.0 * spread, aspect])


def scorer_predictions(scene: Scene, labels: OcclusionLabels, graph: dict, weights: ScorerWeights) -> dict:
    """Forward-pass the scorer over every labelled fruit; leaf order follows the labels."""
    if weights.config.embed_dim != 16:
        raise ValueError("built-in embeddings are 16-dimensional; weights expect a different size")
    scale = scene_scale(scene)
    occl = {}
    for fid, dirs in labels.fruits.items():
        listed = sorted(next(iter(dirs.values())).leaves) if dirs else []
        pairs = graph["pairs"][str(fid)]
        g = np.array([pairs[str(j)]["g"] for j in listed], dtype=np.float64).reshape(-1, 11)
        r = np.array([[pairs[str(j)]["r"][key] for key in DIRECTION_LABELS] for j in listed],
                     dtype=np.float64).reshape(len(listed), len(DIRECTION_LABELS), 2)
        leaf_emb = np.array([instance_embedding(scene.instances[j], scale) for j in listed]).reshape(-1, 16)
        scores = score_fruit(instance_embedding(scene.instances[fid], scale), leaf_emb, g, r, weights)
        occl[str(fid)] = {
            key: {
                "u_hat": _clamp(ds.union),
                "leaves": {
                    str(j): {"s_hat": _clamp(ds.potentials[b]), "z": float(ds.rank_logits[b])}
                    for b, j in enumerate(listed)
                },
            }
            for key, ds in zip(DIRECTION_LABELS, scores)
        }
    return {"occlusion": occl}


def bundle(scenes: dict[str, dict], mode: str, provenance: dict | None = None) -> dict:
    return {"schema": PREDICTIONS_SCHEMA, "mode": mode, "provenance": provenance or {}, "scenes": scenes}


def check_bundle(data: dict, source: str = "predictions") -> dict:
    if not isinstance(data, dict) or data.get("schema") != PREDICTIONS_SCHEMA:
        raise ValueError(f"{source}: expected schema {PREDICTIONS_SCHEMA!r}")
    if not isinstance(data.get("scenes"), dict):
        raise ValueError(f"{source}: missing 'scenes' mapping")
    return data


def kind_index(kind: str) -> int:
    return [k.value for k in KIND_ORDER].index(OrganKind(kind).value)


def relation_index(relation: str) -> int:
    return [r.value for r in RELATION_ORDER].index(Relation(relation).value)
