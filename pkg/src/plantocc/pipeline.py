"""Batch commands: generate, label, verify, predict, eval and losscheck.

Every command reads and writes JSON. Data files depend only on their inputs;
run manifests additionally record wall time and worker count.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import io
from .graph import DEFAULT_K, DEFAULT_RADIUS
from .labels import DIRECTION_LABELS, LabelConfig, OcclusionLabels, label_scene, load_labels, mass_at_K
from .metrics import MetricReport, QueryAccumulator, binned_union_mae, edge_exist_f1, geometry_mae, occl_dir_f1
from .objectives import (
    LossConfig,
    OcclusionArrays,
    check_gradient,
    edge_exist_wbce,
    geom_smooth_l1,
    listwise_rank_loss,
    noisy_or_consistency,
    node_ce,
    potential_gated_bce,
    potential_selection,
    rank_targets_and_set,
    relation_ce,
    union_bce,
)
from .predict import (
    RELATION_ORDER,
    bundle,
    check_bundle,
    graph_record,
    kind_index,
    oracle_predictions,
    relation_index,
    scorer_predictions,
)
from .raycast import CameraSpec, Projection, cast_scene, compare_labels
from .scene import GenerationConfig, PlacementError, generate_scene, load_scene
from .scorer import ScorerWeights

log = logging.getLogger("plantocc")

MANIFEST_SCHEMA = "plantocc.manifest/1"
SPLIT_SCHEMA = "plantocc.split/1"
WORKERS_ENV = "PLANTOCC_WORKERS"
TRAIN_FRACTION = 0.8
LABEL_SUFFIX = ".labels.json"
GRAPH_SUFFIX = ".graph.json"


def tool_version() -> str:
    try:
        return version("plantocc")
    except PackageNotFoundError:  # pragma: no cover - running from a source tree
        return "0+unknown"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1")
    return n


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seeds: list[int] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = field(default_factory=tool_version)
    wall_time: float = 0.0
    workers: int = 1
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": MANIFEST_SCHEMA, **asdict(self)}

    def write(self, directory) -> Path:
        path = Path(directory) / f"manifest.{self.command}.json"
        io.write_json(path, self.to_dict())
        return path


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------


CONFIG_SECTIONS = ("generation", "label", "graph", "loss")


def load_section(path, section: str, flat: bool = True) -> dict:
    """A config file is either one flat section or a mapping of named sections.

    A flat file is returned whole when ``flat`` is set and ignored otherwise.
    """
    if path is None:
        return {}
    data = io.read_json(path)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    if set(CONFIG_SECTIONS) & set(data):
        unknown = set(data) - set(CONFIG_SECTIONS)
        if unknown:
            raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
        return dict(data.get(section, {}))
    return dict(data) if flat else {}


def generation_config(path) -> GenerationConfig:
    return GenerationConfig.from_dict(load_section(path, "generation")) if path else GenerationConfig()


def label_settings(path) -> tuple[LabelConfig, dict]:
    label = load_section(path, "label")
    graph = {"k": DEFAULT_K, "radius": DEFAULT_RADIUS, "n_points": 128}
    extra = load_section(path, "graph", flat=False)
    if set(extra) - set(graph):
        raise ValueError(f"{path}: unknown graph keys {sorted(set(extra) - set(graph))}")
    graph.update(extra)
    return LabelConfig.from_dict(label), graph


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def scene_name(seed: int) -> str:
    return f"scene_{seed:06d}.json"


def split_names(names: list[str], seed: int) -> tuple[list[str], list[str]]:
    """Seeded scene-level 80/20 split; the train share is floor(0.8 N)."""
    order = np.random.default_rng(seed).permutation(len(names))
    n_train = int(np.floor(TRAIN_FRACTION * len(names) + 1e-9))
    train = sorted(names[i] for i in order[:n_train])
    val = sorted(names[i] for i in order[n_train:])
    return train, val


def cmd_generate(config: GenerationConfig, count: int, seed: int, out) -> RunManifest:
    if count < 0:
        raise ValueError("count must be >= 0")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    written, skipped = [], []
    for s in range(seed, seed + count):
        try:
            scene = generate_scene(config, s)
        except PlacementError as exc:
            log.warning("scene seed %d skipped: %s", s, exc)
            skipped.append(s)
            continue
        name = scene_name(s)
        (out / name).write_text(scene.to_json() + "\n", encoding="utf-8")
        written.append(name)
    train, val = split_names(written, seed)
    io.write_json(out / "split.json", {"schema": SPLIT_SCHEMA, "seed": seed, "train": train, "val": val})
    manifest = RunManifest(
        "generate",
        config.digest(),
        seeds=list(range(seed, seed + count)),
        outputs=written + ["split.json"],
        wall_time=time.perf_counter() - start,
        extra={"generated": len(written), "skipped": skipped, "config": config.to_dict()},
    )
    manifest.write(out)
    return manifest


# ---------------------------------------------------------------------------
# label
# ---------------------------------------------------------------------------


def scene_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"{directory}: not a directory")
    return sorted(p for p in directory.glob("scene_*.json") if not p.name.endswith((LABEL_SUFFIX, GRAPH_SUFFIX)))


def _stem(path: Path) -> str:
    return path.name[: -len(".json")]


def label_one(path: str, label_cfg: dict, graph_cfg: dict) -> tuple[str, str, str]:
    """Label one scene file; returns (stem, labels JSON, graph JSON)."""
    path = Path(path)
    try:
        scene = load_scene(path)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed scene file ({exc!r})") from exc
    except ValueError as exc:
        msg = str(exc)
        raise ValueError(msg if str(path) in msg else f"{path}: {msg}") from exc
    config = LabelConfig.from_dict(label_cfg)
    labels = label_scene(scene, config)
    graph = graph_record(scene, labels, graph_cfg["k"], graph_cfg["radius"], graph_cfg["n_points"])
    return _stem(path), io.dumps(labels.to_dict()), io.dumps(graph)


def cmd_label(scenes, config: LabelConfig = LabelConfig(), workers: int = 1, out=None,
              graph: dict | None = None) -> RunManifest:
    """Label every scene in ``scenes``; outputs are identical for any worker count."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    files = scene_files(scenes)
    out = Path(out) if out is not None else Path(scenes)
    out.mkdir(parents=True, exist_ok=True)
    graph = {"k": DEFAULT_K, "radius": DEFAULT_RADIUS, "n_points": 128, **(graph or {})}
    start = time.perf_counter()
    args = [(str(p), config.to_dict(), graph) for p in files]
    if workers == 1 or len(files) <= 1:
        results = [label_one(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(label_one, *zip(*args)))
    outputs = []
    for stem, labels_text, graph_text in sorted(results):
        (out / f"{stem}{LABEL_SUFFIX}").write_text(labels_text + "\n", encoding="utf-8")
        (out / f"{stem}{GRAPH_SUFFIX}").write_text(graph_text + "\n", encoding="utf-8")
        outputs += [f"{stem}{LABEL_SUFFIX}", f"{stem}{GRAPH_SUFFIX}"]
    manifest = RunManifest(
        "label",
        io.digest({"label": config.to_dict(), "graph": graph}),
        inputs=[p.name for p in files],
        outputs=outputs,
        wall_time=time.perf_counter() - start,
        workers=workers,
        extra={"label_config": config.to_dict(), "graph": graph, "scenes": len(files)},
    )
    manifest.write(out)
    return manifest


def label_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"{directory}: not a directory")
    return sorted(directory.glob(f"*{LABEL_SUFFIX}"))


def _load_labels(path: Path) -> OcclusionLabels:
    try:
        return load_labels(path)
    except ValueError as exc:
        msg = str(exc)
        raise ValueError(msg if str(path) in msg else f"{path}: {msg}") from exc


def _load_graph(label_path: Path) -> dict | None:
    path = label_path.with_name(label_path.name[: -len(LABEL_SUFFIX)] + GRAPH_SUFFIX)
    return io.read_json(path) if path.exists() else None


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(scenes, camera: CameraSpec, labels=None, seed: int = 0, tolerance: float = 0.05) -> tuple[dict, bool]:
    """Ray-cast every labelled scene and compare against its z-buffer labels."""
    labels_dir = Path(labels) if labels is not None else Path(scenes)
    total_err, total_jac, n_pairs, per_scene = 0.0, 0.0, 0, {}
    for lp in label_files(labels_dir):
        stem = lp.name[: -len(LABEL_SUFFIX)]
        ref = _load_labels(lp)
        scene_path = Path(scenes) / f"{stem}.json"
        scene = load_scene(scene_path)
        cast = cast_scene(scene, camera, ref.config, seed, reference=ref)
        report = compare_labels(ref, cast)
        per_scene[stem] = {"union_mae": report.union_mae, "top3_jaccard": report.top3_jaccard, "n_pairs": report.n_pairs}
        total_err += report.union_mae * report.n_pairs
        total_jac += report.top3_jaccard * report.n_pairs
        n_pairs += report.n_pairs
    mae = total_err / n_pairs if n_pairs else 0.0
    jac = total_jac / n_pairs if n_pairs else 1.0
    ok = mae <= tolerance
    return {
        "schema": "plantocc.agreement/1",
        "camera": camera.to_dict(),
        "seed": seed,
        "union_mae": mae,
        "top3_jaccard": jac,
        "n_pairs": n_pairs,
        "tolerance": tolerance,
        "within_tolerance": ok,
        "scenes": per_scene,
    }, ok


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def cmd_predict(labels_dir, mode: str = "oracle", scenes=None, weights: ScorerWeights | None = None) -> dict:
    out = {}
    for lp in label_files(labels_dir):
        stem = lp.name[: -len(LABEL_SUFFIX)]
        labels = _load_labels(lp)
        graph = _load_graph(lp)
        if mode == "oracle":
            out[stem] = oracle_predictions(labels, graph)
        elif mode == "scorer":
            if weights is None or graph is None:
                raise ValueError("scorer mode needs weights and the graph file written by 'label'")
            scene = load_scene(Path(scenes if scenes is not None else labels_dir) / f"{stem}.json")
            out[stem] = scorer_predictions(scene, labels, graph, weights)
        else:
            raise ValueError(f"unknown prediction mode {mode!r}")
    prov = {"labels": sorted(out)}
    if weights is not None:
        prov["scorer_config"] = weights.config.to_dict()
    return bundle(out, mode, prov)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _scene_preds(preds: dict, stem: str) -> dict:
    if stem not in preds["scenes"]:
        raise ValueError(f"predictions have no entry for scene {stem!r}")
    return preds["scenes"][stem]


def _direction_preds(scene_preds: dict, stem: str, fid: int, key: str) -> dict:
    try:
        return scene_preds["occlusion"][str(fid)][key]
    except KeyError:
        raise ValueError(f"predictions for {stem} lack fruit {fid} direction {key}") from None


def cmd_eval(labels_dir, preds: dict, tau: float = 0.5) -> MetricReport:
    check_bundle(preds)
    acc = QueryAccumulator()
    o_all, u_all, mass_scores = [], [], []
    edge_y, edge_s = [], []
    dc_hat, dc, s_hat, s = [], [], [], []
    label_cfg = None
    for lp in label_files(labels_dir):
        stem = lp.name[: -len(LABEL_SUFFIX)]
        labels = _load_labels(lp)
        label_cfg = labels.config
        sp = _scene_preds(preds, stem)
        for fid in sorted(labels.fruits):
            dirs = labels.fruits[fid]
            top = {}
            for key in DIRECTION_LABELS:
                dl = dirs[key]
                dp = _direction_preds(sp, stem, fid, key)
                o_all.append(dl.union)
                u_all.append(float(dp["u_hat"]))
                ids = sorted(dl.leaves)
                try:
                    scores = [float(dp["leaves"][str(j)]["z"]) for j in ids]
                except KeyError:
                    raise ValueError(f"predictions for {stem} fruit {fid} {key} miss listed leaves") from None
                acc.add([dl.leaves[j].mass for j in ids], scores, ids)
                order = np.lexsort((ids, -np.asarray(scores))) if ids else []
                top[key] = [ids[i] for i in order]
            mass_scores.append(mass_at_K(dirs, top, labels.config))
        graph = _load_graph(lp)
        if graph is not None and "edges" in sp:
            pred_e = {(e["src"], e["dst"]): float(e["e_hat"]) for e in sp["edges"]}
            for e in graph["edges"]:
                if (e["src"], e["dst"]) not in pred_e:
                    raise ValueError(f"predictions for {stem} miss edge {e['src']}->{e['dst']}")
                edge_y.append(bool(e["attached"]))
                edge_s.append(pred_e[(e["src"], e["dst"])])
        if graph is not None and "nodes" in sp:
            for n in graph["nodes"]:
                pn = sp["nodes"].get(str(n["id"]))
                if pn is None:
                    raise ValueError(f"predictions for {stem} miss node {n['id']}")
                dc_hat.append(pn["dc_hat"])
                dc.append(n["dc"])
                s_hat.append(pn["s_hat"])
                s.append(n["extents"])
    ranking = acc.summary()
    bins = binned_union_mae(o_all, u_all)
    mae_c, mae_e = geometry_mae(dc_hat, dc, s_hat, s) if dc_hat else (None, None)
    return MetricReport(
        ndcg_at_3=ranking["ndcg_at_3"],
        recall_at_1=ranking["recall_at_1"],
        recall_at_3=ranking["recall_at_3"],
        mae_u_low=bins["mae_u_low"],
        mae_u_mid=bins["mae_u_mid"],
        mae_u_high=bins["mae_u_high"],
        occl_dir_f1=occl_dir_f1(o_all, u_all, tau) if o_all else None,
        edge_exist_f1=edge_exist_f1(edge_y, edge_s) if edge_y else None,
        mae_centroid=mae_c,
        mae_extent=mae_e,
        mass_at_K=float(np.mean(mass_scores)) if mass_scores else None,
        counts={
            "queries": ranking["queries"],
            "skipped_zero_relevance": ranking["skipped"],
            "fruit_directions": len(o_all),
            "edges": len(edge_y),
            "nodes": len(dc_hat),
            **{k: v for k, v in bins.items() if k.startswith("count_")},
        },
        provenance={
            "occl_dir_tau": tau,
            "zero_relevance_queries": "skipped",
            "relevance": "graded mass",
            "ranking_score": "z",
            "label_config": label_cfg.to_dict() if label_cfg else None,
            "predictions_digest": io.digest(preds),
        },
    )


# ---------------------------------------------------------------------------
# losscheck
# ---------------------------------------------------------------------------


def occlusion_prediction_arrays(arrays: OcclusionArrays, sp: dict, stem: str):
    F, K = arrays.o.shape
    J = arrays.p.shape[-1]
    u = np.zeros((F, K))
    s = np.full((F, K, J), 0.5)
    z = np.zeros((F, K, J))
    for a, fid in enumerate(arrays.fruit_ids):
        for k, key in enumerate(DIRECTION_LABELS):
            dp = _direction_preds(sp, stem, fid, key)
            u[a, k] = float(dp["u_hat"])
            for b, j in enumerate(arrays.leaf_ids[a]):
                leaf = dp["leaves"].get(str(j))
                if leaf is None:
                    raise ValueError(f"predictions for {stem} fruit {fid} {key} miss leaf {j}")
                s[a, k, b] = float(leaf["s_hat"])
                z[a, k, b] = float(leaf["z"])
    return u, s, z


def _graph_targets(graph: dict, sp: dict, stem: str):
    nodes = graph["nodes"]
    y = np.zeros((len(nodes), 4))
    p_hat = np.zeros((len(nodes), 4))
    dc_hat, dc, s_hat, s = (np.zeros((len(nodes), 3)) for _ in range(4))
    for i, n in enumerate(nodes):
        pn = sp["nodes"].get(str(n["id"]))
        if pn is None:
            raise ValueError(f"predictions for {stem} miss node {n['id']}")
        y[i, kind_index(n["kind"])] = 1.0
        p_hat[i] = pn["p_hat"]
        dc_hat[i], dc[i], s_hat[i], s[i] = pn["dc_hat"], n["dc"], pn["s_hat"], n["extents"]
    pred_e = {(e["src"], e["dst"]): e for e in sp.get("edges", [])}
    R = len(RELATION_ORDER)
    ey = np.zeros(len(graph["edges"]))
    e_hat = np.zeros(len(graph["edges"]))
    ry = np.zeros((len(graph["edges"]), R))
    r_hat = np.full((len(graph["edges"]), R), 1.0 / R)
    for i, e in enumerate(graph["edges"]):
        pe = pred_e.get((e["src"], e["dst"]))
        if pe is None:
            raise ValueError(f"predictions for {stem} miss edge {e['src']}->{e['dst']}")
        ey[i] = float(e["attached"])
        e_hat[i] = float(pe["e_hat"])
        r_hat[i] = pe["r_hat"]
        if e["relation"] is not None:
            ry[i, relation_index(e["relation"])] = 1.0
    return (y, p_hat), (ey, e_hat), (ey > 0, ry, r_hat), (dc_hat, dc, s_hat, s)


GRADIENT_FLOOR = 1e-5


def cmd_losscheck(labels_dir, preds: dict, config: LossConfig = LossConfig(), tolerance: float = 1e-4,
                  step: float = 1e-5, floor: float = GRADIENT_FLOOR) -> tuple[dict, bool]:
    """Loss values plus a gradient check per op and scene; ok iff every relative error <= tolerance.

    Gradient norms below ``floor`` are compared in absolute terms (see ``relative_error``).
    """
    check_bundle(preds)
    rows, totals = [], {}

    def run(stem, op, fn, kwargs, wrt, probability, tally=True):
        value = fn(**kwargs)
        err = check_gradient(fn, kwargs, wrt, step, probability=probability, floor=floor)
        ok = bool(np.isfinite(value.value)) and err <= tolerance
        rows.append({"scene": stem, "op": op, "wrt": wrt, "value": value.value, "rel_error": err, "ok": ok})
        if tally:
            totals[op] = totals.get(op, 0.0) + value.value

    for lp in label_files(labels_dir):
        stem = lp.name[: -len(LABEL_SUFFIX)]
        labels = _load_labels(lp)
        sp = _scene_preds(preds, stem)
        arrays = OcclusionArrays.from_labels(labels)
        if arrays.fruit_ids:
            u, s, z = occlusion_prediction_arrays(arrays, sp, stem)
            mask3 = arrays.leaf_mask3
            sel = potential_selection(arrays.o, mask3, config.eps_pot, config.pot_negative_ratio,
                                      config.pot_selection_seed) & mask3
            t, s_rank = rank_targets_and_set(arrays.m, arrays.o, config.tau_union, config.epsilon, mask3)
            run(stem, "union_bce", union_bce, {"o": arrays.o, "u_hat": u}, "u_hat", True)
            run(stem, "potential_gated_bce", potential_gated_bce,
                {"p": arrays.p, "s_hat": s, "eps_pot": config.eps_pot, "selection": sel}, "s_hat", True)
            run(stem, "listwise_rank_loss", listwise_rank_loss,
                {"t": t, "z": z, "s_rank": s_rank, "leaf_mask3": mask3}, "z", False)
            run(stem, "noisy_or_consistency", noisy_or_consistency,
                {"s_hat": s, "p": arrays.p, "o": arrays.o, "eps_pot": config.eps_pot,
                 "tau_union": config.tau_union, "leaf_mask3": mask3}, "s_hat", True)
        graph = _load_graph(lp)
        if graph is not None and "nodes" in sp and "edges" in sp:
            (y, p_hat), (ey, e_hat), (pos, ry, r_hat), (dch, dc, sh, s_) = _graph_targets(graph, sp, stem)
            run(stem, "node_ce", node_ce, {"y": y, "p_hat": p_hat}, "p_hat", True)
            run(stem, "edge_exist_wbce", edge_exist_wbce, {"y": ey, "e_hat": e_hat, "beta": config.beta}, "e_hat", True)
            run(stem, "relation_ce", relation_ce, {"positive": pos, "y": ry, "r_hat": r_hat}, "r_hat", True)
            for wrt in ("dc_hat", "s_hat"):
                run(stem, "geom_smooth_l1", geom_smooth_l1,
                    {"dc_hat": dch, "dc": dc, "s_hat": sh, "s": s_, "delta": config.smooth_l1_delta}, wrt, False,
                    tally=wrt == "dc_hat")
    failing = sorted({r["op"] for r in rows if not r["ok"]})
    occl = {"union": "union_bce", "pot": "potential_gated_bce", "rank": "listwise_rank_loss", "cons": "noisy_or_consistency"}
    total = sum(w * totals.get(occl[name], 0.0) for name, w in config.lambdas.items())
    report = {
        "schema": "plantocc.losscheck/1",
        "loss_config": config.to_dict(),
        "tolerance": tolerance,
        "step": step,
        "gradient_floor": floor,
        "totals": totals,
        "weighted_occlusion_total": total,
        "checks": rows,
        "failing_ops": failing,
    }
    return report, not failing
