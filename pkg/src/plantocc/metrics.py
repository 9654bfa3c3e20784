"""Ranking, visibility and scene-graph metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

U_LOW = 0.25
U_HIGH = 0.5


def rank_order(scores, ids=None) -> list[int]:
    """Positions sorted by descending score, ascending id on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    return np.lexsort((ids, -scores)).tolist()


def dcg(gains) -> float:
    return float(sum(g / math.log2(r + 2) for r, g in enumerate(gains)))


def ndcg_at_k(relevance, ranking, k: int = 3) -> float | None:
    """Linear-gain NDCG@k; None when every relevance is zero (query skipped)."""
    rel = np.asarray(relevance, dtype=np.float64)
    if np.any(rel < 0):
        raise ValueError("relevance must be nonnegative")
    if not np.any(rel > 0):
        return None
    ranking = list(ranking)[:k]
    ideal = dcg(np.sort(rel)[::-1][:k])
    return dcg(rel[ranking]) / ideal


def primary_index(relevance) -> int:
    """Index of the largest relevance, lowest index on ties."""
    return int(np.argmax(np.asarray(relevance, dtype=np.float64)))


def recall_at_k(relevance, ranking, k: int) -> float | None:
    """1.0 if the dominant item is within the top k, 0.0 if not, None if skipped."""
    rel = np.asarray(relevance, dtype=np.float64)
    if not np.any(rel > 0):
        return None
    return 1.0 if primary_index(rel) in list(ranking)[:k] else 0.0


def binned_union_mae(o, u_hat) -> dict:
    """MAE within ground-truth bins low (<0.25), high (>0.5) and mid; absent bins are None."""
    o = np.asarray(o, dtype=np.float64).ravel()
    err = np.abs(np.asarray(u_hat, dtype=np.float64).ravel() - o)
    bins = {"low": o < U_LOW, "high": o > U_HIGH}
    bins["mid"] = ~(bins["low"] | bins["high"])
    out = {}
    for name, sel in bins.items():
        out[f"mae_u_{name}"] = float(err[sel].mean()) if sel.any() else None
        out[f"count_u_{name}"] = int(sel.sum())
    return out


def best_f1(labels, scores) -> float:
    """Max F1 over thresholds at every distinct score (predict positive when score >= t).

    The empty prediction (threshold +inf) is included. With no positive labels
    the result is 0.
    """
    y = np.asarray(labels, dtype=bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    if n_pos == 0 or len(s) == 0:
        return 0.0
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last position of each run of equal scores
    ends = np.flatnonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))
    tp, fp = tp[ends], fp[ends]
    f1 = 2 * tp / (2 * tp + fp + (n_pos - tp))
    return float(max(f1.max(), 0.0))


def occl_dir_f1(o, u_hat, tau: float = 0.5) -> float:
    return best_f1(np.asarray(o) >= tau, u_hat)


def edge_exist_f1(labels, e_hat) -> float:
    return best_f1(labels, e_hat)


def geometry_mae(dc_hat, dc, s_hat, s) -> tuple[float, float]:
    """Mean absolute centroid-offset and extent errors (meters)."""
    dc_err = np.abs(np.asarray(dc_hat, dtype=np.float64) - np.asarray(dc, dtype=np.float64))
    s_err = np.abs(np.asarray(s_hat, dtype=np.float64) - np.asarray(s, dtype=np.float64))
    if dc_err.size == 0:
        return 0.0, 0.0
    return float(dc_err.mean(axis=-1).mean()), float(s_err.mean(axis=-1).mean())


@dataclass
class MetricReport:
    ndcg_at_3: float | None = None
    recall_at_1: float | None = None
    recall_at_3: float | None = None
    mae_u_low: float | None = None
    mae_u_mid: float | None = None
    mae_u_high: float | None = None
    occl_dir_f1: float | None = None
    edge_exist_f1: float | None = None
    mae_centroid: float | None = None
    mae_extent: float | None = None
    mass_at_K: float | None = None
    counts: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QueryAccumulator:
    """Collects per-query ranking results so NDCG and recall share one skip rule."""

    ndcg: list[float] = field(default_factory=list)
    r1: list[float] = field(default_factory=list)
    r3: list[float] = field(default_factory=list)
    skipped: int = 0

    def add(self, relevance, scores, ids=None) -> None:
        ranking = rank_order(scores, ids)
        value = ndcg_at_k(relevance, ranking, 3)
        if value is None:
            self.skipped += 1
            return
        self.ndcg.append(value)
        self.r1.append(recall_at_k(relevance, ranking, 1))
        self.r3.append(recall_at_k(relevance, ranking, 3))

    def summary(self) -> dict:
        def mean(xs):
            return float(np.mean(xs)) if xs else None

        return {
            "ndcg_at_3": mean(self.ndcg),
            "recall_at_1": mean(self.r1),
            "recall_at_3": mean(self.r3),
            "queries": len(self.ndcg),
            "skipped": self.skipped,
        }
