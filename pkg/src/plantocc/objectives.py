"""Reference training objectives with analytic gradients.

Every loss returns ``LossValue(value, grads)`` where ``grads`` maps the name of
each prediction argument to d(value)/d(argument), same shape as the argument.
Empty selections give value 0 and all-zero gradients.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np

from .labels import DIRECTION_LABELS, OcclusionLabels

PROB_CLAMP = 1e-7


class LossValue(NamedTuple):
    value: float
    grads: dict[str, np.ndarray]


@dataclass(frozen=True)
class LossConfig:
    beta: float = 4.0
    lambda_union: float = 1.0
    lambda_pot: float = 1.0
    lambda_rank: float = 1.0
    lambda_cons: float = 1.0
    eps_pot: float = 0.02
    tau_union: float = 0.5
    gamma: float = 1.0
    epsilon: float = 1e-8
    smooth_l1_delta: float = 1.0
    pot_negative_ratio: float = 1.0
    pot_selection_seed: int = 0

    def __post_init__(self):
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        for name in ("lambda_union", "lambda_pot", "lambda_rank", "lambda_cons"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.smooth_l1_delta <= 0:
            raise ValueError("smooth_l1_delta must be positive")

    @property
    def lambdas(self) -> dict[str, float]:
        return {
            "union": self.lambda_union,
            "pot": self.lambda_pot,
            "rank": self.lambda_rank,
            "cons": self.lambda_cons,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**data)


def clamp_probs(p) -> tuple[np.ndarray, np.ndarray]:
    """Clamp to [1e-7, 1 - 1e-7]; returns (clamped, active mask for gradients)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    clamped = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return clamped, clamped == p


def _mask(mask, shape) -> np.ndarray:
    return np.ones(shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), shape)


def _bce(target, prob, weight, name: str) -> LossValue:
    """Mean of weighted BCE over entries where ``weight`` > 0 counts as selected."""
    q, active = clamp_probs(prob)
    target = np.asarray(target, dtype=np.float64)
    sel = weight > 0
    n = int(sel.sum())
    if n == 0:
        return LossValue(0.0, {name: np.zeros_like(q)})
    terms = -(target * np.log(q) + (1.0 - target) * np.log1p(-q))
    value = float(terms[sel].sum() / n)
    grad = np.where(sel & active, -(target / q - (1.0 - target) / (1.0 - q)) / n, 0.0)
    return LossValue(value, {name: grad})


# ---------------------------------------------------------------------------
# scene-graph objectives
# ---------------------------------------------------------------------------


def node_ce(y, p_hat) -> LossValue:
    """Cross-entropy over nodes; ``y`` one-hot (V, C), ``p_hat`` probabilities (V, C)."""
    y = np.asarray(y, dtype=np.float64)
    q, active = clamp_probs(p_hat)
    n = len(q)
    if n == 0:
        return LossValue(0.0, {"p_hat": np.zeros_like(q)})
    value = float(-(y * np.log(q)).sum() / n)
    return LossValue(value, {"p_hat": np.where(active, -y / q / n, 0.0)})


def edge_exist_wbce(y, e_hat, beta: float) -> LossValue:
    y = np.asarray(y, dtype=np.float64)
    q, active = clamp_probs(e_hat)
    n = q.size
    if n == 0:
        return LossValue(0.0, {"e_hat": np.zeros_like(q)})
    value = float(-(beta * y * np.log(q) + (1.0 - y) * np.log1p(-q)).sum() / n)
    grad = -(beta * y / q - (1.0 - y) / (1.0 - q)) / n
    return LossValue(value, {"e_hat": np.where(active, grad, 0.0)})


def relation_ce(positive, y, r_hat) -> LossValue:
    """Relation-type cross-entropy averaged over positive edges only."""
    y = np.asarray(y, dtype=np.float64)
    q, active = clamp_probs(r_hat)
    pos = np.asarray(positive, dtype=bool)
    n = int(pos.sum())
    if n == 0:
        return LossValue(0.0, {"r_hat": np.zeros_like(q)})
    sel = pos[:, None]
    value = float(-(np.where(sel, y * np.log(q), 0.0)).sum() / n)
    return LossValue(value, {"r_hat": np.where(sel & active, -y / q / n, 0.0)})


def smooth_l1(x, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise value and derivative: 0.5 x^2 / delta inside |x| < delta, |x| - delta/2 outside."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    inner = ax < delta
    value = np.where(inner, 0.5 * x**2 / delta, ax - 0.5 * delta)
    grad = np.where(inner, x / delta, np.sign(x))
    return value, grad


def geom_smooth_l1(dc_hat, dc, s_hat, s, delta: float = 1.0) -> LossValue:
    """Per node: summed Smooth L1 over centroid-offset and extent components; mean over nodes."""
    dc_hat = np.asarray(dc_hat, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    n = len(dc_hat)
    if n == 0:
        return LossValue(0.0, {"dc_hat": np.zeros_like(dc_hat), "s_hat": np.zeros_like(s_hat)})
    vc, gc = smooth_l1(dc_hat - np.asarray(dc), delta)
    vs, gs = smooth_l1(s_hat - np.asarray(s), delta)
    return LossValue(float((vc.sum() + vs.sum()) / n), {"dc_hat": gc / n, "s_hat": gs / n})


# ---------------------------------------------------------------------------
# occlusion objectives; arrays are (F, K) per direction and (F, K, J) per leaf
# ---------------------------------------------------------------------------


@dataclass
class OcclusionArrays:
    """Dense view of labels: padded leaf axis with ``leaf_mask`` (F, J)."""

    fruit_ids: list[int]
    leaf_ids: list[list[int]]
    o: np.ndarray
    p: np.ndarray
    e: np.ndarray
    m: np.ndarray
    t: np.ndarray
    leaf_mask: np.ndarray

    @classmethod
    def from_labels(cls, labels: OcclusionLabels) -> "OcclusionArrays":
        fruit_ids = sorted(labels.fruits)
        leaf_ids = [sorted(next(iter(labels.fruits[f].values())).leaves) if labels.fruits[f] else [] for f in fruit_ids]
        F, K = len(fruit_ids), len(DIRECTION_LABELS)
        J = max((len(ls) for ls in leaf_ids), default=0)
        o = np.zeros((F, K))
        p, e, m, t = (np.zeros((F, K, J)) for _ in range(4))
        mask = np.zeros((F, J), dtype=bool)
        for a, fid in enumerate(fruit_ids):
            mask[a, : len(leaf_ids[a])] = True
            for k, key in enumerate(DIRECTION_LABELS):
                dl = labels.fruits[fid][key]
                o[a, k] = dl.union
                for b, j in enumerate(leaf_ids[a]):
                    lt = dl.leaves[j]
                    p[a, k, b], e[a, k, b], m[a, k, b], t[a, k, b] = lt.pot, lt.excl, lt.mass, lt.rank_t
        return cls(fruit_ids, leaf_ids, o, p, e, m, t, mask)

    @property
    def leaf_mask3(self) -> np.ndarray:
        return np.broadcast_to(self.leaf_mask[:, None, :], self.p.shape)


def union_bce(o, u_hat, mask=None) -> LossValue:
    """BCE of predicted union against soft targets, averaged over (fruit, direction)."""
    q = np.asarray(u_hat, dtype=np.float64)
    weight = _mask(mask, q.shape).astype(np.float64)
    return _bce(o, q, weight, "u_hat")


def gate_potentials(p, eps_pot: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p * (p >= eps_pot)


def potential_selection(o, leaf_mask3, eps_pot: float, negative_ratio: float = 1.0, seed: int = 0) -> np.ndarray:
    """Leaves on directions with union >= eps_pot, plus sampled negatives from the other directions.

    The number of negatives is ``negative_ratio`` times the number of positives,
    capped by availability; sampling is seeded.
    """
    o = np.asarray(o, dtype=np.float64)
    valid = np.asarray(leaf_mask3, dtype=bool)
    informative = (o >= eps_pot)[..., None] & valid
    pool = np.flatnonzero((~informative & valid).ravel())
    n_neg = min(len(pool), int(round(negative_ratio * informative.sum())))
    sel = informative.ravel().copy()
    if n_neg:
        rng = np.random.default_rng(seed)
        sel[rng.choice(pool, size=n_neg, replace=False)] = True
    return sel.reshape(valid.shape)


def potential_gated_bce(p, s_hat, eps_pot: float, selection) -> LossValue:
    """BCE against eps-gated potentials over the selected (fruit, direction, leaf) entries."""
    q = np.asarray(s_hat, dtype=np.float64)
    sel = np.asarray(selection, dtype=bool)
    return _bce(gate_potentials(p, eps_pot), q, sel.astype(np.float64), "s_hat")


def rank_targets_and_set(m, o, tau_union: float, epsilon: float, leaf_mask3=None) -> tuple[np.ndarray, np.ndarray]:
    """Normalized rank targets and the supervised (fruit, direction) set.

    ``m`` must already be the gated, exponentiated graded mass.
    """
    m = np.asarray(m, dtype=np.float64) * _mask(leaf_mask3, np.shape(m))
    total = m.sum(axis=-1)
    t = m / (total[..., None] + epsilon)
    s_rank = (np.asarray(o) >= tau_union) & (total > 0)
    return t, s_rank


def _masked_log_softmax(z, valid) -> tuple[np.ndarray, np.ndarray]:
    z = np.where(valid, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    ex = np.where(valid, np.exp(z - zmax), 0.0)
    denom = ex.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    log_r = np.where(valid, z - zmax - np.log(safe), 0.0)
    return log_r, ex / safe


def listwise_rank_loss(t, z, s_rank, leaf_mask3=None) -> LossValue:
    """-mean over supervised queries of sum_j t log softmax_j(z)."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    valid = _mask(leaf_mask3, z.shape)
    sel = np.asarray(s_rank, dtype=bool)
    n = int(sel.sum())
    if n == 0:
        return LossValue(0.0, {"z": np.zeros_like(z)})
    log_r, r = _masked_log_softmax(z, valid)
    per_query = -(t * log_r).sum(axis=-1)
    value = float(per_query[sel].sum() / n)
    grad = (r * t.sum(axis=-1, keepdims=True) - t) / n
    grad = np.where(sel[..., None] & valid, grad, 0.0)
    return LossValue(value, {"z": grad})


def noisy_or(s_gated, axis: int = -1) -> np.ndarray:
    return 1.0 - np.prod(1.0 - np.asarray(s_gated, dtype=np.float64), axis=axis)


def _prod_except(x, axis=-1) -> np.ndarray:
    """Product over ``axis`` excluding each element, without division."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    ones = np.ones(x.shape[:-1] + (1,))
    prefix = np.cumprod(np.concatenate([ones, x[..., :-1]], axis=-1), axis=-1)
    suffix = np.cumprod(np.concatenate([ones, x[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return np.moveaxis(prefix * suffix, -1, axis)


def consistency_set(p, o, eps_pot: float, tau_union: float, leaf_mask3=None) -> np.ndarray:
    gate = (np.asarray(p) >= eps_pot) & _mask(leaf_mask3, np.shape(p))
    return (np.asarray(o) >= tau_union) & gate.any(axis=-1)


def noisy_or_consistency(s_hat, p, o, eps_pot: float, tau_union: float, leaf_mask3=None) -> LossValue:
    """Squared error between the noisy-OR of gated potentials and the union target."""
    s = np.asarray(s_hat, dtype=np.float64)
    gate = ((np.asarray(p) >= eps_pot) & _mask(leaf_mask3, s.shape)).astype(np.float64)
    sel = consistency_set(p, o, eps_pot, tau_union, leaf_mask3)
    n = int(sel.sum())
    if n == 0:
        return LossValue(0.0, {"s_hat": np.zeros_like(s)})
    keep = 1.0 - s * gate
    u_cons = 1.0 - np.prod(keep, axis=-1)
    resid = u_cons - np.asarray(o, dtype=np.float64)
    value = float((resid[sel] ** 2).sum() / n)
    grad = (2.0 * resid / n)[..., None] * gate * _prod_except(keep)
    return LossValue(value, {"s_hat": np.where(sel[..., None], grad, 0.0)})


def total_occlusion_loss(components: dict[str, LossValue], lambdas: dict[str, float]) -> LossValue:
    """Weighted sum of component losses; gradients combine with the same weights."""
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, comp in components.items():
        w = float(lambdas.get(name, 0.0))
        value += w * comp.value
        for arg, g in comp.grads.items():
            grads[arg] = grads[arg] + w * g if arg in grads else w * g
    return LossValue(value, grads)


def occlusion_losses(arrays: OcclusionArrays, u_hat, s_hat, z, config: LossConfig) -> dict[str, LossValue]:
    """All four occlusion components against one label set."""
    mask3 = arrays.leaf_mask3
    selection = potential_selection(
        arrays.o, mask3, config.eps_pot, config.pot_negative_ratio, config.pot_selection_seed
    )
    t, s_rank = rank_targets_and_set(arrays.m, arrays.o, config.tau_union, config.epsilon, mask3)
    return {
        "union": union_bce(arrays.o, u_hat),
        "pot": potential_gated_bce(arrays.p, s_hat, config.eps_pot, selection & mask3),
        "rank": listwise_rank_loss(t, z, s_rank, mask3),
        "cons": noisy_or_consistency(s_hat, arrays.p, arrays.o, config.eps_pot, config.tau_union, mask3),
    }


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_difference(fn: Callable[[np.ndarray], float], x, step=1e-5) -> np.ndarray:
    """Central differences; ``step`` may be an array, and entries with step 0 get gradient 0."""
    x = np.array(x, dtype=np.float64)
    steps = np.broadcast_to(np.asarray(step, dtype=np.float64), x.shape).reshape(-1)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        h = steps[i]
        if h <= 0:
            continue
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 0.0) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    ``floor`` keeps the ratio meaningful at stationary points, where both
    gradients vanish and only finite-difference round-off remains.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def probability_steps(q, step: float = 1e-5, rel: float = 1e-4) -> np.ndarray:
    """Per-entry steps that stay strictly inside the clamp interval; 0 at the clamp bounds."""
    q = np.asarray(q, dtype=np.float64)
    room = np.minimum(q - PROB_CLAMP, 1.0 - PROB_CLAMP - q)
    return np.where(room > 0, np.minimum(step, rel * room), 0.0)


def check_gradient(loss_fn: Callable[..., LossValue], kwargs: dict, wrt: str, step: float = 1e-5,
                   probability: bool = False, floor: float = 0.0) -> float:
    """Relative error between the analytic gradient of ``wrt`` and central differences.

    With ``probability`` the step shrinks near the clamp bounds so differences
    never straddle the clamp kink.
    """
    analytic = loss_fn(**kwargs).grads[wrt]

    def f(x):
        return loss_fn(**{**kwargs, wrt: x}).value

    h = probability_steps(kwargs[wrt], step) if probability else step
    return relative_error(analytic, finite_difference(f, kwargs[wrt], h), floor)
