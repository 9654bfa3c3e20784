import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcases import CASES, masked_entries
from plantocc import objectives as ob
from plantocc.labels import label_scene
from plantocc.scene import GenerationConfig, generate_scene


# --- worked examples --------------------------------------------------------


def test_node_ce_uniform_prediction():
    y = np.eye(4)[[2]]
    assert ob.node_ce(y, np.full((1, 4), 0.25)).value == pytest.approx(math.log(4))


def test_edge_wbce_weighted_positive():
    assert ob.edge_exist_wbce([1.0], [0.5], beta=4.0).value == pytest.approx(4 * math.log(2))
    assert ob.edge_exist_wbce([0.0], [0.5], beta=4.0).value == pytest.approx(math.log(2))


def test_relation_ce_ignores_negative_edges():
    y = np.eye(3)[[0, 1]]
    r = np.array([[0.5, 0.25, 0.25], [0.01, 0.01, 0.98]])
    lv = ob.relation_ce([True, False], y, r)
    assert lv.value == pytest.approx(math.log(2))
    assert np.all(lv.grads["r_hat"][1] == 0)
    assert ob.relation_ce([False, False], y, r).value == 0.0


def test_smooth_l1_branches():
    v, g = ob.smooth_l1([0.5, 2.0, -2.0])
    assert np.allclose(v, [0.125, 1.5, 1.5]) and np.allclose(g, [0.5, 1.0, -1.0])
    v, _ = ob.smooth_l1([1.0])  # |x| == delta uses the linear branch
    assert v[0] == pytest.approx(0.5)


def test_geom_smooth_l1_sums_components_per_node():
    lv = ob.geom_smooth_l1([[0.5, 0, 0]], [[0, 0, 0]], [[2.0, 0, 0]], [[0, 0, 0]])
    assert lv.value == pytest.approx(0.125 + 1.5)


def test_union_bce_half():
    assert ob.union_bce([[0.5]], [[0.5]]).value == pytest.approx(math.log(2))


def test_rank_loss_examples():
    z = np.log([[0.7, 0.3]])
    t = np.array([[1.0, 0.0]])
    assert ob.listwise_rank_loss(t, z, [True]).value == pytest.approx(-math.log(0.7))
    assert ob.listwise_rank_loss(t, np.zeros((1, 2)), [True]).value == pytest.approx(math.log(2))
    assert ob.listwise_rank_loss(t, z, [False]).value == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_rank_loss_invariant_to_logit_shift(seed, shift):
    _, kw, _, _ = CASES["listwise_rank_loss"](np.random.default_rng(seed))
    base = ob.listwise_rank_loss(**kw)
    moved = ob.listwise_rank_loss(**{**kw, "z": kw["z"] + shift})
    assert moved.value == pytest.approx(base.value, abs=1e-9)
    assert np.allclose(moved.grads["z"], base.grads["z"], atol=1e-9)


def test_noisy_or_examples():
    assert ob.noisy_or([0.3, 0.4]) == pytest.approx(0.58)
    assert ob.noisy_or([0.5, 0.4]) == pytest.approx(0.7)
    assert ob.noisy_or(np.zeros((0,))) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.integers(0, 7), st.floats(0, 1))
def test_noisy_or_bounded_and_monotone(s, i, bump):
    s = np.array(s)
    base = ob.noisy_or(s)
    assert 0.0 <= base <= 1.0
    assert base >= s.max() - 1e-12
    up = s.copy()
    i %= len(s)
    up[i] = max(up[i], bump)
    assert ob.noisy_or(up) >= base - 1e-12


def test_gate_includes_threshold():
    assert np.array_equal(ob.gate_potentials([0.02, 0.0199, 0.5], 0.02), [0.02, 0.0, 0.5])


def test_consistency_example():
    s = np.array([[[0.3, 0.4]]])
    p = np.array([[[0.5, 0.5]]])
    lv = ob.noisy_or_consistency(s, p, np.array([[0.58]]), 0.02, 0.5)
    assert lv.value == pytest.approx(0.0, abs=1e-12)
    lv = ob.noisy_or_consistency(s, p, np.array([[0.3]]), 0.02, 0.5)  # below tau: not supervised
    assert lv.value == 0.0


def test_potential_selection_balances_negatives():
    o = np.array([[0.5, 0.0, 0.0, 0.0]])
    mask3 = np.ones((1, 4, 3), dtype=bool)
    sel = ob.potential_selection(o, mask3, 0.02, 1.0, seed=1)
    assert sel[0, 0].all() and sel.sum() == 6
    assert np.array_equal(sel, ob.potential_selection(o, mask3, 0.02, 1.0, seed=1))
    assert ob.potential_selection(o, mask3, 0.02, 0.0).sum() == 3


def test_total_loss_is_linear_in_weights():
    rng = np.random.default_rng(0)
    comps = {name: ob.LossValue(float(rng.random()), {"x": rng.normal(size=3)}) for name in "abc"}
    lam1 = {"a": 1.0, "b": 0.5, "c": 2.0}
    lam2 = {"a": 0.2, "b": 3.0, "c": 0.0}
    both = {k: lam1[k] + 2 * lam2[k] for k in lam1}
    t1, t2, tb = (ob.total_occlusion_loss(comps, lam) for lam in (lam1, lam2, both))
    assert tb.value == pytest.approx(t1.value + 2 * t2.value)
    assert np.allclose(tb.grads["x"], t1.grads["x"] + 2 * t2.grads["x"])


def test_probability_validation():
    with pytest.raises(ValueError):
        ob.union_bce([[0.5]], [[1.5]])
    with pytest.raises(ValueError):
        ob.node_ce(np.eye(2), np.array([[np.nan, 0.5], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        ob.LossConfig(beta=0.5)
    with pytest.raises(ValueError):
        ob.LossConfig.from_dict({"nope": 1})


def test_clamped_entries_have_zero_gradient():
    lv = ob.union_bce([[1.0, 0.0]], [[1.0, 0.0]])
    assert lv.value == pytest.approx(0.0, abs=1e-6)
    assert np.all(lv.grads["u_hat"] == 0.0)


# --- finite-difference gradient checks ----------------------------------------


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(15):
        fn, kw, wrt, prob = CASES[name](rng)
        assert ob.check_gradient(fn, kw, wrt, probability=prob) <= 1e-4
        grad = fn(**kw).grads[wrt]
        assert np.all(grad[masked_entries(fn, kw, wrt)] == 0.0)


def test_probability_steps_respect_bounds():
    q = np.array([ob.PROB_CLAMP, 0.5, 1 - ob.PROB_CLAMP, 2e-7])
    h = ob.probability_steps(q)
    assert h[0] == 0 and h[2] == 0 and h[1] == 1e-5
    assert q[3] - h[3] > ob.PROB_CLAMP


def test_relative_error_floor():
    assert ob.relative_error([0.0], [1e-9]) == 1.0
    assert ob.relative_error([0.0], [1e-9], floor=1e-5) == pytest.approx(1e-4)
    assert ob.relative_error([0.0], [0.0]) == 0.0


def test_occlusion_losses_on_real_labels():
    labels = label_scene(generate_scene(GenerationConfig(), 4))
    arrays = ob.OcclusionArrays.from_labels(labels)
    cfg = ob.LossConfig()
    rng = np.random.default_rng(0)
    u = rng.uniform(0.05, 0.95, arrays.o.shape)
    s = rng.uniform(0.05, 0.95, arrays.p.shape)
    z = rng.normal(size=arrays.p.shape)
    comps = ob.occlusion_losses(arrays, u, s, z, cfg)
    assert set(comps) == {"union", "pot", "rank", "cons"}
    assert all(c.value >= 0 for c in comps.values())
    total = ob.total_occlusion_loss(comps, cfg.lambdas)
    assert total.value == pytest.approx(sum(c.value for c in comps.values()))
    # padded leaves never receive gradient
    pad = ~arrays.leaf_mask3
    assert np.all(total.grads["s_hat"][pad] == 0) and np.all(total.grads["z"][pad] == 0)
