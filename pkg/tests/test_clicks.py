import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clickdet.clicks import (
    Click,
    ClickSet,
    DEFAULT_TAU,
    NEGATIVE,
    POSITIVE,
    encode_click,
    encode_click_set,
    encode_for_stage,
    pool_classwise,
    sample_click_in_box,
    simulate_positive_clicks,
)
from clickdet.scenes import GtBox

from conftest import small_scene_config
from clickdet.scenes import generate_scene


def grid_coords(n=64, extent=6.0):
    side = int(math.sqrt(n))
    xs = np.linspace(-extent, extent, side)
    g = np.stack(np.meshgrid(xs, xs), axis=-1).reshape(-1, 2)
    return g


# ---------------------------------------------------------------------------
# Click / ClickSet data model
# ---------------------------------------------------------------------------

def test_positive_needs_class():
    with pytest.raises(ValueError):
        Click(0.0, 0.0, POSITIVE)


def test_negative_is_class_agnostic():
    with pytest.raises(ValueError):
        Click(0.0, 0.0, NEGATIVE, class_id=1)


def test_click_rejects_nonfinite():
    with pytest.raises(ValueError):
        Click(float("nan"), 0.0, NEGATIVE)


def test_clickset_counts_and_order():
    cs = ClickSet([Click(0, 0, POSITIVE, 1), Click(1, 1, NEGATIVE), Click(2, 2, POSITIVE, 2)])
    assert len(cs) == 3
    assert cs.n_positive == 2
    assert cs.n_negative == 1
    assert cs.n_positive + cs.n_negative == len(cs)
    assert [c.kind for c in cs] == [POSITIVE, NEGATIVE, POSITIVE]


def test_clickset_add_and_undo_are_inverse():
    cs = ClickSet([Click(0, 0, POSITIVE, 1)])
    extended = cs.add(Click(1, 1, NEGATIVE))
    assert extended.without_last() == cs
    with pytest.raises(ValueError):
        ClickSet().without_last()


def test_wire_roundtrip():
    cs = ClickSet([Click(0.5, -1.25, POSITIVE, 2), Click(3.0, 4.0, NEGATIVE)])
    wire = cs.to_wire()
    assert wire[0] == {"k": 0, "kind": "pos", "x": 0.5, "y": -1.25, "class": 2}
    assert wire[1] == {"k": 1, "kind": "neg", "x": 3.0, "y": 4.0}
    assert ClickSet.from_wire(wire) == cs


def test_wire_rejects_malformed():
    with pytest.raises(ValueError):
        Click.from_wire({"kind": "pos", "x": 1.0})
    with pytest.raises(ValueError):
        Click.from_wire({"kind": "maybe", "x": 1.0, "y": 2.0})
    with pytest.raises(ValueError):
        Click.from_wire({"kind": "neg", "x": "a", "y": 2.0})


# ---------------------------------------------------------------------------
# Distance encoding
# ---------------------------------------------------------------------------

def test_boundary_values():
    coords = np.array([[0.0, 0.0], [DEFAULT_TAU, 0.0], [1.0, 0.0], [3.5, 0.0]])
    e = encode_click(Click(0, 0, POSITIVE, 1), coords, DEFAULT_TAU)
    assert e[0] == pytest.approx(1.0, abs=1e-12)          # exp(ln 2) - 1
    assert e[1] == pytest.approx(0.0, abs=1e-12)          # exp(0) - 1
    assert e[2] == pytest.approx(math.sqrt(2) - 1, abs=1e-12)  # independent scalar eval
    assert e[3] == 0.0


def test_default_tau_is_two():
    assert DEFAULT_TAU == 2.0


def test_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        encode_click(Click(0, 0, POSITIVE, 1), np.zeros((3, 2)), 0.0)
    with pytest.raises(ValueError):
        encode_click(Click(0, 0, POSITIVE, 1), np.zeros((3, 2)), -1.0)


@settings(max_examples=100, deadline=None)
@given(
    px=st.floats(-5, 5),
    py=st.floats(-5, 5),
    tau=st.floats(0.1, 10.0),
)
def test_encoding_range_and_support(px, py, tau):
    coords = grid_coords()
    e = encode_click((px, py), coords, tau)
    assert np.all(e >= 0.0) and np.all(e <= 1.0)
    d = np.hypot(coords[:, 0] - px, coords[:, 1] - py)
    assert np.all(e[d >= tau] == 0.0)
    assert np.all(e[d < tau] > 0.0)


@settings(max_examples=60, deadline=None)
@given(d1=st.floats(0.0, 1.99), delta=st.floats(0.001, 2.0))
def test_encoding_strictly_decreasing(d1, delta):
    d2 = min(d1 + delta, 2.0)
    coords = np.array([[d1, 0.0], [d2, 0.0]])
    e = encode_click((0.0, 0.0), coords, 2.0)
    assert e[0] > e[1]


# ---------------------------------------------------------------------------
# Class-wise pooling
# ---------------------------------------------------------------------------

def test_single_click_single_channel():
    e = np.array([0.3, 0.0, 0.9])
    pooled = pool_classwise([(e, 2)], class_count=3)
    assert np.array_equal(pooled[1], e)
    assert np.all(pooled[0] == 0) and np.all(pooled[2] == 0) and np.all(pooled[3] == 0)


def test_elementwise_max():
    pooled = pool_classwise([(np.array([0.5, 0.2]), 1), (np.array([0.3, 0.9]), 1)], class_count=1)
    assert np.array_equal(pooled[0], [0.5, 0.9])


def test_negative_channel_separation():
    pos = np.array([0.8, 0.1])
    neg = np.array([0.2, 0.9])
    pooled = pool_classwise([(pos, 1), (neg, None)], class_count=2)
    assert np.array_equal(pooled[0], pos)
    assert np.all(pooled[1] == 0)
    assert np.array_equal(pooled[2], neg)


def test_pool_rejects_out_of_range_class():
    with pytest.raises(ValueError):
        pool_classwise([(np.zeros(3), 4)], class_count=3)
    with pytest.raises(ValueError):
        pool_classwise([(np.zeros(3), 0)], class_count=3)


def test_pool_idempotent_and_permutation_invariant():
    rng = np.random.default_rng(0)
    encs = [(rng.uniform(0, 1, 16), int(c)) for c in rng.integers(1, 4, size=6)]
    pooled = pool_classwise(encs, class_count=3)
    again = pool_classwise([(pooled[c], c + 1) for c in range(3)], class_count=3)
    assert np.array_equal(again[:3], pooled[:3])
    perm = [encs[i] for i in rng.permutation(len(encs))]
    assert np.array_equal(pool_classwise(perm, class_count=3), pooled)


def test_adding_click_monotone():
    rng = np.random.default_rng(1)
    coords = grid_coords()
    clicks = [Click(float(rng.uniform(-4, 4)), float(rng.uniform(-4, 4)), POSITIVE, 1) for _ in range(4)]
    prev = np.zeros(len(coords))
    for k in range(1, len(clicks) + 1):
        enc = encode_click_set(ClickSet(clicks[:k]), coords, 2.0, class_count=1)
        cur = enc.classwise[0]
        assert np.all(cur >= prev - 1e-15)
        prev = cur


# ---------------------------------------------------------------------------
# Stage encoding
# ---------------------------------------------------------------------------

def test_stage_encoding_matches_full():
    coords = grid_coords()
    cs = ClickSet([Click(0.2, 0.1, POSITIVE, 2), Click(-1.0, 1.0, NEGATIVE)])
    full = encode_click_set(cs, coords, 2.0, class_count=3)
    stage = encode_for_stage(cs, coords, 2.0, class_count=3, include_negative=True)
    assert stage.shape == (len(coords), 4)
    assert np.array_equal(stage, full.classwise.T)
    no_neg = encode_for_stage(cs, coords, 2.0, class_count=3, include_negative=False)
    assert no_neg.shape == (len(coords), 3)
    assert np.array_equal(no_neg, full.classwise[:3].T)


def test_stage_encoding_empty_clicks_zero():
    coords = grid_coords()
    stage = encode_for_stage(ClickSet(), coords, 2.0, class_count=3)
    assert stage.shape == (len(coords), 3)
    assert np.all(stage == 0.0)


def test_stage_encoding_outside_support_zero():
    # downsampled coords all farther than tau from the click
    coords = np.array([[10.0, 10.0], [12.0, -3.0]])
    stage = encode_for_stage(ClickSet([Click(0, 0, POSITIVE, 1)]), coords, 2.0, class_count=1)
    assert np.all(stage == 0.0)


# ---------------------------------------------------------------------------
# Positive click simulation
# ---------------------------------------------------------------------------

def oracle_in_footprint(x, y, box):
    dx, dy = x - box.cx, y - box.cy
    u = math.cos(-box.yaw) * dx - math.sin(-box.yaw) * dy
    v = math.sin(-box.yaw) * dx + math.cos(-box.yaw) * dy
    return abs(u) <= box.l / 2 + 1e-9 and abs(v) <= box.w / 2 + 1e-9


def test_simulated_click_count_min_rule():
    cfg = small_scene_config(object_counts=((3, 3), (0, 0), (0, 0)), clutter_count=(0, 0))
    scene = generate_scene(cfg, 7)
    assert len(scene.boxes) == 3
    rng = np.random.default_rng(0)
    counts = set()
    for _ in range(200):
        cs = simulate_positive_clicks(scene, 10, rng)
        counts.add(len(cs))
        assert len(cs) <= 3  # min(N_u, N_o) can never exceed N_o
    assert counts == {0, 1, 2, 3}


def test_simulated_clicks_empty_scene():
    cfg = small_scene_config(object_counts=((0, 0), (0, 0), (0, 0)), clutter_count=(0, 0))
    scene = generate_scene(cfg, 0)
    cs = simulate_positive_clicks(scene, 10, np.random.default_rng(1))
    assert len(cs) == 0


def test_simulated_clicks_land_in_their_box():
    box = GtBox(cx=2.0, cy=-1.0, cz=0.9, l=4.0, w=1.8, h=1.8, yaw=0.7, class_id=1)
    rng = np.random.default_rng(2)
    for _ in range(1000):
        c = sample_click_in_box(box, rng)
        assert c.class_id == 1
        assert oracle_in_footprint(c.x, c.y, box)


def test_simulated_clicks_distinct_targets_with_classes():
    cfg = small_scene_config(object_counts=((2, 2), (2, 2), (0, 0)), clutter_count=(0, 0))
    scene = generate_scene(cfg, 5)
    rng = np.random.default_rng(3)
    for _ in range(50):
        cs = simulate_positive_clicks(scene, 10, rng)
        # every click lies in at least one gt footprint of its class
        for c in cs:
            assert any(
                oracle_in_footprint(c.x, c.y, b) and b.class_id == c.class_id
                for b in scene.boxes
            )
