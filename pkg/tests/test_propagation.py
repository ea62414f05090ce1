import json
import math

import numpy as np
import pytest

from clickdet import autodiff as ad
from clickdet.autodiff import Tensor
from clickdet.clicks import Click, ClickSet, NEGATIVE, POSITIVE, encode_click
from clickdet.encoder import EncoderOutput, StageSpec, EncoderConfig
from clickdet.propagation import (
    NcsConfig,
    classwise_maps,
    click_prototype,
    compute_scp_maps,
    correlation_map,
    export_correlation_heatmap,
    scp_channels,
    simulate_negative_clicks,
)
from clickdet.scenes import GtBox, generate_scene

from conftest import small_scene_config


def fake_enc(coords, scores, features=None):
    """EncoderOutput stub with fixed scores (NCS needs only coords+scores)."""
    n = len(coords)
    feats = Tensor(features if features is not None else np.zeros((n, 4)))
    s = Tensor(np.asarray(scores, dtype=np.float64).reshape(-1, 1))
    return EncoderOutput(
        coords=np.asarray(coords, dtype=np.float64),
        features=feats,
        fg_scores=s,
        kept_indices=(),
        stage_scores=(),
    )


def gt(cx=0.0, cy=0.0, cz=0.5, l=2.0, w=1.0, h=1.0, yaw=0.0, class_id=1):
    return GtBox(cx=cx, cy=cy, cz=cz, l=l, w=w, h=h, yaw=yaw, class_id=class_id)


# ---------------------------------------------------------------------------
# Negative click simulation
# ---------------------------------------------------------------------------

def test_ncs_picks_top_scored_background():
    coords = np.array([
        [5.0, 5.0, 0.0],    # bg, 0.9
        [0.0, 0.0, 0.5],    # inside gt, 0.8
        [6.0, -4.0, 0.0],   # bg, 0.7
        [-7.0, 2.0, 0.0],   # bg, 0.2
    ])
    enc = fake_enc(coords, [0.9, 0.8, 0.7, 0.2])
    negs = simulate_negative_clicks(enc, [gt()], NcsConfig(k_n_max=10), np.random.default_rng(0), k_n=2)
    assert len(negs) == 2
    assert {(c.x, c.y) for c in negs} == {(5.0, 5.0), (6.0, -4.0)}
    assert all(c.kind == NEGATIVE for c in negs)


def test_ncs_empty_when_fully_covered():
    coords = np.array([[0.0, 0.0, 0.5], [0.1, 0.1, 0.5]])
    enc = fake_enc(coords, [0.9, 0.8])
    negs = simulate_negative_clicks(enc, [gt()], NcsConfig(), np.random.default_rng(0), k_n=5)
    assert negs == []


def test_ncs_respects_min_score():
    coords = np.array([[5.0, 5.0, 0.0], [6.0, 6.0, 0.0]])
    enc = fake_enc(coords, [0.9, 0.4])
    cfg = NcsConfig(k_n_max=10, min_fg_score=0.5)
    negs = simulate_negative_clicks(enc, [], cfg, np.random.default_rng(0), k_n=5)
    assert len(negs) == 1 and negs[0].x == 5.0


def test_ncs_deterministic_tie_break():
    coords = np.array([[float(i), 0.0, 0.0] for i in range(6)])
    enc = fake_enc(coords, [0.5] * 6)
    a = simulate_negative_clicks(enc, [], NcsConfig(), np.random.default_rng(7), k_n=3)
    b = simulate_negative_clicks(enc, [], NcsConfig(), np.random.default_rng(7), k_n=3)
    assert [(c.x, c.y) for c in a] == [(c.x, c.y) for c in b]


def test_ncs_draws_k_when_unspecified():
    coords = np.array([[float(i), 5.0, 0.0] for i in range(40)])
    enc = fake_enc(coords, np.linspace(1, 0, 40))
    seen = set()
    rng = np.random.default_rng(1)
    for _ in range(100):
        seen.add(len(simulate_negative_clicks(enc, [], NcsConfig(k_n_max=10), rng)))
    assert seen == set(range(11))


def test_ncs_soundness_over_generated_scenes():
    # Negatives must lie outside every box and dominate non-selected
    # candidates by score (verified against brute-force membership).
    cfg = small_scene_config()
    rng = np.random.default_rng(3)
    checked = 0
    for seed in range(120):
        scene = generate_scene(cfg, 5000 + seed)
        n = min(scene.n_points, 64)
        idx = rng.choice(scene.n_points, size=n, replace=False)
        coords = scene.xyz[idx].astype(np.float64)
        scores = rng.uniform(size=n)
        enc = fake_enc(coords, scores)
        negs = simulate_negative_clicks(enc, scene.boxes, NcsConfig(), rng, k_n=5)
        from clickdet import geometry
        outside = ~geometry.points_in_any_box_mask(coords, scene.boxes)
        selected_scores = []
        for c in negs:
            i = int(np.argmin(np.hypot(coords[:, 0] - c.x, coords[:, 1] - c.y)))
            assert outside[i]
            for b in scene.boxes:
                assert not geometry.point_in_box((c.x, c.y, coords[i, 2]), b, atol=0.0)
            selected_scores.append(scores[i])
        if selected_scores:
            not_selected = sorted(
                scores[outside], reverse=True
            )[len(selected_scores):]
            if not_selected:
                assert min(selected_scores) >= max(not_selected) - 1e-12
            checked += 1
    assert checked > 50


# ---------------------------------------------------------------------------
# Click prototypes (weighted feature sums)
# ---------------------------------------------------------------------------

def test_prototype_one_hot_weight_selects_row():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(5, 4))
    e = np.zeros(5)
    e[3] = 0.7
    p, ok = click_prototype(f, e)
    assert ok
    assert np.allclose(p, f[3], atol=1e-12)


def test_prototype_uniform_weights_average():
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    p, ok = click_prototype(f, np.array([0.5, 0.5]))
    assert ok
    assert np.allclose(p, [0.5, 0.5], atol=1e-12)


def test_prototype_zero_support_invalid():
    f = np.ones((3, 2))
    p, ok = click_prototype(f, np.zeros(3))
    assert not ok and p is None


def test_prototype_in_convex_hull():
    # brute-force hull membership via scipy on random 2D embeddings
    from scipy.spatial import Delaunay

    rng = np.random.default_rng(1)
    for _ in range(25):
        f = rng.normal(size=(8, 2))
        e = rng.uniform(0.01, 1.0, size=8)
        p, ok = click_prototype(f, e)
        assert ok
        hull = Delaunay(f)
        assert hull.find_simplex(p) >= 0


# ---------------------------------------------------------------------------
# Correlation maps
# ---------------------------------------------------------------------------

def test_correlation_self_orthogonal_negated():
    f = np.array([[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]])
    m = correlation_map(f, np.array([1.0, 0.0]))
    assert m[0] == pytest.approx(1.0, abs=1e-12)
    assert m[1] == pytest.approx(0.0, abs=1e-12)
    assert m[2] == pytest.approx(-1.0, abs=1e-12)


def test_correlation_scale_invariance():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(10, 6))
    p = rng.normal(size=6)
    base = correlation_map(f, p)
    for alpha in (1e-3, 0.5, 7.0, 1e4):
        assert np.allclose(correlation_map(f, alpha * p), base, atol=1e-12)


def test_correlation_bounds():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(50, 8))
    p = rng.normal(size=8)
    m = correlation_map(f, p)
    assert np.all(np.abs(m) <= 1.0 + 1e-12)


def test_classwise_maps_single_click():
    m1 = np.array([0.5, -0.2, 0.9])
    s = classwise_maps([(m1, 1)], class_count=3)
    assert np.array_equal(s[0], m1)
    assert np.all(s[1] == 0) and np.all(s[2] == 0) and np.all(s[3] == 0)


def test_classwise_maps_max_and_negative_separation():
    a = np.array([0.5, -0.4])
    b = np.array([0.3, 0.8])
    neg = np.array([0.9, 0.9])
    s = classwise_maps([(a, 1), (b, 1), (neg, None)], class_count=2)
    assert np.array_equal(s[0], np.maximum(a, b))
    assert np.all(s[1] == 0)
    assert np.array_equal(s[2], neg)


def test_classwise_maps_permutation_invariant_idempotent():
    rng = np.random.default_rng(4)
    maps = [(rng.uniform(-1, 1, 12), int(c)) for c in rng.integers(1, 4, size=5)]
    s = classwise_maps(maps, class_count=3)
    perm = [maps[i] for i in rng.permutation(len(maps))]
    assert np.array_equal(classwise_maps(perm, class_count=3), s)
    again = classwise_maps([(s[c], c + 1) for c in range(3)], class_count=3)
    assert np.array_equal(again[:3], s[:3])


# ---------------------------------------------------------------------------
# Differentiable channel assembly
# ---------------------------------------------------------------------------

def test_scp_channels_match_numpy_maps():
    rng = np.random.default_rng(5)
    coords = rng.uniform(-4, 4, size=(30, 3))
    feats = rng.normal(size=(30, 6))
    clicks = ClickSet([
        Click(coords[3, 0], coords[3, 1], POSITIVE, 1),
        Click(coords[10, 0], coords[10, 1], POSITIVE, 2),
        Click(coords[20, 0], coords[20, 1], NEGATIVE),
    ])
    t = scp_channels(Tensor(feats), clicks, coords, 2.0, class_count=3)
    enc = fake_enc(coords, np.zeros(30), features=feats)
    maps = compute_scp_maps(enc, clicks, 2.0, class_count=3)
    assert t.shape == (30, 4)
    assert np.allclose(t.data, maps.classwise.T, atol=1e-12)


def test_scp_channels_gradient_flows():
    rng = np.random.default_rng(6)
    coords = rng.uniform(-2, 2, size=(12, 3))
    feats = Tensor(rng.normal(size=(12, 4)), requires_grad=True)
    clicks = ClickSet([Click(coords[0, 0], coords[0, 1], POSITIVE, 1)])
    t = scp_channels(feats, clicks, coords, 2.0, class_count=1)
    loss = ad.mean_all(t)
    ad.backward(loss)
    assert feats.grad is not None
    assert np.abs(feats.grad).sum() > 0


def test_scp_invalid_click_contributes_nothing():
    rng = np.random.default_rng(7)
    coords = rng.uniform(-2, 2, size=(10, 3))
    feats = rng.normal(size=(10, 4))
    # click far outside the tau-disk of every point
    clicks = ClickSet([Click(50.0, 50.0, POSITIVE, 1)])
    t = scp_channels(Tensor(feats), clicks, coords, 2.0, class_count=2)
    assert np.all(t.data == 0.0)
    maps = compute_scp_maps(fake_enc(coords, np.zeros(10), features=feats), clicks, 2.0, 2)
    assert not maps.valid[0]
    assert np.all(maps.classwise == 0.0)


def test_scp_twin_objects_light_up(mini_trained):
    # A click on one of two identical objects should raise the channel on
    # the twin's points above the background level.
    est, _ = mini_trained
    from clickdet.detector import forward_scene
    from clickdet.scenes import Scene
    from clickdet import geometry

    rng = np.random.default_rng(8)
    box_a = gt(cx=-5.0, cy=-5.0, cz=0.8, l=4.0, w=1.8, h=1.6, yaw=0.4, class_id=1)
    box_b = gt(cx=5.0, cy=5.0, cz=0.8, l=4.0, w=1.8, h=1.6, yaw=0.4, class_id=1)

    def box_surface(b, n):
        u = rng.uniform(-0.5, 0.5, size=(n, 3))
        face = rng.integers(0, 3, size=n)
        for i in range(n):
            u[i, face[i]] = 0.5 * np.sign(u[i, face[i]] if u[i, face[i]] != 0 else 1.0)
        local = u * np.array([b.l, b.w, b.h])
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        out = np.empty_like(local)
        out[:, 0] = c * local[:, 0] - s * local[:, 1] + b.cx
        out[:, 1] = s * local[:, 0] + c * local[:, 1] + b.cy
        out[:, 2] = local[:, 2] + b.cz
        return out

    ground = np.column_stack([
        rng.uniform(-10, 10, 400), rng.uniform(-10, 10, 400), rng.normal(0, 0.03, 400)
    ])
    xyz = np.vstack([ground, box_surface(box_a, 120), box_surface(box_b, 120)])
    pts = np.hstack([xyz, rng.uniform(0, 1, size=(len(xyz), 1))]).astype(np.float32)
    scene = Scene(scene_id="twin", points=pts, boxes=(box_a, box_b), class_count=3, seed=0)

    clicks = ClickSet([Click(box_a.cx, box_a.cy, POSITIVE, 1)])
    out = forward_scene(est.net_, scene, clicks, training=False)
    maps = compute_scp_maps(out.enc, clicks, est.net_.cfg.tau, 3)
    channel = maps.classwise[0]
    in_b = geometry.points_in_box_mask(out.enc.coords, box_b)
    in_any = geometry.points_in_any_box_mask(out.enc.coords, (box_a, box_b))
    if in_b.any() and (~in_any).any():
        assert channel[in_b].mean() > channel[~in_any].mean()


# ---------------------------------------------------------------------------
# Heatmap export
# ---------------------------------------------------------------------------

def test_export_heatmap_files_and_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    coords = rng.uniform(-5, 5, size=(40, 3))
    feats = rng.normal(size=(40, 4))
    clicks = ClickSet([Click(coords[0, 0], coords[0, 1], POSITIVE, 1)])
    enc = fake_enc(coords, np.zeros(40), features=feats)
    maps = compute_scp_maps(enc, clicks, 2.0, class_count=2)
    scene = generate_scene(small_scene_config(), 0)
    written = export_correlation_heatmap(maps, coords, scene, tmp_path / "corr")
    pngs = [p for p in written if p.suffix == ".png"]
    jsons = [p for p in written if p.suffix == ".json"]
    assert len(pngs) == 3 and len(jsons) == 3  # C+1 channels
    for jp in jsons:
        obj = json.loads(jp.read_text())
        ch = obj["channel"]
        assert obj["n_points"] == 40
        assert np.allclose(obj["values"], maps.classwise[ch], atol=0.0)


def test_export_all_zero_map(tmp_path):
    coords = np.random.default_rng(10).uniform(-5, 5, size=(20, 3))
    enc = fake_enc(coords, np.zeros(20), features=np.ones((20, 3)))
    maps = compute_scp_maps(enc, ClickSet(), 2.0, class_count=1)
    scene = generate_scene(small_scene_config(), 1)
    written = export_correlation_heatmap(maps, coords, scene, tmp_path / "zero")
    obj = json.loads([p for p in written if p.suffix == ".json"][0].read_text())
    assert all(v == 0.0 for v in obj["values"])
