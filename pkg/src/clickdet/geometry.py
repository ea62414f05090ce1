"""Oriented-box geometry: containment tests, rotated IoU, NMS, matching, AP.

Boxes live on the ground plane: yaw rotates the (l, w) footprint about the
vertical axis, height is axis-aligned. All functions here are pure and
operate on plain floats / numpy arrays, so they are safe to call from
parallel evaluation workers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

# Slack for boundary-inclusive containment; errs toward "inside", which is the
# safe direction for negative-click candidate filtering.
CONTAINMENT_ATOL = 1e-9

# BEV intersections below this area count as degenerate (edge-touching) and
# are treated as empty.
DEGENERATE_AREA = 1e-12


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def canonical_box_pose(l: float, w: float, yaw: float) -> tuple[float, float, float]:
    """Fold an oriented footprint into its canonical pose.

    A rectangle is invariant under a pi rotation, and swapping (l, w) while
    rotating a quarter turn gives the same shape; box-shape regression
    targets must therefore be canonicalized or identical geometry carries
    contradictory labels. Canonical form: l >= w and yaw in [-pi/2, pi/2).
    """
    if w > l:
        l, w = w, l
        yaw += 0.5 * math.pi
    folded = math.fmod(yaw + 0.5 * math.pi, math.pi)
    if folded < 0.0:
        folded += math.pi
    return l, w, folded - 0.5 * math.pi


@dataclass(frozen=True)
class DetBox:
    """A detected oriented box with class id and confidence score."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {(self.l, self.w, self.h)}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))


@dataclass(frozen=True)
class MatchResult:
    """Greedy detection-to-ground-truth assignment.

    ``pairs`` holds (det index, gt index, IoU) triples; every det and gt
    appears in at most one pair and every pair IoU meets its class threshold.
    """

    pairs: tuple[tuple[int, int, float], ...]
    unmatched_dets: tuple[int, ...] = field(default=())
    unmatched_gts: tuple[int, ...] = field(default=())

    @property
    def false_positives(self) -> tuple[int, ...]:
        return self.unmatched_dets

    @property
    def false_negatives(self) -> tuple[int, ...]:
        return self.unmatched_gts


class NoGroundTruthWarning(UserWarning):
    """Emitted when AP is requested for a class with zero ground-truth boxes."""


def _box_fields(box) -> tuple[float, float, float, float, float, float, float]:
    return (box.cx, box.cy, box.cz, box.l, box.w, box.h, box.yaw)


def bev_corners(box) -> np.ndarray:
    """Counter-clockwise BEV footprint corners, shape (4, 2)."""
    cx, cy, _, l, w, _, yaw = _box_fields(box)
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def point_in_box(point, box, atol: float = CONTAINMENT_ATOL) -> bool:
    """Boundary-inclusive test of a 3D point against a yaw-rotated cuboid."""
    px, py, pz = float(point[0]), float(point[1]), float(point[2])
    cx, cy, cz, l, w, h, yaw = _box_fields(box)
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = px - cx, py - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (
        abs(u) <= 0.5 * l + atol
        and abs(v) <= 0.5 * w + atol
        and abs(pz - cz) <= 0.5 * h + atol
    )


def points_in_box_mask(points: np.ndarray, box, atol: float = CONTAINMENT_ATOL) -> np.ndarray:
    """Vectorized ``point_in_box`` over an (N, 3) array."""
    pts = np.asarray(points, dtype=np.float64)
    cx, cy, cz, l, w, h, yaw = _box_fields(box)
    c, s = math.cos(yaw), math.sin(yaw)
    dx = pts[:, 0] - cx
    dy = pts[:, 1] - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (
        (np.abs(u) <= 0.5 * l + atol)
        & (np.abs(v) <= 0.5 * w + atol)
        & (np.abs(pts[:, 2] - cz) <= 0.5 * h + atol)
    )


def points_in_any_box_mask(points: np.ndarray, boxes: Sequence, atol: float = CONTAINMENT_ATOL) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    mask = np.zeros(len(pts), dtype=bool)
    for box in boxes:
        mask |= points_in_box_mask(pts, box, atol=atol)
    return mask


def point_in_bev_footprint(x: float, y: float, box, atol: float = CONTAINMENT_ATOL) -> bool:
    """2D containment against the yaw-rotated footprint, ignoring height."""
    cx, cy, _, l, w, _, yaw = _box_fields(box)
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = x - cx, y - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return abs(u) <= 0.5 * l + atol and abs(v) <= 0.5 * w + atol


def _clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex CCW clipper."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_pts = output
        output = []
        prev = input_pts[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in input_pts:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return np.asarray(output, dtype=np.float64).reshape(-1, 2)


def _shoelace_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_intersection_area(a, b) -> float:
    """Exact rotated-rectangle intersection area via convex polygon clipping."""
    inter = _clip_polygon(bev_corners(a), bev_corners(b))
    area = _shoelace_area(inter)
    return area if area > DEGENERATE_AREA else 0.0


def iou_3d(a, b) -> float:
    """Rotated-box 3D IoU: BEV polygon intersection times vertical overlap."""
    za0, za1 = a.cz - 0.5 * a.h, a.cz + 0.5 * a.h
    zb0, zb1 = b.cz - 0.5 * b.h, b.cz + 0.5 * b.h
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    # Circumscribed-circle reject avoids polygon clipping for far pairs.
    r = 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w))
    if (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 >= r * r:
        return 0.0
    inter_area = bev_intersection_area(a, b)
    if inter_area <= 0.0:
        return 0.0
    inter = inter_area * dz
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def nms(dets: Sequence[DetBox], iou_threshold: float) -> list[DetBox]:
    """Greedy per-class suppression in descending score order.

    Survivors keep their original scores; ties break toward the earlier
    input index, so the result is deterministic and idempotent.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    suppressed = [False] * len(dets)
    keep: list[int] = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if suppressed[j] or dets[j].class_id != dets[i].class_id:
                continue
            if iou_3d(dets[i], dets[j]) > iou_threshold:
                suppressed[j] = True
    return [dets[i] for i in keep]


def match_detections(
    dets: Sequence[DetBox],
    gts: Sequence,
    iou_thresholds: Mapping[int, float],
) -> MatchResult:
    """Greedily match detections to ground truth in descending score order.

    Each detection takes the unmatched same-class gt of highest IoU, provided
    that IoU meets the class threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_taken = [False] * len(gts)
    pairs: list[tuple[int, int, float]] = []
    unmatched_dets: list[int] = []
    for i in order:
        det = dets[i]
        thr = iou_thresholds.get(det.class_id)
        if thr is None:
            unmatched_dets.append(i)
            continue
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if gt_taken[j] or gt.class_id != det.class_id:
                continue
            iou = iou_3d(det, gt)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= thr:
            gt_taken[best_j] = True
            pairs.append((i, best_j, best_iou))
        else:
            unmatched_dets.append(i)
    unmatched_gts = tuple(j for j, taken in enumerate(gt_taken) if not taken)
    return MatchResult(
        pairs=tuple(sorted(pairs)),
        unmatched_dets=tuple(sorted(unmatched_dets)),
        unmatched_gts=unmatched_gts,
    )


def _pr_points(
    dets_by_scene: Mapping[str, Sequence[DetBox]],
    gts_by_scene: Mapping[str, Sequence],
    class_id: int,
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Cumulative (precision, recall) arrays over score-ranked detections."""
    n_gt = sum(
        sum(1 for g in gts if g.class_id == class_id) for gts in gts_by_scene.values()
    )
    ranked: list[tuple[float, str, int]] = []
    for scene_id in sorted(dets_by_scene):
        for idx, det in enumerate(dets_by_scene[scene_id]):
            if det.class_id == class_id:
                ranked.append((det.score, scene_id, idx))
    ranked.sort(key=lambda t: (-t[0], t[1], t[2]))

    taken: dict[str, list[bool]] = {
        sid: [False] * len(gts) for sid, gts in gts_by_scene.items()
    }
    tp = np.zeros(len(ranked))
    for rank, (_, scene_id, idx) in enumerate(ranked):
        det = dets_by_scene[scene_id][idx]
        gts = gts_by_scene.get(scene_id, ())
        flags = taken.setdefault(scene_id, [False] * len(gts))
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if gt.class_id != class_id:
                continue
            iou = iou_3d(det, gt)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= iou_threshold and not flags[best_j]:
            flags[best_j] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(ranked) + 1) if len(ranked) else np.zeros(0)
    recall = cum_tp / n_gt if n_gt > 0 else np.zeros(len(ranked))
    return precision, recall, n_gt


def average_precision(
    dets_by_scene: Mapping[str, Sequence[DetBox]],
    gts_by_scene: Mapping[str, Sequence],
    class_id: int,
    iou_threshold: float,
    interpolation: str = "r40",
) -> float:
    """Interpolated average precision for one class across scenes.

    ``interpolation`` selects the recall grid: "r40" (40 points, the modern
    KITTI convention) or "r11" (11 points including recall 0). Classes with
    no ground truth yield 0.0 with a ``NoGroundTruthWarning``.
    """
    if interpolation not in ("r40", "r11"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    precision, recall, n_gt = _pr_points(dets_by_scene, gts_by_scene, class_id, iou_threshold)
    if n_gt == 0:
        warnings.warn(
            f"no ground-truth boxes for class {class_id}; AP defined as 0",
            NoGroundTruthWarning,
            stacklevel=2,
        )
        return 0.0
    if len(precision) == 0:
        return 0.0
    if interpolation == "r40":
        grid = np.linspace(1.0 / 40.0, 1.0, 40)
    else:
        grid = np.linspace(0.0, 1.0, 11)
    ap = 0.0
    for r in grid:
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / len(grid)
