"""Iterative click evaluation: simulate a user fixing the detector's output.

At each step the simulated user first repairs a false negative with a
positive click (uniform inside a uniformly chosen missed box); once every
object is found, a negative click lands inside the highest-scoring false
positive, avoiding ground-truth interiors. AP is recomputed over the whole
split at every click count and averaged over randomized trials.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import geometry
from .clicks import Click, ClickSet, NEGATIVE, sample_click_in_box
from .geometry import DetBox, NoGroundTruthWarning
from .scenes import Scene

DEFAULT_IOU_THRESHOLDS = {1: 0.7, 2: 0.5, 3: 0.5}


@dataclass(frozen=True)
class ProtocolConfig:
    max_clicks: int = 5
    trials: int = 5
    iou_thresholds: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS))
    seed_base: int = 0
    interpolation: str = "r40"

    def validate(self) -> None:
        if self.max_clicks < 0:
            raise ValueError("max_clicks must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for cls, thr in self.iou_thresholds.items():
            if not 0.0 < thr <= 1.0:
                raise ValueError(f"IoU threshold for class {cls} must be in (0, 1]")

    def to_json(self) -> dict:
        return {
            "max_clicks": self.max_clicks,
            "trials": self.trials,
            "iou_thresholds": {str(k): v for k, v in self.iou_thresholds.items()},
            "seed_base": self.seed_base,
            "interpolation": self.interpolation,
        }


@dataclass
class ClickCurve:
    """AP per (trial, click count, class), with mAP convenience views.

    ``ap`` has shape (trials, max_clicks + 1, n_classes); entries are
    NaN-free. Classes absent from the split are flagged so reports can
    mark their zero APs as warnings rather than measurements.
    """

    ap: np.ndarray
    classes: tuple[int, ...]
    config: ProtocolConfig
    empty_classes: tuple[int, ...] = ()

    @property
    def n_clicks(self) -> np.ndarray:
        return np.arange(self.ap.shape[1])

    def trial_map(self) -> np.ndarray:
        """mAP per (trial, click count), over non-empty classes."""
        keep = [i for i, c in enumerate(self.classes) if c not in self.empty_classes]
        if not keep:
            return np.zeros(self.ap.shape[:2])
        return self.ap[:, :, keep].mean(axis=2)

    def mean_ap(self) -> np.ndarray:
        """Per-class AP averaged over trials, shape (max_clicks+1, n_classes)."""
        return self.ap.mean(axis=0)

    def mean_map(self) -> np.ndarray:
        """mAP averaged over trials, shape (max_clicks+1,)."""
        return self.trial_map().mean(axis=0)

    def to_json(self) -> dict:
        return {
            "v": 1,
            "config": self.config.to_json(),
            "classes": list(self.classes),
            "empty_classes": list(self.empty_classes),
            "ap": self.ap.tolist(),
            "mean_ap": self.mean_ap().tolist(),
            "mean_map": self.mean_map().tolist(),
        }


def next_click(
    scene: Scene,
    dets: Sequence[DetBox],
    thresholds: Mapping[int, float],
    rng: np.random.Generator,
    max_placement_tries: int = 256,
) -> Click | None:
    """One simulated user action, or None when nothing is left to fix.

    False negatives take priority: a positive click lands uniformly inside
    a uniformly chosen missed box. Otherwise the highest-scoring false
    positive receives a negative click placed outside every ground-truth
    footprint; if a false positive is entirely covered by ground truth the
    next one is tried.
    """
    match = geometry.match_detections(dets, scene.boxes, thresholds)
    if match.unmatched_gts:
        fn_idx = match.unmatched_gts[int(rng.integers(0, len(match.unmatched_gts)))]
        return sample_click_in_box(scene.boxes[fn_idx], rng)
    if match.unmatched_dets:
        fp_order = sorted(match.unmatched_dets, key=lambda i: (-dets[i].score, i))
        for fp_idx in fp_order:
            box = dets[fp_idx]
            for _ in range(max_placement_tries):
                candidate = sample_click_in_box(box, rng, kind=NEGATIVE)
                inside_gt = any(
                    geometry.point_in_bev_footprint(candidate.x, candidate.y, gt)
                    for gt in scene.boxes
                )
                if not inside_gt:
                    return candidate
    return None


def run_protocol(model, scenes: Sequence[Scene], cfg: ProtocolConfig) -> ClickCurve:
    """Evaluate a detector under the iterative clicking protocol.

    ``model`` only needs a ``predict(scene, clicks) -> list[DetBox]``
    method. Clicks accumulate: the set at step k+1 extends step k's by one
    click. Once a scene needs no further clicks its detections are carried
    through the remaining click counts.
    """
    cfg.validate()
    classes = tuple(sorted(cfg.iou_thresholds))
    n_k = cfg.max_clicks + 1
    ap = np.zeros((cfg.trials, n_k, len(classes)))

    gts_by_scene = {s.scene_id: s.boxes for s in scenes}
    present = {c for boxes in gts_by_scene.values() for b in boxes for c in (b.class_id,)}
    empty_classes = tuple(c for c in classes if c not in present)

    for trial in range(cfg.trials):
        rng = np.random.default_rng(cfg.seed_base + trial)
        dets_at_k: list[dict[str, list[DetBox]]] = [dict() for _ in range(n_k)]
        for scene in scenes:
            clicks = ClickSet()
            dets = model.predict(scene, clicks)
            dets_at_k[0][scene.scene_id] = dets
            done = False
            for k in range(1, n_k):
                if not done:
                    click = next_click(scene, dets, cfg.iou_thresholds, rng)
                    if click is None:
                        done = True
                    else:
                        clicks = clicks.add(click)
                        dets = model.predict(scene, clicks)
                dets_at_k[k][scene.scene_id] = dets
        for k in range(n_k):
            for ci, class_id in enumerate(classes):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", NoGroundTruthWarning)
                    ap[trial, k, ci] = geometry.average_precision(
                        dets_at_k[k], gts_by_scene, class_id,
                        cfg.iou_thresholds[class_id], interpolation=cfg.interpolation,
                    )
    return ClickCurve(ap=ap, classes=classes, config=cfg, empty_classes=empty_classes)


def write_report(curve: ClickCurve, out_dir) -> tuple[Path, Path]:
    """CSV table plus a JSON twin with full per-trial values.

    Floats are written with repr precision so the CSV parses back to the
    exact JSON values.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "click_curve.csv"
    json_path = out_dir / "click_curve.json"

    mean_ap = curve.mean_ap()
    mean_map = curve.mean_map()
    std_ap = curve.ap.std(axis=0)
    std_map = curve.trial_map().std(axis=0)

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["n_clicks"]
        for c in curve.classes:
            flag = "_nogt" if c in curve.empty_classes else ""
            header.append(f"ap_class{c}{flag}")
        header.append("map")
        header.extend(f"ap_class{c}_std" for c in curve.classes)
        header.append("map_std")
        writer.writerow(header)
        for k in range(curve.ap.shape[1]):
            row = [k]
            row.extend(repr(float(v)) for v in mean_ap[k])
            row.append(repr(float(mean_map[k])))
            row.extend(repr(float(v)) for v in std_ap[k])
            row.append(repr(float(std_map[k])))
            writer.writerow(row)

    json_path.write_text(json.dumps(curve.to_json(), indent=2))
    return csv_path, json_path
