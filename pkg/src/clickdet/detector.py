"""Detection head, target assignment, loss, training loop, and prediction.

The head consumes, per downsampled point, the embedding concatenated with
the final click channels and the correlation channels (D + 2C + 2 wide for
the full model) and emits class logits (including background) plus an
8-value box regression: center offsets, log extents, and the yaw encoded
as (sin, cos) to dodge the angle wrap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import AdamState, Tensor
from .clicks import ClickSet, encode_click, pool_classwise, simulate_positive_clicks
from .encoder import EncoderConfig, EncoderOutput, encode, init_encoder_params
from .geometry import DetBox
from .propagation import NcsConfig, scp_channels, simulate_negative_clicks
from .scenes import Scene

N_REG = 8  # dcx, dcy, dcz, log l, log w, log h, sin yaw, cos yaw


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries step diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture plus the interaction-mechanism toggles.

    Switching off ``dense_guidance``/``negative_clicks``/``propagation``
    yields the ablation variants down to the vanilla model (input click
    channels only, plain head).
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head_hidden: tuple[int, int, int] = (64, 64, 64)
    dense_guidance: bool = True
    negative_clicks: bool = True
    propagation: bool = True
    score_threshold: float = 0.3
    nms_iou: float = 0.3

    @property
    def class_count(self) -> int:
        return self.encoder.class_count

    @property
    def tau(self) -> float:
        return self.encoder.tau

    @property
    def head_click_channels(self) -> int:
        n = self.class_count if self.dense_guidance else 0
        return n + (1 if self.negative_clicks else 0)

    @property
    def head_corr_channels(self) -> int:
        return self.head_click_channels if self.propagation else 0

    @property
    def head_input_dim(self) -> int:
        return self.encoder.feature_dim + self.head_click_channels + self.head_corr_channels

    def validate(self) -> None:
        self.encoder.validate()
        if len(self.head_hidden) != 3 or any(h < 1 for h in self.head_hidden):
            raise ValueError("head_hidden must be three positive widths")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must be in [0, 1]")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in (0, 1]")

    def to_json(self) -> dict:
        return {
            "encoder": self.encoder.to_json(),
            "head_hidden": list(self.head_hidden),
            "dense_guidance": self.dense_guidance,
            "negative_clicks": self.negative_clicks,
            "propagation": self.propagation,
            "score_threshold": self.score_threshold,
            "nms_iou": self.nms_iou,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorConfig":
        return cls(
            encoder=EncoderConfig.from_json(obj["encoder"]),
            head_hidden=tuple(obj["head_hidden"]),
            dense_guidance=obj["dense_guidance"],
            negative_clicks=obj["negative_clicks"],
            propagation=obj["propagation"],
            score_threshold=obj["score_threshold"],
            nms_iou=obj["nms_iou"],
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    learning_rate: float = 0.01
    batch_size: int = 1
    seed: int = 0
    n_u_max: int = 10
    k_n_max: int = 10
    w_cls: float = 1.0
    w_box: float = 1.0
    w_fg: float = 1.0
    fg_balance: float = 4.0
    shuffle: bool = True
    log_path: str | None = None

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.n_u_max < 0 or self.k_n_max < 0:
            raise ValueError("click budgets must be non-negative")
        if min(self.w_cls, self.w_box, self.w_fg) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.fg_balance <= 0:
            raise ValueError("fg_balance must be positive")

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs, "learning_rate": self.learning_rate,
            "batch_size": self.batch_size, "seed": self.seed,
            "n_u_max": self.n_u_max, "k_n_max": self.k_n_max,
            "w_cls": self.w_cls, "w_box": self.w_box, "w_fg": self.w_fg,
            "fg_balance": self.fg_balance, "shuffle": self.shuffle,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


def _init_head_params(cfg: DetectorConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    widths = [cfg.head_input_dim, *cfg.head_hidden, cfg.class_count + 1 + N_REG]
    params: dict[str, Tensor] = {}
    for i, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
        bound = math.sqrt(6.0 / (d_in + d_out))
        params[f"head.fc{i}.W"] = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
        params[f"head.fc{i}.b"] = Tensor(np.zeros(d_out), requires_grad=True)
    return params


class DetectorNet:
    """Parameter container for the encoder + head pair."""

    def __init__(self, cfg: DetectorConfig, params: dict[str, Tensor]):
        cfg.validate()
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: DetectorConfig, seed: int = 0) -> "DetectorNet":
        cfg.validate()
        rng = np.random.default_rng(seed)
        params = init_encoder_params(cfg.encoder, rng)
        params.update(_init_head_params(cfg, rng))
        return cls(cfg, params)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def replace_params(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            self.params[name] = Tensor(arr, requires_grad=True)

    def save(self, path, extra_metadata: dict | None = None) -> None:
        meta = {"config": self.cfg.to_json()}
        if extra_metadata:
            meta.update(extra_metadata)
        ad.save_checkpoint(path, self.param_arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["DetectorNet", dict]:
        arrays, meta = ad.load_checkpoint(path)
        cfg = DetectorConfig.from_json(meta["config"])
        net = cls(cfg, {})
        net.replace_params(arrays)
        return net, meta


def assemble_head_input(
    features: Tensor,
    click_channels: np.ndarray | None,
    correlation_channels: Tensor | None,
) -> Tensor:
    """Concatenate embeddings, click channels, and correlation channels."""
    parts: list[Tensor] = [features]
    if click_channels is not None and click_channels.shape[1] > 0:
        parts.append(Tensor(click_channels))
    if correlation_channels is not None and correlation_channels.shape[1] > 0:
        parts.append(correlation_channels)
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def head_forward(params: dict[str, Tensor], cfg: DetectorConfig, assembled: Tensor) -> tuple[Tensor, Tensor]:
    """Four fully-connected layers; splits into (class logits, regression)."""
    if assembled.shape[1] != cfg.head_input_dim:
        raise ValueError(
            f"head expects width {cfg.head_input_dim}, got {assembled.shape[1]}"
        )
    h = assembled
    for i in range(3):
        h = ad.relu(ad.linear(h, params[f"head.fc{i}.W"], params[f"head.fc{i}.b"]))
    out = ad.linear(h, params["head.fc3.W"], params["head.fc3.b"])
    n_cls = cfg.class_count + 1
    return ad.slice_cols(out, 0, n_cls), ad.slice_cols(out, n_cls, n_cls + N_REG)


def assign_targets(coords: np.ndarray, boxes: Sequence, class_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-point class labels (0 = background) and regression targets.

    A point inside several boxes goes to the nearest center. Regression
    targets for background points are zero and masked out of the loss.
    The footprint is encoded in canonical pose (l >= w, yaw folded into
    [-pi/2, pi/2)): rectangles are orientation-ambiguous mod pi, so raw
    yaw labels would be contradictory for identical geometry.
    """
    pts = np.asarray(coords, dtype=np.float64)
    n = len(pts)
    labels = np.zeros(n, dtype=np.intp)
    targets = np.zeros((n, N_REG), dtype=np.float64)
    best_d2 = np.full(n, np.inf)
    for box in boxes:
        if not 1 <= box.class_id <= class_count:
            raise ValueError(f"box class {box.class_id} outside 1..{class_count}")
        inside = geometry.points_in_box_mask(pts, box)
        if not inside.any():
            continue
        center = np.array([box.cx, box.cy, box.cz])
        d2 = ((pts - center) ** 2).sum(axis=1)
        take = inside & (d2 < best_d2)
        if not take.any():
            continue
        l, w, yaw = geometry.canonical_box_pose(box.l, box.w, box.yaw)
        best_d2[take] = d2[take]
        labels[take] = box.class_id
        targets[take, 0] = box.cx - pts[take, 0]
        targets[take, 1] = box.cy - pts[take, 1]
        targets[take, 2] = box.cz - pts[take, 2]
        targets[take, 3] = math.log(l)
        targets[take, 4] = math.log(w)
        targets[take, 5] = math.log(box.h)
        targets[take, 6] = math.sin(yaw)
        targets[take, 7] = math.cos(yaw)
    return labels, targets


def decode_boxes(
    coords: np.ndarray,
    logits: np.ndarray,
    regression: np.ndarray,
    class_count: int,
    score_threshold: float,
    nms_iou: float,
) -> list[DetBox]:
    """Per-point decode, confidence filter, then greedy per-class NMS."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    fg_probs = probs[:, 1:]
    best = fg_probs.argmax(axis=1)
    scores = fg_probs[np.arange(len(coords)), best]
    candidates: list[DetBox] = []
    for i in np.flatnonzero(scores >= score_threshold):
        r = regression[i]
        candidates.append(DetBox(
            cx=float(coords[i, 0] + r[0]),
            cy=float(coords[i, 1] + r[1]),
            cz=float(coords[i, 2] + r[2]),
            l=float(np.exp(r[3])),
            w=float(np.exp(r[4])),
            h=float(np.exp(r[5])),
            yaw=float(math.atan2(r[6], r[7])),
            class_id=int(best[i] + 1),
            score=float(scores[i]),
        ))
    return geometry.nms(candidates, nms_iou)


def centerness(coords: np.ndarray, boxes: Sequence) -> np.ndarray:
    """Per-point closeness to its owning box center, in [0, 1].

    0 for background points; for points inside a box, 1 at the center
    falling off linearly with BEV distance over the footprint half-diagonal.
    Points whose decoded boxes are most trustworthy are the near-center
    ones, so the class loss uses this to bias scoring toward them.
    """
    pts = np.asarray(coords, dtype=np.float64)
    out = np.zeros(len(pts))
    best_d2 = np.full(len(pts), np.inf)
    for box in boxes:
        inside = geometry.points_in_box_mask(pts, box)
        if not inside.any():
            continue
        center = np.array([box.cx, box.cy, box.cz])
        d2 = ((pts - center) ** 2).sum(axis=1)
        take = inside & (d2 < best_d2)
        if not take.any():
            continue
        best_d2[take] = d2[take]
        half_diag = 0.5 * math.hypot(box.l, box.w)
        d_bev = np.hypot(pts[take, 0] - box.cx, pts[take, 1] - box.cy)
        out[take] = np.clip(1.0 - d_bev / half_diag, 0.0, 1.0)
    return out


def compute_loss(
    logits: Tensor,
    regression: Tensor,
    labels: np.ndarray,
    reg_targets: np.ndarray,
    fg_outputs: Sequence[tuple[Tensor, np.ndarray]],
    w_cls: float = 1.0,
    w_box: float = 1.0,
    w_fg: float = 1.0,
    fg_balance: float = 1.0,
    cls_weights: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of class CE, foreground-only smooth L1, and score BCE.

    ``fg_outputs`` pairs every scoring layer's sigmoid tensor with its
    binary inside-any-box labels; their BCEs are averaged into one term.
    ``fg_balance`` upweights foreground rows in the CE and positive labels
    in the score BCEs, counteracting the background-heavy label mix.
    ``cls_weights`` overrides the CE row weights entirely (the trainer uses
    centerness-shaped weights there).
    """
    row_w = cls_weights if cls_weights is not None else np.where(labels > 0, fg_balance, 1.0)
    cls_term = ad.cross_entropy(logits, labels, weights=row_w)
    fg_idx = np.flatnonzero(labels > 0)
    if len(fg_idx):
        box_term = ad.smooth_l1(ad.gather_rows(regression, fg_idx), Tensor(reg_targets[fg_idx]))
    else:
        box_term = Tensor(np.array(0.0))
    if fg_outputs:
        acc = None
        for scores, fg_labels in fg_outputs:
            fg_labels = fg_labels.reshape(scores.shape)
            bce_w = np.where(fg_labels > 0, fg_balance, 1.0)
            term = ad.binary_cross_entropy(scores, Tensor(fg_labels), weights=bce_w)
            acc = term if acc is None else ad.add(acc, term)
        fg_term = ad.scale(acc, 1.0 / len(fg_outputs))
    else:
        fg_term = Tensor(np.array(0.0))
    total = ad.add(ad.add(ad.scale(cls_term, w_cls), ad.scale(box_term, w_box)), ad.scale(fg_term, w_fg))
    breakdown = {
        "cls": cls_term.item(),
        "box": box_term.item(),
        "fg": fg_term.item(),
        "total": total.item(),
    }
    return total, breakdown


@dataclass
class ForwardResult:
    enc: EncoderOutput
    clicks: ClickSet              # user clicks plus simulated negatives
    negatives_added: int
    click_channels: np.ndarray    # (N', head_click_channels)
    correlation: Tensor | None    # (N', head_corr_channels) or None
    logits: Tensor
    regression: Tensor


def _final_click_channels(cfg: DetectorConfig, clicks: ClickSet, coords: np.ndarray) -> np.ndarray:
    """Class channels (when densely guided) plus the negative channel."""
    n = len(coords)
    encodings = [
        (encode_click(c, coords, cfg.tau), c.class_id if c.is_positive else None)
        for c in clicks
    ]
    pooled = pool_classwise(encodings, cfg.class_count, n_points=n)
    cols: list[np.ndarray] = []
    if cfg.dense_guidance:
        cols.append(pooled[: cfg.class_count].T)
    if cfg.negative_clicks:
        cols.append(pooled[cfg.class_count:].T)
    if not cols:
        return np.zeros((n, 0))
    return np.ascontiguousarray(np.hstack(cols))


def forward_scene(
    net: DetectorNet,
    scene: Scene,
    clicks: ClickSet,
    training: bool = False,
    rng: np.random.Generator | None = None,
    k_n_max: int = 10,
) -> ForwardResult:
    """Encoder, negative-channel assembly, correlation channels, head.

    At training time the negative-click simulator extends the click set
    using the encoder's foreground scores; at inference only user-provided
    negative clicks populate the negative channel.
    """
    cfg = net.cfg
    enc = encode(net.params, cfg.encoder, scene, clicks, dense_guidance=cfg.dense_guidance)
    all_clicks = clicks
    negatives_added = 0
    if training and cfg.negative_clicks:
        if rng is None:
            raise ValueError("training-mode forward needs an rng for the negative-click simulator")
        for neg in simulate_negative_clicks(enc, scene.boxes, NcsConfig(k_n_max=k_n_max), rng):
            all_clicks = all_clicks.add(neg)
            negatives_added += 1

    u = _final_click_channels(cfg, all_clicks, enc.coords)
    corr = None
    if cfg.propagation and cfg.head_corr_channels > 0:
        corr = scp_channels(
            enc.features, all_clicks, enc.coords, cfg.tau, cfg.class_count,
            include_negative=cfg.negative_clicks,
            include_positive=cfg.dense_guidance,
        )
    assembled = assemble_head_input(enc.features, u, corr)
    logits, regression = head_forward(net.params, cfg, assembled)
    return ForwardResult(
        enc=enc,
        clicks=all_clicks,
        negatives_added=negatives_added,
        click_channels=u,
        correlation=corr,
        logits=logits,
        regression=regression,
    )


def predict_boxes(
    net: DetectorNet,
    scene: Scene,
    clicks: ClickSet | None = None,
    score_threshold: float | None = None,
    nms_iou: float | None = None,
) -> list[DetBox]:
    """Deterministic full-pipeline prediction for one scene."""
    clicks = clicks if clicks is not None else ClickSet()
    out = forward_scene(net, scene, clicks, training=False)
    return decode_boxes(
        out.enc.coords,
        out.logits.data,
        out.regression.data,
        net.cfg.class_count,
        net.cfg.score_threshold if score_threshold is None else score_threshold,
        net.cfg.nms_iou if nms_iou is None else nms_iou,
    )


def _scene_step_loss(net: DetectorNet, scene: Scene, cfg: TrainConfig, rng: np.random.Generator):
    clicks = simulate_positive_clicks(scene, cfg.n_u_max, rng)
    out = forward_scene(net, scene, clicks, training=True, rng=rng, k_n_max=cfg.k_n_max)
    labels, reg_targets = assign_targets(out.enc.coords, scene.boxes, net.cfg.class_count)
    fg_outputs = []
    for ss in out.enc.stage_scores:
        fg_labels = geometry.points_in_any_box_mask(ss.coords, scene.boxes).astype(np.float64)
        fg_outputs.append((ss.scores, fg_labels))
    # near-center foreground rows dominate the class loss so that scoring
    # tracks localization quality
    cness = centerness(out.enc.coords, scene.boxes)
    cls_weights = np.where(labels > 0, cfg.fg_balance * (0.25 + 0.75 * cness), 1.0)
    return compute_loss(
        out.logits, out.regression, labels, reg_targets, fg_outputs,
        w_cls=cfg.w_cls, w_box=cfg.w_box, w_fg=cfg.w_fg, fg_balance=cfg.fg_balance,
        cls_weights=cls_weights,
    )


def train_model(
    net: DetectorNet,
    scenes: Sequence[Scene],
    cfg: TrainConfig,
    val_scenes: Sequence[Scene] = (),
    val_metric=None,
) -> list[dict]:
    """Per-scene-step training with simulated clicks; returns epoch history.

    Deterministic for a fixed seed: the scene order, the click draws, and
    the negative-click simulator all consume one seeded generator.
    """
    cfg.validate()
    if not scenes:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history: list[dict] = []
    log_fh = open(cfg.log_path, "a") if cfg.log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(scenes)) if cfg.shuffle else np.arange(len(scenes))
            sums = {"total": 0.0, "cls": 0.0, "box": 0.0, "fg": 0.0}
            batch_grads: dict[str, np.ndarray] = {}
            in_batch = 0
            for pos, scene_idx in enumerate(order):
                scene = scenes[int(scene_idx)]
                try:
                    loss, breakdown = _scene_step_loss(net, scene, cfg, rng)
                except ad.NonFiniteError as exc:
                    raise TrainingDivergedError(
                        f"non-finite values during training (op {exc.op!r})",
                        {"epoch": epoch, "scene": scene.scene_id, "op": exc.op},
                    ) from exc
                if not math.isfinite(breakdown["total"]):
                    raise TrainingDivergedError(
                        "loss became non-finite",
                        {"epoch": epoch, "scene": scene.scene_id, "breakdown": breakdown},
                    )
                for t in net.params.values():
                    t.zero_grad()
                ad.backward(loss)
                for name, t in net.params.items():
                    if t.grad is None:
                        continue
                    if name in batch_grads:
                        batch_grads[name] += t.grad
                    else:
                        batch_grads[name] = t.grad.copy()
                in_batch += 1
                if in_batch == cfg.batch_size or pos == len(order) - 1:
                    grads = {k: g / in_batch for k, g in batch_grads.items()}
                    new_arrays = ad.adam_step(net.param_arrays(), grads, state, cfg.learning_rate)
                    net.replace_params(new_arrays)
                    batch_grads.clear()
                    in_batch = 0
                for key in sums:
                    sums[key] += breakdown[key]
            record = {
                "epoch": epoch,
                "loss": sums["total"] / len(scenes),
                "loss_cls": sums["cls"] / len(scenes),
                "loss_box": sums["box"] / len(scenes),
                "loss_fg": sums["fg"] / len(scenes),
            }
            if val_scenes and val_metric is not None:
                record["val"] = val_metric(net, val_scenes)
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    return history
