"""Negative click simulation and spatial click propagation.

NCS turns the instance-aware sampler's failure mode into supervision: the
background points it scores highest are exactly the ones a detector will
hallucinate into objects, so they become simulated negative clicks during
training.

SCP spreads one click to every same-class instance: each click's heatmap
weights the downsampled point embeddings into a prototype vector, the
cosine similarity of every embedding against that prototype forms a
click-wise correlation map, and same-class maps max-pool into class-wise
channels (negatives get their own channel).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor
from .clicks import Click, ClickSet, NEGATIVE, encode_click
from .encoder import EncoderOutput

PROTOTYPE_EPS = 1e-9


@dataclass(frozen=True)
class NcsConfig:
    k_n_max: int = 10
    min_fg_score: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.k_n_max < 0:
            raise ValueError("k_n_max must be >= 0")
        if not 0.0 <= self.min_fg_score <= 1.0:
            raise ValueError("min_fg_score must be in [0, 1]")


@dataclass(frozen=True)
class ScpMaps:
    """Per-click prototypes and correlation maps plus their class-wise pooling.

    ``clickwise`` is (K, N') in [-1, 1]; ``classwise`` is (C+1, N') with the
    final row holding the negative-click channel. Clicks whose encoding has
    no support among the downsampled points are flagged invalid and
    contribute nothing.
    """

    prototypes: np.ndarray
    clickwise: np.ndarray
    classwise: np.ndarray
    valid: np.ndarray
    class_ids: tuple[int | None, ...]


def simulate_negative_clicks(
    enc: EncoderOutput,
    gt_boxes: Sequence,
    cfg: NcsConfig,
    rng: np.random.Generator,
    k_n: int | None = None,
) -> list[Click]:
    """Sample challenging background points as negative clicks.

    Candidates are downsampled points outside every ground-truth box with
    foreground score >= cfg.min_fg_score, ranked by score descending. Takes
    the top k_n; when k_n is None it is drawn uniformly from {0..k_n_max}.
    Score ties break by a seeded shuffle, so results are deterministic for a
    fixed rng state.
    """
    cfg.validate()
    if k_n is None:
        k_n = int(rng.integers(0, cfg.k_n_max + 1))
    k_n = min(k_n, cfg.k_n_max)
    scores = enc.fg_score_values
    outside = ~geometry.points_in_any_box_mask(enc.coords, gt_boxes)
    eligible = np.flatnonzero(outside & (scores >= cfg.min_fg_score))
    if k_n == 0 or len(eligible) == 0:
        # Keep rng streams aligned between branches with and without candidates.
        rng.permutation(len(eligible))
        return []
    perm = rng.permutation(len(eligible))
    shuffled = eligible[perm]
    order = shuffled[np.argsort(-scores[shuffled], kind="stable")]
    chosen = order[:k_n]
    return [
        Click(x=float(enc.coords[i, 0]), y=float(enc.coords[i, 1]), kind=NEGATIVE)
        for i in chosen
    ]


def _prototype_weights(encoding: np.ndarray) -> np.ndarray | None:
    """L1-normalized click weights; None when the click has no support."""
    e = np.asarray(encoding, dtype=np.float64)
    norm = e.sum()
    if norm < PROTOTYPE_EPS:
        return None
    return e / norm


def click_prototype(features: np.ndarray, encoding: np.ndarray) -> tuple[np.ndarray | None, bool]:
    """Encoding-weighted sum of point embeddings.

    Returns (prototype, valid). An all-zero encoding (the click's tau-disk
    lost every point to downsampling) yields (None, False).
    """
    w = _prototype_weights(encoding)
    if w is None:
        return None, False
    f = np.asarray(features, dtype=np.float64)
    return w @ f, True


def correlation_map(features: np.ndarray, prototype: np.ndarray) -> np.ndarray:
    """Cosine similarity of each embedding row against the prototype."""
    f = Tensor(np.asarray(features, dtype=np.float64))
    p = Tensor(np.asarray(prototype, dtype=np.float64))
    return ad.cosine_rows(f, p).data.reshape(-1)


def classwise_maps(
    clickwise: Sequence[tuple[np.ndarray, int | None]],
    class_count: int,
    n_points: int | None = None,
) -> np.ndarray:
    """Element-wise max over same-class maps; negatives pool into row C.

    Channels with no clicks stay all-zero, but a populated channel is the
    exact max of its maps: negative correlation values are preserved, not
    floored at zero.
    """
    if n_points is None:
        if not clickwise:
            raise ValueError("n_points required for empty map lists")
        n_points = len(clickwise[0][0])
    out = np.zeros((class_count + 1, n_points), dtype=np.float64)
    filled = [False] * (class_count + 1)
    for m, class_id in clickwise:
        m = np.asarray(m, dtype=np.float64)
        if len(m) != n_points:
            raise ValueError("all maps must have the same length")
        if class_id is None:
            row = class_count
        elif 1 <= class_id <= class_count:
            row = class_id - 1
        else:
            raise ValueError(f"class id {class_id} outside 1..{class_count}")
        if filled[row]:
            np.maximum(out[row], m, out=out[row])
        else:
            out[row] = m
            filled[row] = True
    return out


def scp_channels(
    features: Tensor,
    clicks: ClickSet,
    coords: np.ndarray,
    tau: float,
    class_count: int,
    include_negative: bool = True,
    include_positive: bool = True,
) -> Tensor:
    """Differentiable class-wise correlation channels, shape (N', C(+1)).

    The prototype weights come from the click encodings (constants); the
    prototype, the cosine maps, and the class-wise max pooling all carry
    gradients back into the point embeddings. Channel layout matches the
    click channels: class rows first (when ``include_positive``), then the
    negative row (when ``include_negative``).
    """
    n = len(coords)
    n_pos = class_count if include_positive else 0
    n_channels = n_pos + (1 if include_negative else 0)
    per_channel: list[Tensor | None] = [None] * n_channels
    for click in clicks:
        if click.is_positive:
            if not include_positive:
                continue
            row = click.class_id - 1
        elif include_negative:
            row = n_pos
        else:
            continue
        w = _prototype_weights(encode_click(click, coords, tau))
        if w is None:
            continue  # invalid click: no surviving support
        proto = ad.matmul(Tensor(w.reshape(1, -1)), features)       # (1, D)
        m = ad.cosine_rows(features, ad.reshape(proto, (features.shape[1],)))
        prev = per_channel[row]
        per_channel[row] = m if prev is None else ad.max_elemwise(prev, m)
    if n_channels == 0:
        return Tensor(np.zeros((n, 0)))
    zeros = Tensor(np.zeros((n, 1)))
    cols = [c if c is not None else zeros for c in per_channel]
    return ad.concat(cols, axis=1)


def compute_scp_maps(
    enc: EncoderOutput,
    clicks: ClickSet,
    tau: float,
    class_count: int,
) -> ScpMaps:
    """Numpy-facing SCP summary for inspection, export, and the service."""
    features = enc.features.data
    coords = enc.coords
    n = len(coords)
    k = len(clicks)
    d = features.shape[1]
    prototypes = np.zeros((k, d))
    clickwise = np.zeros((k, n))
    valid = np.zeros(k, dtype=bool)
    class_ids: list[int | None] = []
    for i, click in enumerate(clicks):
        class_ids.append(click.class_id if click.is_positive else None)
        proto, ok = click_prototype(features, encode_click(click, coords, tau))
        if not ok:
            continue
        prototypes[i] = proto
        clickwise[i] = correlation_map(features, proto)
        valid[i] = True
    pooled = classwise_maps(
        [(clickwise[i], class_ids[i]) for i in range(k) if valid[i]],
        class_count,
        n_points=n,
    )
    return ScpMaps(
        prototypes=prototypes,
        clickwise=clickwise,
        classwise=pooled,
        valid=valid,
        class_ids=tuple(class_ids),
    )


def export_correlation_heatmap(
    maps: ScpMaps,
    coords: np.ndarray,
    scene,
    out_base,
    channels: Sequence[int] | None = None,
) -> list[Path]:
    """Write BEV scatter heatmaps (PNG) plus raw-value JSON per channel.

    Values are rescaled from [-1, 1] to [0, 1] for display only; the JSON
    carries the raw values. Ground-truth footprints are overlaid as outlines.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    n_channels = maps.classwise.shape[0]
    if channels is None:
        channels = range(n_channels)
    written: list[Path] = []
    for ch in channels:
        if not 0 <= ch < n_channels:
            raise ValueError(f"channel {ch} outside 0..{n_channels - 1}")
        values = maps.classwise[ch]
        display = 0.5 * (values + 1.0)
        fig, ax = plt.subplots(figsize=(6, 6))
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=display, s=12, cmap="viridis", vmin=0.0, vmax=1.0)
        for box in getattr(scene, "boxes", ()):
            corners = geometry.bev_corners(box)
            ring = np.vstack([corners, corners[:1]])
            ax.plot(ring[:, 0], ring[:, 1], color="lime", linewidth=1.0)
        label = f"class {ch + 1}" if ch < n_channels - 1 else "negative"
        ax.set_title(f"correlation channel: {label}")
        ax.set_aspect("equal")
        fig.colorbar(sc, ax=ax, shrink=0.8)
        png_path = out_base.with_name(f"{out_base.name}_ch{ch}.png")
        json_path = out_base.with_name(f"{out_base.name}_ch{ch}.json")
        fig.savefig(png_path, dpi=110)
        plt.close(fig)
        json_path.write_text(json.dumps({
            "channel": ch,
            "n_points": int(len(values)),
            "values": [float(v) for v in values],
        }))
        written.extend([png_path, json_path])
    return written
