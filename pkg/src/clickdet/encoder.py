"""Miniature set-abstraction point encoder with dense click guidance.

Each stage concatenates the click channels (recomputed against the stage's
own coordinates), groups every retained point with its k nearest neighbors,
runs a shared MLP over (neighbor features, relative offset) rows, and
max-pools over the neighborhood. The first stage downsamples by farthest
point sampling for coverage; later stages keep the top-n points by learned
foreground score, which is what makes the sampling instance-aware and what
the negative-click simulator piggybacks on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .clicks import ClickSet, encode_for_stage
from .scenes import Scene


@dataclass(frozen=True)
class StageSpec:
    points_out: int
    k_neighbors: int
    mlp: tuple[int, ...]

    def validate(self) -> None:
        if self.points_out < 1 or self.k_neighbors < 1 or not self.mlp:
            raise ValueError(f"invalid stage spec {self}")


@dataclass(frozen=True)
class EncoderConfig:
    stages: tuple[StageSpec, ...] = (
        StageSpec(points_out=320, k_neighbors=16, mlp=(32, 32)),
        StageSpec(points_out=96, k_neighbors=16, mlp=(32, 32)),
    )
    feature_dim: int = 32
    class_count: int = 3
    extra_dim: int = 1
    tau: float = 2.0
    # When True the class-agnostic negative channel also feeds every stage;
    # default keeps it post-encoder only.
    negative_channel_at_input: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("at least one stage required")
        for spec in self.stages:
            spec.validate()
        outs = [s.points_out for s in self.stages]
        if any(b >= a for a, b in zip(outs, outs[1:])):
            raise ValueError(f"points_out must strictly decrease across stages, got {outs}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.stages[-1].mlp[-1] != self.feature_dim:
            raise ValueError("last stage MLP width must equal feature_dim")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def stage_channels(self) -> int:
        return self.class_count + (1 if self.negative_channel_at_input else 0)

    def to_json(self) -> dict:
        return {
            "stages": [[s.points_out, s.k_neighbors, list(s.mlp)] for s in self.stages],
            "feature_dim": self.feature_dim,
            "class_count": self.class_count,
            "extra_dim": self.extra_dim,
            "tau": self.tau,
            "negative_channel_at_input": self.negative_channel_at_input,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderConfig":
        return cls(
            stages=tuple(StageSpec(p, k, tuple(m)) for p, k, m in obj["stages"]),
            feature_dim=obj["feature_dim"],
            class_count=obj["class_count"],
            extra_dim=obj.get("extra_dim", 1),
            tau=obj.get("tau", 2.0),
            negative_channel_at_input=obj.get("negative_channel_at_input", False),
            seed=obj.get("seed", 0),
        )


@dataclass
class StageScores:
    """A scoring layer's sigmoid output and the coordinates it scored."""

    coords: np.ndarray
    scores: Tensor


@dataclass
class EncoderOutput:
    coords: np.ndarray                       # (N', 3)
    features: Tensor                         # (N', D)
    fg_scores: Tensor                        # (N', 1), sigmoid
    kept_indices: tuple[np.ndarray, ...]     # per stage, into that stage's input
    stage_scores: tuple[StageScores, ...]    # every scoring layer, for supervision

    @property
    def fg_score_values(self) -> np.ndarray:
        return self.fg_scores.data.reshape(-1)


def farthest_point_sampling(coords: np.ndarray, n: int) -> np.ndarray:
    """Deterministic FPS; starts from the point farthest from the centroid.

    The geometric start point makes the selected set permutation-invariant
    (up to exact distance ties, which break to the lowest index).
    """
    pts = np.asarray(coords, dtype=np.float64)
    if n > len(pts):
        raise ValueError(f"cannot sample {n} from {len(pts)} points")
    centroid = pts.mean(axis=0)
    start = int(np.argmax(((pts - centroid) ** 2).sum(axis=1)))
    chosen = np.empty(n, dtype=np.intp)
    chosen[0] = start
    dist = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1), out=dist)
    return chosen


def knn_indices(query: np.ndarray, ref: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest reference points per query, nearest first.

    Deterministic for a fixed input; exact distance ties at the k-boundary
    may pick either point (tied inputs are outside the equivariance
    contract). When fewer than k references exist the first column is
    repeated, which is harmless under neighborhood max pooling.
    """
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    k_eff = min(k, len(r))
    d2 = (q * q).sum(axis=1)[:, None] + (r * r).sum(axis=1)[None, :] - 2.0 * (q @ r.T)
    np.maximum(d2, 0.0, out=d2)
    if k_eff < len(r):
        cand = np.argpartition(d2, k_eff - 1, axis=1)[:, :k_eff]
    else:
        cand = np.broadcast_to(np.arange(len(r)), (len(q), len(r))).copy()
    cand_d = np.take_along_axis(d2, cand, axis=1)
    order = np.argsort(cand_d, axis=1, kind="stable")
    idx = np.take_along_axis(cand, order, axis=1)
    if k_eff < k:
        idx = np.hstack([idx, np.repeat(idx[:, :1], k - k_eff, axis=1)])
    return idx


def top_n_indices(scores: np.ndarray, n: int) -> np.ndarray:
    """Top-n by descending score; ties keep the lowest index."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if n > len(s):
        raise ValueError(f"cannot keep {n} of {len(s)} points")
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:n])


def _init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out)), np.zeros(d_out)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Seeded parameter init for all stage MLPs and scoring heads."""
    cfg.validate()
    params: dict[str, Tensor] = {}
    ch = cfg.stage_channels
    # Input features are height + extras; planar position enters only through
    # relative neighbor offsets, keeping the network translation-invariant.
    d_in = 1 + cfg.extra_dim + ch
    for i, spec in enumerate(cfg.stages):
        if i > 0:
            # Score head sees the incoming features plus click channels.
            w, b = _init_linear(rng, d_in, 1)
            params[f"enc.s{i}.score.W"] = Tensor(w, requires_grad=True)
            params[f"enc.s{i}.score.b"] = Tensor(b, requires_grad=True)
        width = d_in + 7  # + relative offset and its quadratic expansion
        for j, out_w in enumerate(spec.mlp):
            w, b = _init_linear(rng, width, out_w)
            params[f"enc.s{i}.lin{j}.W"] = Tensor(w, requires_grad=True)
            params[f"enc.s{i}.lin{j}.b"] = Tensor(b, requires_grad=True)
            width = out_w
        d_in = spec.mlp[-1] + ch
    w, b = _init_linear(rng, cfg.feature_dim, 1)
    params["enc.fg.W"] = Tensor(w, requires_grad=True)
    params["enc.fg.b"] = Tensor(b, requires_grad=True)
    return params


def sa_stage(
    coords: np.ndarray,
    feats: Tensor,
    click_channels: np.ndarray | None,
    spec: StageSpec,
    params: dict[str, Tensor],
    stage_idx: int,
) -> tuple[np.ndarray, Tensor, np.ndarray, StageScores | None]:
    """One set-abstraction stage.

    Returns (kept coords, new features, kept indices, scoring output).
    Stage 0 selects by farthest point sampling; later stages select the
    top-n points by learned foreground score computed on the incoming
    features (click channels included, so clicked points tend to survive).
    """
    n_in = len(coords)
    if spec.points_out > n_in:
        raise ValueError(f"stage {stage_idx}: points_out {spec.points_out} > {n_in} input points")

    if click_channels is not None:
        if click_channels.shape[0] != n_in:
            raise ValueError("click channels misaligned with stage coordinates")
        x_in = ad.concat([feats, Tensor(click_channels)], axis=1)
    else:
        x_in = feats

    score_out: StageScores | None = None
    if stage_idx == 0:
        keep = farthest_point_sampling(coords, spec.points_out)
    else:
        logit = ad.linear(x_in, params[f"enc.s{stage_idx}.score.W"], params[f"enc.s{stage_idx}.score.b"])
        scores = ad.sigmoid(logit)
        score_out = StageScores(coords=coords, scores=scores)
        keep = top_n_indices(scores.data.reshape(-1), spec.points_out)

    centroids = coords[keep]
    nbrs = knn_indices(centroids, coords, spec.k_neighbors)   # (M, k)
    k = nbrs.shape[1]
    flat = nbrs.reshape(-1)
    rel = coords[flat] - np.repeat(centroids, k, axis=0)      # (M*k, 3)
    # Quadratic expansion of the planar offset: after neighborhood pooling
    # these make local extent and orientation linearly readable.
    quad = np.column_stack([
        rel[:, 0] * rel[:, 0],
        rel[:, 1] * rel[:, 1],
        rel[:, 0] * rel[:, 1],
        np.hypot(rel[:, 0], rel[:, 1]),
    ])

    rows = ad.concat([ad.gather_rows(x_in, flat), Tensor(rel), Tensor(quad)], axis=1)
    for j in range(len(spec.mlp)):
        rows = ad.relu(ad.linear(rows, params[f"enc.s{stage_idx}.lin{j}.W"], params[f"enc.s{stage_idx}.lin{j}.b"]))
    groups = np.arange(len(flat), dtype=np.intp).reshape(-1, k)
    pooled = ad.max_over_group(rows, groups)
    return centroids, pooled, keep, score_out


def foreground_scores(features: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Sigmoid of the learned per-point foreground scalar."""
    return ad.sigmoid(ad.linear(features, params["enc.fg.W"], params["enc.fg.b"]))


ChannelProvider = Callable[[np.ndarray], np.ndarray]


def encode(
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    scene: Scene,
    clicks: ClickSet,
    dense_guidance: bool = True,
    channel_provider: ChannelProvider | None = None,
) -> EncoderOutput:
    """Full encoder forward over a scene.

    ``dense_guidance`` recomputes click channels at every stage input; when
    off, only the raw input points receive them. ``channel_provider``
    overrides the channel computation (used by the vanilla-equivalence
    check); it maps stage coordinates to an (n, stage_channels) matrix.
    """
    cfg.validate()
    if scene.class_count != cfg.class_count:
        raise ValueError(
            f"scene has {scene.class_count} classes but encoder expects {cfg.class_count}"
        )
    if scene.extra_dim != cfg.extra_dim:
        raise ValueError(
            f"scene has {scene.extra_dim} extra features but encoder expects {cfg.extra_dim}"
        )
    if scene.n_points < cfg.stages[0].points_out:
        raise ValueError(
            f"scene with {scene.n_points} points is smaller than the first stage "
            f"({cfg.stages[0].points_out} points)"
        )

    if channel_provider is None:
        def channel_provider(stage_coords: np.ndarray) -> np.ndarray:
            return encode_for_stage(
                clicks, stage_coords, cfg.tau, cfg.class_count,
                include_negative=cfg.negative_channel_at_input,
            )

    coords = np.asarray(scene.xyz, dtype=np.float64)
    feats = Tensor(np.asarray(scene.points[:, 2:], dtype=np.float64))  # z + extras
    kept: list[np.ndarray] = []
    stage_scores: list[StageScores] = []
    for i, spec in enumerate(cfg.stages):
        channels = channel_provider(coords) if (dense_guidance or i == 0) else None
        coords, feats, keep, score_out = sa_stage(coords, feats, channels, spec, params, i)
        kept.append(keep)
        if score_out is not None:
            stage_scores.append(score_out)

    fg = foreground_scores(feats, params)
    stage_scores.append(StageScores(coords=coords, scores=fg))
    return EncoderOutput(
        coords=coords,
        features=feats,
        fg_scores=fg,
        kept_indices=tuple(kept),
        stage_scores=tuple(stage_scores),
    )
