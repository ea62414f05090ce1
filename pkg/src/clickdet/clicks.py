"""Click data model, distance encoding, class-wise pooling, and simulation.

A click is a 2D bird's-eye-view coordinate: positive clicks carry a class,
negative clicks are class-agnostic. Each click turns into a per-point
heatmap supported on a disk of radius ``tau`` around the click:

    E[i] = exp(max((tau - d_i) / tau, 0) * ln 2) - 1

with ``d_i`` the 2D distance from the click to point i, so E is 1 at the
click, decays smoothly, and is exactly 0 from distance tau outward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .scenes import Scene

POSITIVE = "pos"
NEGATIVE = "neg"

DEFAULT_TAU = 2.0


@dataclass(frozen=True)
class Click:
    x: float
    y: float
    kind: str
    class_id: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in (POSITIVE, NEGATIVE):
            raise ValueError(f"kind must be {POSITIVE!r} or {NEGATIVE!r}, got {self.kind!r}")
        if self.kind == POSITIVE:
            if self.class_id is None or self.class_id < 1:
                raise ValueError("positive clicks need a class_id >= 1")
        elif self.class_id is not None:
            raise ValueError("negative clicks are class-agnostic")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("click coordinates must be finite")

    @property
    def is_positive(self) -> bool:
        return self.kind == POSITIVE

    def to_wire(self, k: int) -> dict:
        obj = {"k": k, "kind": self.kind, "x": self.x, "y": self.y}
        if self.is_positive:
            obj["class"] = self.class_id
        return obj

    @classmethod
    def from_wire(cls, obj: dict) -> "Click":
        if not isinstance(obj, dict):
            raise ValueError("click payload must be an object")
        missing = {"kind", "x", "y"} - obj.keys()
        if missing:
            raise ValueError(f"click payload missing {sorted(missing)}")
        kind = obj["kind"]
        try:
            x, y = float(obj["x"]), float(obj["y"])
        except (TypeError, ValueError) as exc:
            raise ValueError("click coordinates must be numbers") from exc
        class_id = obj.get("class")
        return cls(x=x, y=y, kind=kind, class_id=class_id)


class ClickSet:
    """An ordered, immutable sequence of clicks.

    Order matters: the protocol accumulates clicks one at a time, and undo
    pops the most recent one.
    """

    __slots__ = ("_clicks",)

    def __init__(self, clicks: Iterable[Click] = ()):
        self._clicks = tuple(clicks)

    def __len__(self) -> int:
        return len(self._clicks)

    def __iter__(self):
        return iter(self._clicks)

    def __getitem__(self, i) -> Click:
        return self._clicks[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClickSet):
            return NotImplemented
        return self._clicks == other._clicks

    def __hash__(self):
        return hash(self._clicks)

    def __repr__(self) -> str:
        return f"ClickSet({list(self._clicks)!r})"

    @property
    def n_positive(self) -> int:
        return sum(1 for c in self._clicks if c.is_positive)

    @property
    def n_negative(self) -> int:
        return len(self._clicks) - self.n_positive

    @property
    def positives(self) -> tuple[Click, ...]:
        return tuple(c for c in self._clicks if c.is_positive)

    @property
    def negatives(self) -> tuple[Click, ...]:
        return tuple(c for c in self._clicks if not c.is_positive)

    def add(self, click: Click) -> "ClickSet":
        return ClickSet(self._clicks + (click,))

    def without_last(self) -> "ClickSet":
        if not self._clicks:
            raise ValueError("no clicks to remove")
        return ClickSet(self._clicks[:-1])

    def to_wire(self) -> list[dict]:
        return [c.to_wire(k) for k, c in enumerate(self._clicks)]

    @classmethod
    def from_wire(cls, items: Sequence[dict]) -> "ClickSet":
        return cls(Click.from_wire(obj) for obj in items)


@dataclass(frozen=True)
class ClickEncoding:
    """Per-click heatmaps plus their class-wise max-pooled channels.

    ``per_click`` is (K, N); ``classwise`` is (C+1, N) with row c-1 for class
    c and the final row for the class-agnostic negative channel.
    """

    per_click: np.ndarray
    classwise: np.ndarray
    class_ids: tuple[int | None, ...]
    tau: float


def encode_click(click, coords: np.ndarray, tau: float) -> np.ndarray:
    """Distance heatmap of one click against (N, >=2) point coordinates."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    pts = np.asarray(coords, dtype=np.float64)
    if isinstance(click, Click):
        px, py = click.x, click.y
    else:
        px, py = float(click[0]), float(click[1])
    d = np.hypot(pts[:, 0] - px, pts[:, 1] - py)
    t = np.maximum((tau - d) / tau, 0.0)
    return np.exp(t * math.log(2.0)) - 1.0


def pool_classwise(
    encodings: Sequence[tuple[np.ndarray, int | None]],
    class_count: int,
    n_points: int | None = None,
) -> np.ndarray:
    """Element-wise max pooling into (C+1, N) channels.

    Positive encodings pool into their class row; negatives (class None)
    pool into the final row. Rows with no clicks stay all-zero.
    """
    if n_points is None:
        if not encodings:
            raise ValueError("n_points required for empty encoding lists")
        n_points = len(encodings[0][0])
    out = np.zeros((class_count + 1, n_points), dtype=np.float64)
    for enc, class_id in encodings:
        enc = np.asarray(enc, dtype=np.float64)
        if len(enc) != n_points:
            raise ValueError("all encodings must have the same length")
        if class_id is None:
            row = class_count
        elif 1 <= class_id <= class_count:
            row = class_id - 1
        else:
            raise ValueError(f"class id {class_id} outside 1..{class_count}")
        np.maximum(out[row], enc, out=out[row])
    return out


def encode_click_set(clicks: ClickSet, coords: np.ndarray, tau: float, class_count: int) -> ClickEncoding:
    n = len(np.asarray(coords))
    per_click = np.zeros((len(clicks), n), dtype=np.float64)
    class_ids: list[int | None] = []
    for k, c in enumerate(clicks):
        per_click[k] = encode_click(c, coords, tau)
        class_ids.append(c.class_id if c.is_positive else None)
    classwise = pool_classwise(list(zip(per_click, class_ids)), class_count, n_points=n)
    return ClickEncoding(per_click=per_click, classwise=classwise, class_ids=tuple(class_ids), tau=tau)


def encode_for_stage(
    clicks: ClickSet,
    stage_coords: np.ndarray,
    tau: float,
    class_count: int,
    include_negative: bool = False,
) -> np.ndarray:
    """Click channels recomputed against one stage's surviving coordinates.

    Returns (N', C) or (N', C+1) with class channels first. Recomputing from
    coordinates (rather than gathering stale indices) keeps a click's
    tau-disk support intact whenever any in-disk point survives downsampling.
    """
    pts = np.asarray(stage_coords, dtype=np.float64)
    enc = encode_click_set(clicks, pts, tau, class_count)
    channels = enc.classwise if include_negative else enc.classwise[:class_count]
    return np.ascontiguousarray(channels.T)


def simulate_positive_clicks(scene: Scene, n_u_max: int, rng: np.random.Generator) -> ClickSet:
    """Training-time positive click simulation.

    Draws the user budget uniformly from {0..n_u_max}, clips to the number
    of objects, picks that many distinct boxes, and clicks a uniform point
    inside each chosen box's BEV footprint.
    """
    if n_u_max < 0:
        raise ValueError("n_u_max must be >= 0")
    n_objects = len(scene.boxes)
    n_u = int(rng.integers(0, n_u_max + 1))
    k = min(n_u, n_objects)
    if k == 0:
        return ClickSet()
    chosen = rng.choice(n_objects, size=k, replace=False)
    clicks = []
    for idx in chosen:
        box = scene.boxes[int(idx)]
        clicks.append(sample_click_in_box(box, rng))
    return ClickSet(clicks)


def sample_click_in_box(box, rng: np.random.Generator, kind: str = POSITIVE) -> Click:
    """Uniform 2D sample inside a box's rotated BEV footprint."""
    u = rng.uniform(-0.5 * box.l, 0.5 * box.l)
    v = rng.uniform(-0.5 * box.w, 0.5 * box.w)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = box.cx + c * u - s * v
    y = box.cy + s * u + c * v
    if kind == POSITIVE:
        return Click(x=x, y=y, kind=POSITIVE, class_id=box.class_id)
    return Click(x=x, y=y, kind=NEGATIVE)
