"""Synthetic LiDAR-like scenes: data model, generator, and file I/O.

A scene is a flat float32 point array plus oriented ground-truth boxes.
Generation is fully deterministic for a fixed (config, seed) pair, so the
corpus can be regenerated bit-for-bit from the manifest alone.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry
from .geometry import normalize_yaw

SCENE_MAGIC = b"PCSCENE\x00"
SCENE_VERSION = 1

# Minimum number of generated points guaranteed to fall inside each labeled box.
MIN_POINTS_PER_OBJECT = 8


class SceneIOError(Exception):
    """Base class for scene container problems."""


class SceneFormatError(SceneIOError):
    """Malformed header or metadata block."""


class SceneVersionError(SceneIOError):
    """Container version not supported by this reader."""


class SceneTruncatedError(SceneIOError):
    """File ends before the declared payload is complete."""


@dataclass(frozen=True)
class GtBox:
    """Ground-truth oriented box; yaw is normalized into [-pi, pi)."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int

    def __post_init__(self) -> None:
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {(self.l, self.w, self.h)}")
        if self.class_id < 1:
            raise ValueError(f"class_id must be >= 1, got {self.class_id}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def to_json(self) -> dict:
        return {
            "cx": self.cx, "cy": self.cy, "cz": self.cz,
            "l": self.l, "w": self.w, "h": self.h,
            "yaw": self.yaw, "class": self.class_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GtBox":
        return cls(
            cx=obj["cx"], cy=obj["cy"], cz=obj["cz"],
            l=obj["l"], w=obj["w"], h=obj["h"],
            yaw=obj["yaw"], class_id=obj["class"],
        )


@dataclass(frozen=True)
class Scene:
    """An immutable point cloud scene with labeled boxes.

    ``points`` is float32 of shape (N, 3 + extra_dim): columns are x, y, z
    followed by per-point extra features (intensity by default).
    """

    scene_id: str
    points: np.ndarray
    boxes: tuple[GtBox, ...]
    class_count: int
    seed: int
    extra_dim: int = 1

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 + self.extra_dim:
            raise ValueError(f"points must have shape (N, {3 + self.extra_dim}), got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("scene must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("scene points must be finite")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        for box in self.boxes:
            if not 1 <= box.class_id <= self.class_count:
                raise ValueError(f"box class {box.class_id} outside 1..{self.class_count}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def bev(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def extras(self) -> np.ndarray:
        return self.points[:, 3:]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.seed == other.seed
            and self.class_count == other.class_count
            and self.extra_dim == other.extra_dim
            and self.boxes == other.boxes
            and self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
        )

    def __hash__(self):
        return hash((self.scene_id, self.seed, self.n_points))


@dataclass(frozen=True)
class SceneGenConfig:
    """Knobs for the synthetic scene generator.

    Class archetypes default to car / pedestrian / cyclist size envelopes.
    Clutter clusters are box-shaped point blobs with no label; they provide
    the confusable background that negative clicks exist to suppress.
    """

    # per class: (min, max) object count, inclusive
    object_counts: tuple[tuple[int, int], ...] = ((0, 3), (0, 3), (0, 2))
    # per class: ((lmin, lmax), (wmin, wmax), (hmin, hmax))
    size_ranges: tuple[tuple[tuple[float, float], ...], ...] = (
        ((3.5, 4.6), (1.5, 2.0), (1.4, 1.8)),
        ((0.4, 0.8), (0.4, 0.8), (1.5, 1.8)),
        ((1.5, 2.0), (0.5, 0.8), (1.5, 1.9)),
    )
    clutter_count: tuple[int, int] = (2, 6)
    clutter_size_ranges: tuple[tuple[float, float], ...] = ((0.5, 4.5), (0.4, 2.1), (0.5, 1.9))
    ground_density: float = 1.0          # points per square meter
    surface_density: float = 6.0         # points per square meter of object surface
    # per-class multiplier on surface_density; small objects need denser
    # sampling to survive downsampling with usable geometry
    class_density_scale: tuple[float, ...] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.03            # meters
    clutter_noise_scale: float = 2.0     # clutter blobs are noisier than objects
    fov: tuple[float, float, float, float] = (-16.0, 16.0, -16.0, 16.0)
    extra_dim: int = 1
    seed: int = 0

    @property
    def class_count(self) -> int:
        return len(self.object_counts)

    def validate(self) -> None:
        if len(self.size_ranges) != self.class_count:
            raise ValueError("size_ranges and object_counts must cover the same classes")
        for lo, hi in self.object_counts:
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid object count range ({lo}, {hi})")
        for ranges in self.size_ranges:
            for lo, hi in ranges:
                if lo <= 0 or hi < lo:
                    raise ValueError(f"degenerate size range ({lo}, {hi})")
        for lo, hi in self.clutter_size_ranges:
            if lo <= 0 or hi < lo:
                raise ValueError(f"degenerate clutter size range ({lo}, {hi})")
        if any(sc <= 0 for sc in self.class_density_scale):
            raise ValueError("class_density_scale entries must be positive")
        lo, hi = self.clutter_count
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid clutter count range ({lo}, {hi})")
        if self.ground_density <= 0 or self.surface_density <= 0:
            raise ValueError("densities must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        x0, x1, y0, y1 = self.fov
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"empty field of view {self.fov}")
        if self.extra_dim < 0:
            raise ValueError("extra_dim must be non-negative")

    def to_json(self) -> dict:
        return {
            "object_counts": [list(r) for r in self.object_counts],
            "size_ranges": [[list(r) for r in ranges] for ranges in self.size_ranges],
            "clutter_count": list(self.clutter_count),
            "clutter_size_ranges": [list(r) for r in self.clutter_size_ranges],
            "ground_density": self.ground_density,
            "surface_density": self.surface_density,
            "class_density_scale": list(self.class_density_scale),
            "noise_sigma": self.noise_sigma,
            "clutter_noise_scale": self.clutter_noise_scale,
            "fov": list(self.fov),
            "extra_dim": self.extra_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneGenConfig":
        defaults = cls()
        def rngs(key, fallback):
            if key not in obj:
                return fallback
            val = obj[key]
            if key == "size_ranges":
                return tuple(tuple(tuple(r) for r in ranges) for ranges in val)
            if key in ("object_counts", "clutter_size_ranges"):
                return tuple(tuple(r) for r in val)
            return tuple(val)
        return cls(
            object_counts=rngs("object_counts", defaults.object_counts),
            size_ranges=rngs("size_ranges", defaults.size_ranges),
            clutter_count=rngs("clutter_count", defaults.clutter_count),
            clutter_size_ranges=rngs("clutter_size_ranges", defaults.clutter_size_ranges),
            ground_density=obj.get("ground_density", defaults.ground_density),
            surface_density=obj.get("surface_density", defaults.surface_density),
            class_density_scale=rngs("class_density_scale", defaults.class_density_scale),
            noise_sigma=obj.get("noise_sigma", defaults.noise_sigma),
            clutter_noise_scale=obj.get("clutter_noise_scale", defaults.clutter_noise_scale),
            fov=rngs("fov", defaults.fov),
            extra_dim=obj.get("extra_dim", defaults.extra_dim),
            seed=obj.get("seed", defaults.seed),
        )


def _sample_box_surface(rng: np.random.Generator, l: float, w: float, h: float, n: int) -> np.ndarray:
    """Uniform samples over the six faces of an axis-aligned box, box frame."""
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    for i, f in enumerate(faces):
        if f < 2:       # +-x faces
            pts[i] = ((0.5 if f == 0 else -0.5) * l, u[i] * w, v[i] * h)
        elif f < 4:     # +-y faces
            pts[i] = (u[i] * l, (0.5 if f == 2 else -0.5) * w, v[i] * h)
        else:           # +-z faces
            pts[i] = (u[i] * l, v[i] * w, (0.5 if f == 4 else -0.5) * h)
    return pts


def _place_cluster(rng, center: np.ndarray, yaw: float, l, w, h, n, sigma) -> np.ndarray:
    local = _sample_box_surface(rng, l, w, h, n)
    if sigma > 0:
        local = local + rng.normal(0.0, sigma, size=local.shape)
    c, s = math.cos(yaw), math.sin(yaw)
    out = np.empty_like(local)
    out[:, 0] = c * local[:, 0] - s * local[:, 1] + center[0]
    out[:, 1] = s * local[:, 0] + c * local[:, 1] + center[1]
    out[:, 2] = local[:, 2] + center[2]
    return out


def _surface_point_count(cfg: SceneGenConfig, l: float, w: float, h: float, scale: float = 1.0) -> int:
    area = 2.0 * (l * w + l * h + w * h)
    return max(int(round(area * cfg.surface_density * scale)), 2 * MIN_POINTS_PER_OBJECT)


def _far_enough(cx, cy, l, w, placed) -> bool:
    r = 0.5 * math.hypot(l, w)
    for (ox, oy, ol, ow) in placed:
        if math.hypot(cx - ox, cy - oy) < r + 0.5 * math.hypot(ol, ow) + 0.5:
            return False
    return True


def generate_scene(cfg: SceneGenConfig, seed: int) -> Scene:
    """Generate one deterministic scene.

    Every labeled box is guaranteed to contain at least
    ``MIN_POINTS_PER_OBJECT`` points; clusters whose surface noise pushes too
    many samples outside are topped up with interior samples.
    """
    cfg.validate()
    if seed < 0:
        raise ValueError("seed must be unsigned")
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = cfg.fov

    chunks: list[np.ndarray] = []
    boxes: list[GtBox] = []
    placed: list[tuple[float, float, float, float]] = []

    # Ground plane.
    n_ground = max(int(round((x1 - x0) * (y1 - y0) * cfg.ground_density)), 1)
    ground = np.column_stack([
        rng.uniform(x0, x1, n_ground),
        rng.uniform(y0, y1, n_ground),
        rng.normal(0.0, cfg.noise_sigma, n_ground),
    ])
    chunks.append(ground)

    # Labeled objects per class.
    margin = 1.0
    for class_idx, (lo, hi) in enumerate(cfg.object_counts):
        count = int(rng.integers(lo, hi + 1))
        (lmin, lmax), (wmin, wmax), (hmin, hmax) = cfg.size_ranges[class_idx]
        for _ in range(count):
            l = rng.uniform(lmin, lmax)
            w = rng.uniform(wmin, wmax)
            h = rng.uniform(hmin, hmax)
            # canonical pose keeps footprint labels unambiguous (yaw mod pi)
            l, w, yaw = geometry.canonical_box_pose(l, w, rng.uniform(-math.pi, math.pi))
            for _attempt in range(64):
                cx = rng.uniform(x0 + margin, x1 - margin)
                cy = rng.uniform(y0 + margin, y1 - margin)
                if _far_enough(cx, cy, l, w, placed):
                    break
            else:
                continue  # no room left; skip this object
            cz = 0.5 * h
            box = GtBox(cx=cx, cy=cy, cz=cz, l=l, w=w, h=h, yaw=yaw, class_id=class_idx + 1)
            scale = cfg.class_density_scale[class_idx] if class_idx < len(cfg.class_density_scale) else 1.0
            n = _surface_point_count(cfg, l, w, h, scale)
            # sample an inset surface so noise rarely pushes points outside
            # the labeled box (boundary label noise otherwise poisons the
            # per-point classification targets)
            inset = 2.0 * cfg.noise_sigma
            li = max(l - 2 * inset, 0.5 * l)
            wi = max(w - 2 * inset, 0.5 * w)
            hi = max(h - 2 * inset, 0.5 * h)
            pts = _place_cluster(rng, np.array([cx, cy, cz]), yaw, li, wi, hi, n, cfg.noise_sigma)
            inside = int(geometry.points_in_box_mask(pts, box).sum())
            if inside < MIN_POINTS_PER_OBJECT:
                # Interior fill keeps the in-box guarantee independent of noise.
                need = MIN_POINTS_PER_OBJECT - inside
                fill_local = np.column_stack([
                    rng.uniform(-0.49 * l, 0.49 * l, need),
                    rng.uniform(-0.49 * w, 0.49 * w, need),
                    rng.uniform(-0.49 * h, 0.49 * h, need),
                ])
                c, s = math.cos(yaw), math.sin(yaw)
                fill = np.column_stack([
                    c * fill_local[:, 0] - s * fill_local[:, 1] + cx,
                    s * fill_local[:, 0] + c * fill_local[:, 1] + cy,
                    fill_local[:, 2] + cz,
                ])
                pts = np.vstack([pts, fill])
            chunks.append(pts)
            boxes.append(box)
            placed.append((cx, cy, l, w))

    # Clutter: object-scale blobs with no labels.
    clo, chi = cfg.clutter_count
    n_clutter = int(rng.integers(clo, chi + 1))
    (clmin, clmax), (cwmin, cwmax), (chmin, chmax) = cfg.clutter_size_ranges
    for _ in range(n_clutter):
        l = rng.uniform(clmin, clmax)
        w = rng.uniform(cwmin, cwmax)
        h = rng.uniform(chmin, chmax)
        yaw = rng.uniform(-math.pi, math.pi)
        for _attempt in range(64):
            cx = rng.uniform(x0 + margin, x1 - margin)
            cy = rng.uniform(y0 + margin, y1 - margin)
            if _far_enough(cx, cy, l, w, placed):
                break
        else:
            continue
        cz = 0.5 * h
        n = _surface_point_count(cfg, l, w, h)
        sigma = cfg.noise_sigma * cfg.clutter_noise_scale
        pts = _place_cluster(rng, np.array([cx, cy, cz]), yaw, l, w, h, n, sigma)
        chunks.append(pts)
        placed.append((cx, cy, l, w))

    xyz = np.vstack(chunks)
    extras = rng.uniform(0.0, 1.0, size=(len(xyz), cfg.extra_dim))
    points = np.hstack([xyz, extras]).astype(np.float32)
    return Scene(
        scene_id=f"scene{seed:08d}",
        points=points,
        boxes=tuple(boxes),
        class_count=cfg.class_count,
        seed=seed,
        extra_dim=cfg.extra_dim,
    )


def save_scene(scene: Scene, path) -> None:
    """Write the container: magic, version byte, JSON metadata, float32 payload."""
    meta = {
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "class_count": scene.class_count,
        "extra_dim": scene.extra_dim,
        "n_points": scene.n_points,
        "boxes": [b.to_json() for b in scene.boxes],
    }
    blob = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    payload = scene.points.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<B", SCENE_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(SCENE_MAGIC) + 5:
        raise SceneTruncatedError(f"{path}: file shorter than header")
    if data[: len(SCENE_MAGIC)] != SCENE_MAGIC:
        raise SceneFormatError(f"{path}: bad magic bytes")
    version = data[len(SCENE_MAGIC)]
    if version != SCENE_VERSION:
        raise SceneVersionError(f"{path}: unsupported version {version}")
    off = len(SCENE_MAGIC) + 1
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + meta_len:
        raise SceneTruncatedError(f"{path}: metadata block truncated")
    try:
        meta = json.loads(data[off: off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"{path}: unreadable metadata: {exc}") from exc
    off += meta_len
    n_points = meta["n_points"]
    width = 3 + meta["extra_dim"]
    expected = n_points * width * 4
    payload = data[off: off + expected]
    if len(payload) < expected:
        raise SceneTruncatedError(
            f"{path}: point payload truncated ({len(payload)} of {expected} bytes)"
        )
    points = np.frombuffer(payload, dtype="<f4").reshape(n_points, width).copy()
    return Scene(
        scene_id=meta["scene_id"],
        points=points,
        boxes=tuple(GtBox.from_json(b) for b in meta["boxes"]),
        class_count=meta["class_count"],
        seed=meta["seed"],
        extra_dim=meta["extra_dim"],
    )


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str
    scene_id: str


def write_manifest(path, entries: Sequence[ManifestEntry], cfg: SceneGenConfig, seed: int) -> None:
    obj = {
        "v": 1,
        "seed": seed,
        "config": cfg.to_json(),
        "scenes": [{"path": e.path, "split": e.split, "scene_id": e.scene_id} for e in entries],
    }
    Path(path).write_text(json.dumps(obj, indent=2))


def load_manifest(path) -> tuple[list[ManifestEntry], SceneGenConfig, int]:
    obj = json.loads(Path(path).read_text())
    if obj.get("v") != 1:
        raise SceneVersionError(f"{path}: unsupported manifest version {obj.get('v')}")
    entries = [ManifestEntry(path=e["path"], split=e["split"], scene_id=e["scene_id"]) for e in obj["scenes"]]
    return entries, SceneGenConfig.from_json(obj["config"]), obj["seed"]


def load_split(manifest_path, split: str) -> list[Scene]:
    entries, _, _ = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    scenes = []
    for e in entries:
        if e.split != split:
            continue
        p = Path(e.path)
        scenes.append(load_scene(p if p.is_absolute() else base / p))
    return scenes
