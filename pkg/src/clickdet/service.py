"""HTTP annotation service: scene catalog, model registry, click sessions.

Sessions are in-memory and strictly serialized per session (one operation
in flight at a time); the model parameters are shared read-only, so
concurrent sessions never interfere. Every payload carries a top-level
``"v"`` schema version.

Undo restores the previous state from a snapshot stack rather than
recomputing, so it is exact by construction.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response

from .clicks import Click, ClickSet
from .detector import DetectorNet, forward_scene, decode_boxes
from .geometry import DetBox
from .propagation import ScpMaps, compute_scp_maps, export_correlation_heatmap
from .scenes import Scene, load_scene

API_VERSION = 1


def _det_to_wire(det: DetBox) -> dict:
    return {
        "cx": det.cx, "cy": det.cy, "cz": det.cz,
        "l": det.l, "w": det.w, "h": det.h,
        "yaw": det.yaw, "class": det.class_id, "score": det.score,
    }


def _box_to_wire(box) -> dict:
    return {
        "cx": box.cx, "cy": box.cy, "cz": box.cz,
        "l": box.l, "w": box.w, "h": box.h,
        "yaw": box.yaw, "class": box.class_id,
    }


@dataclass
class SessionSnapshot:
    detections: list[DetBox]
    maps: ScpMaps | None


@dataclass
class Session:
    session_id: str
    scene_id: str
    model_id: str
    clicks: ClickSet = field(default_factory=ClickSet)
    detections: list[DetBox] = field(default_factory=list)
    maps: ScpMaps | None = None
    coords: np.ndarray | None = None
    history: list[SessionSnapshot] = field(default_factory=list)
    created: float = field(default_factory=time.time)
    updated: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)


class SceneCatalog:
    """Lazy-loading directory of scene container files."""

    def __init__(self, scene_dir):
        self.scene_dir = Path(scene_dir)
        self._cache: dict[str, Scene] = {}
        self._paths: dict[str, Path] = {}
        for path in sorted(self.scene_dir.glob("*.pcs")):
            self._paths[path.stem] = path

    def ids(self) -> list[str]:
        return sorted(self._paths)

    def get(self, scene_id: str) -> Scene | None:
        if scene_id not in self._paths:
            return None
        if scene_id not in self._cache:
            self._cache[scene_id] = load_scene(self._paths[scene_id])
        return self._cache[scene_id]


class ModelRegistry:
    """Lazy-loading directory of detector checkpoints."""

    def __init__(self, model_dir):
        self.model_dir = Path(model_dir)
        self._cache: dict[str, DetectorNet] = {}
        self._paths: dict[str, Path] = {}
        for path in sorted(self.model_dir.glob("*.ckpt")):
            self._paths[path.stem] = path

    def ids(self) -> list[str]:
        return sorted(self._paths)

    def get(self, model_id: str) -> DetectorNet | None:
        if model_id not in self._paths:
            return None
        if model_id not in self._cache:
            net, _ = DetectorNet.load(self._paths[model_id])
            self._cache[model_id] = net
        return self._cache[model_id]


def _parse_click(payload) -> Click:
    if not isinstance(payload, dict):
        raise ValueError("click payload must be a JSON object")
    try:
        return Click.from_wire(payload)
    except (ValueError, TypeError) as exc:
        raise ValueError(str(exc)) from exc


def create_app(scene_dir, model_dir, snapshot_dir=None) -> FastAPI:
    catalog = SceneCatalog(scene_dir)
    registry = ModelRegistry(model_dir)
    sessions: dict[str, Session] = {}
    sessions_lock = threading.Lock()
    snapshot_path = Path(snapshot_dir) if snapshot_dir else None

    app = FastAPI(title="clickdet annotation service")
    # the browser UI is served from a separate static origin
    from fastapi.middleware.cors import CORSMiddleware

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def _get_session(session_id: str) -> Session:
        with sessions_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    def _run_predict(session: Session) -> None:
        scene = catalog.get(session.scene_id)
        net = registry.get(session.model_id)
        out = forward_scene(net, scene, session.clicks, training=False)
        session.detections = decode_boxes(
            out.enc.coords, out.logits.data, out.regression.data,
            net.cfg.class_count, net.cfg.score_threshold, net.cfg.nms_iou,
        )
        session.maps = compute_scp_maps(out.enc, session.clicks, net.cfg.tau, net.cfg.class_count)
        session.coords = out.enc.coords
        session.updated = time.time()

    def _save_snapshot(session: Session) -> None:
        if snapshot_path is None:
            return
        snapshot_path.mkdir(parents=True, exist_ok=True)
        obj = {
            "v": API_VERSION,
            "session_id": session.session_id,
            "scene_id": session.scene_id,
            "model_id": session.model_id,
            "clicks": session.clicks.to_wire(),
            "detections": [_det_to_wire(d) for d in session.detections],
        }
        (snapshot_path / f"{session.session_id}.json").write_text(json.dumps(obj))

    def _maps_summary(session: Session) -> list[dict]:
        if session.maps is None:
            return []
        out = []
        for ch, row in enumerate(session.maps.classwise):
            out.append({
                "channel": ch,
                "min": float(row.min()) if len(row) else 0.0,
                "max": float(row.max()) if len(row) else 0.0,
                "mean": float(row.mean()) if len(row) else 0.0,
            })
        return out

    def _state_payload(session: Session) -> dict:
        return {
            "v": API_VERSION,
            "session_id": session.session_id,
            "scene_id": session.scene_id,
            "model_id": session.model_id,
            "clicks": session.clicks.to_wire(),
            "detections": [_det_to_wire(d) for d in session.detections],
            "correlation_summary": _maps_summary(session),
            "created": session.created,
            "updated": session.updated,
        }

    @app.get("/scenes")
    def list_scenes():
        items = []
        for scene_id in catalog.ids():
            scene = catalog.get(scene_id)
            items.append({
                "id": scene_id,
                "n_points": scene.n_points,
                "class_count": scene.class_count,
                "n_boxes": len(scene.boxes),
            })
        return {"v": API_VERSION, "scenes": items}

    @app.get("/scenes/{scene_id}/points")
    def scene_points(scene_id: str):
        scene = catalog.get(scene_id)
        if scene is None:
            raise HTTPException(status_code=404, detail=f"unknown scene {scene_id}")
        return {
            "v": API_VERSION,
            "id": scene_id,
            "n_points": scene.n_points,
            "extra_dim": scene.extra_dim,
            "class_count": scene.class_count,
            "xyz": [float(v) for v in scene.xyz.reshape(-1)],
            "extra": [float(v) for v in scene.extras.reshape(-1)],
            "boxes": [_box_to_wire(b) for b in scene.boxes],
        }

    @app.get("/models")
    def list_models():
        items = []
        for model_id in registry.ids():
            net = registry.get(model_id)
            items.append({
                "id": model_id,
                "classes": net.cfg.class_count,
                "feature_dim": net.cfg.encoder.feature_dim,
                "tau": net.cfg.tau,
            })
        return {"v": API_VERSION, "models": items}

    @app.post("/sessions", status_code=201)
    def create_session(payload: dict):
        scene_id = payload.get("scene_id")
        model_id = payload.get("model_id")
        if not isinstance(scene_id, str) or not isinstance(model_id, str):
            raise HTTPException(status_code=400, detail="scene_id and model_id are required")
        scene = catalog.get(scene_id)
        if scene is None:
            raise HTTPException(status_code=404, detail=f"unknown scene {scene_id}")
        net = registry.get(model_id)
        if net is None:
            raise HTTPException(status_code=404, detail=f"unknown model {model_id}")
        if scene.class_count != net.cfg.class_count:
            raise HTTPException(
                status_code=409,
                detail=(
                    f"scene has {scene.class_count} classes but model expects "
                    f"{net.cfg.class_count}"
                ),
            )
        if scene.n_points < net.cfg.encoder.stages[0].points_out:
            raise HTTPException(
                status_code=409,
                detail=f"scene too small for model ({scene.n_points} points)",
            )
        session = Session(
            session_id=uuid.uuid4().hex,
            scene_id=scene_id,
            model_id=model_id,
        )
        with session.lock:
            _run_predict(session)
            with sessions_lock:
                sessions[session.session_id] = session
            _save_snapshot(session)
            return _state_payload(session)

    @app.get("/sessions/{session_id}")
    def get_state(session_id: str):
        session = _get_session(session_id)
        with session.lock:
            return _state_payload(session)

    @app.post("/sessions/{session_id}/clicks")
    def add_click(session_id: str, payload: dict):
        session = _get_session(session_id)
        try:
            click = _parse_click(payload)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        scene = catalog.get(session.scene_id)
        if click.is_positive and click.class_id > scene.class_count:
            raise HTTPException(
                status_code=400,
                detail=f"class {click.class_id} outside 1..{scene.class_count}",
            )
        with session.lock:
            session.history.append(SessionSnapshot(
                detections=list(session.detections),
                maps=session.maps,
            ))
            session.clicks = session.clicks.add(click)
            _run_predict(session)
            _save_snapshot(session)
            return _state_payload(session)

    @app.delete("/sessions/{session_id}/clicks/last")
    def undo_click(session_id: str):
        session = _get_session(session_id)
        with session.lock:
            if len(session.clicks) == 0:
                raise HTTPException(status_code=400, detail="no clicks to undo")
            session.clicks = session.clicks.without_last()
            snapshot = session.history.pop()
            session.detections = snapshot.detections
            session.maps = snapshot.maps
            session.updated = time.time()
            _save_snapshot(session)
            return _state_payload(session)

    @app.get("/sessions/{session_id}/export")
    def export_annotations(session_id: str):
        session = _get_session(session_id)
        with session.lock:
            return {
                "v": API_VERSION,
                "scene_id": session.scene_id,
                "boxes": [
                    {
                        "cx": d.cx, "cy": d.cy, "cz": d.cz,
                        "l": d.l, "w": d.w, "h": d.h,
                        "yaw": d.yaw, "class": d.class_id,
                    }
                    for d in session.detections
                ],
            }

    @app.get("/sessions/{session_id}/heatmap/{channel}")
    def heatmap(session_id: str, channel: int, format: str = Query("json")):
        session = _get_session(session_id)
        with session.lock:
            if session.maps is None or session.coords is None:
                raise HTTPException(status_code=409, detail="no maps computed yet")
            n_channels = session.maps.classwise.shape[0]
            if not 0 <= channel < n_channels:
                raise HTTPException(
                    status_code=404,
                    detail=f"channel {channel} outside 0..{n_channels - 1}",
                )
            if format == "png":
                import tempfile

                scene = catalog.get(session.scene_id)
                with tempfile.TemporaryDirectory() as tmp:
                    paths = export_correlation_heatmap(
                        session.maps, session.coords, scene,
                        Path(tmp) / "heatmap", channels=[channel],
                    )
                    png = next(p for p in paths if p.suffix == ".png")
                    return Response(content=png.read_bytes(), media_type="image/png")
            values = session.maps.classwise[channel]
            return {
                "v": API_VERSION,
                "channel": channel,
                "n_points": int(len(values)),
                "values": [float(v) for v in values],
                "xy": [float(v) for v in session.coords[:, :2].reshape(-1)],
            }

    return app
