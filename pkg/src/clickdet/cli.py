"""Command-line entry points: corpus generation, training, evaluation,
click simulation, heatmap export, and serving.

Every command accepts --seed / --config / --out, embeds its configuration
in the artifacts it writes, and exits 0 on success. Failures print one
machine-readable JSON object to stderr and use distinct codes: 2 for usage
errors (argparse), 3 for missing files, 4 for config schema violations,
5 for runtime errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_RUNTIME = 5


class ConfigError(ValueError):
    """A config file or inline config violates the expected schema."""


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return obj


def _emit_error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    from .scenes import (
        ManifestEntry, SceneGenConfig, generate_scene, save_scene, write_manifest,
    )

    overrides = _load_config(args.config)
    try:
        cfg = SceneGenConfig.from_json({**SceneGenConfig().to_json(), **overrides})
        cfg.validate()
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad scene config: {exc}") from exc
    if not 0.0 <= args.val_fraction < 1.0:
        raise ConfigError("--val-fraction must be in [0, 1)")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_val = int(round(args.count * args.val_fraction))
    entries = []
    for i in range(args.count):
        scene = generate_scene(cfg, args.seed + i)
        name = f"{scene.scene_id}.pcs"
        save_scene(scene, out_dir / name)
        split = "val" if i < n_val else "train"
        entries.append(ManifestEntry(path=name, split=split, scene_id=scene.scene_id))
    write_manifest(out_dir / "manifest.json", entries, cfg, args.seed)
    print(json.dumps({"scenes": args.count, "out": str(out_dir)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .estimator import ClickDetector
    from .scenes import load_split

    overrides = _load_config(args.config)
    scenes = load_split(args.manifest, args.split)
    if not scenes:
        raise ConfigError(f"no scenes in split {args.split!r}")
    params = dict(overrides)
    params.setdefault("classes", scenes[0].class_count)
    params.setdefault("extra_dim", scenes[0].extra_dim)
    params["epochs"] = args.epochs
    params["seed"] = args.seed
    try:
        est = ClickDetector().set_params(**{k: _tuplify(v) for k, v in params.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc
    if args.metrics_log:
        Path(args.metrics_log).parent.mkdir(parents=True, exist_ok=True)
    est.fit(scenes, log_path=args.metrics_log)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    est.save(args.out)
    final = est.history_[-1] if est.history_ else {}
    print(json.dumps({"checkpoint": str(args.out), "epochs": args.epochs, "final": final}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .estimator import ClickDetector
    from .protocol import DEFAULT_IOU_THRESHOLDS, ProtocolConfig, run_protocol, write_report
    from .scenes import load_split

    overrides = _load_config(args.config)
    est = ClickDetector.load(args.checkpoint)
    scenes = load_split(args.manifest, args.split)
    if not scenes:
        raise ConfigError(f"no scenes in split {args.split!r}")
    thresholds = {
        int(k): float(v)
        for k, v in overrides.get(
            "iou_thresholds", {str(c): t for c, t in DEFAULT_IOU_THRESHOLDS.items()}
        ).items()
    }
    try:
        cfg = ProtocolConfig(
            max_clicks=args.max_clicks,
            trials=args.trials,
            iou_thresholds=thresholds,
            seed_base=args.seed,
            interpolation=overrides.get("interpolation", "r40"),
        )
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad protocol config: {exc}") from exc
    curve = run_protocol(est, scenes, cfg)
    csv_path, json_path = write_report(curve, args.out)
    print(json.dumps({
        "csv": str(csv_path),
        "json": str(json_path),
        "mean_map": curve.mean_map().tolist(),
    }))
    return EXIT_OK


def cmd_simulate_clicks(args) -> int:
    from .clicks import simulate_positive_clicks
    from .scenes import load_scene

    scene = load_scene(args.scene)
    rng = np.random.default_rng(args.seed)
    clicks = simulate_positive_clicks(scene, args.max_positive, rng)
    negatives = []
    if args.checkpoint:
        from .detector import DetectorNet, forward_scene
        from .propagation import NcsConfig, simulate_negative_clicks

        net, _ = DetectorNet.load(args.checkpoint)
        out = forward_scene(net, scene, clicks, training=False)
        negatives = simulate_negative_clicks(
            out.enc, scene.boxes, NcsConfig(k_n_max=args.max_negative), rng,
            k_n=args.max_negative,
        )
    for neg in negatives:
        clicks = clicks.add(neg)
    payload = {"v": 1, "scene_id": scene.scene_id, "seed": args.seed, "clicks": clicks.to_wire()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(payload, indent=2))
    print(json.dumps({"out": args.out, "positive": clicks.n_positive, "negative": clicks.n_negative}))
    return EXIT_OK


def cmd_export_maps(args) -> int:
    from .clicks import ClickSet
    from .detector import DetectorNet, forward_scene
    from .propagation import compute_scp_maps, export_correlation_heatmap
    from .scenes import load_scene

    scene = load_scene(args.scene)
    net, _ = DetectorNet.load(args.checkpoint)
    clicks_obj = json.loads(Path(args.clicks).read_text())
    try:
        clicks = ClickSet.from_wire(clicks_obj["clicks"] if isinstance(clicks_obj, dict) else clicks_obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad clicks file: {exc}") from exc
    out = forward_scene(net, scene, clicks, training=False)
    maps = compute_scp_maps(out.enc, clicks, net.cfg.tau, net.cfg.class_count)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = export_correlation_heatmap(maps, out.enc.coords, scene, out_dir / "correlation")
    print(json.dumps({"written": [str(p) for p in written]}))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    if not Path(args.scenes).is_dir():
        raise FileNotFoundError(f"scene directory not found: {args.scenes}")
    if not Path(args.models).is_dir():
        raise FileNotFoundError(f"model directory not found: {args.models}")
    app = create_app(args.scenes, args.models, snapshot_dir=args.snapshots)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clickdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate a synthetic scene corpus + manifest")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON overrides for the generator config")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", help="train a detector on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON overrides for estimator parameters")
    p.add_argument("--metrics-log", default=None, help="JSON-lines per-epoch metrics path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run the iterative click protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--max-clicks", type=int, default=5)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate-clicks", help="simulate positive (and NCS negative) clicks")
    p.add_argument("--scene", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None, help="enables NCS negatives")
    p.add_argument("--max-positive", type=int, default=10)
    p.add_argument("--max-negative", type=int, default=10)
    p.set_defaults(func=cmd_simulate_clicks)

    p = sub.add_parser("export-maps", help="export correlation heatmaps for a click file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--clicks", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_export_maps)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--scenes", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--snapshots", default=None, help="optional session snapshot directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _emit_error("missing_file", str(exc), EXIT_MISSING_FILE)
    except ConfigError as exc:
        return _emit_error("bad_config", str(exc), EXIT_BAD_CONFIG)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        return _emit_error(type(exc).__name__, str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
