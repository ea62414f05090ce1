"""Click-driven interactive 3D object detection at desk scale.

A miniature point-based detector that users steer with 2D bird's-eye-view
clicks: class-specific positive clicks mark objects, class-agnostic
negative clicks suppress false positives, and the click signal is carried
densely through the encoder and propagated across same-class instances via
feature correlation.
"""

from .clicks import Click, ClickSet, NEGATIVE, POSITIVE, encode_click
from .estimator import ClickDetector
from .geometry import DetBox, MatchResult, average_precision, iou_3d, match_detections, nms
from .protocol import ClickCurve, ProtocolConfig, next_click, run_protocol
from .scenes import GtBox, Scene, SceneGenConfig, generate_scene, load_scene, save_scene

__version__ = "0.1.0"

__all__ = [
    "Click",
    "ClickCurve",
    "ClickDetector",
    "ClickSet",
    "DetBox",
    "GtBox",
    "MatchResult",
    "NEGATIVE",
    "POSITIVE",
    "ProtocolConfig",
    "Scene",
    "SceneGenConfig",
    "average_precision",
    "encode_click",
    "generate_scene",
    "iou_3d",
    "load_scene",
    "match_detections",
    "next_click",
    "nms",
    "run_protocol",
    "save_scene",
    "__version__",
]
