"""Scikit-learn-style estimator facade over the interactive detector.

``ClickDetector`` follows the usual conventions: constructor arguments are
stored verbatim, ``get_params``/``set_params`` expose them for pipelines and
grid search, ``fit`` builds and trains the network, and fitted state lives
in trailing-underscore attributes.
"""

from __future__ import annotations

import inspect

from .detector import (
    DetectorConfig,
    DetectorNet,
    TrainConfig,
    predict_boxes,
    train_model,
)
from .encoder import EncoderConfig, StageSpec
from .geometry import DetBox
from .validation import check_is_fitted, ensure_click_set, ensure_scene, ensure_scenes


class ClickDetector:
    """Interactive 3D detector with a fit/predict interface.

    Parameters mirror the architecture and training knobs; the three
    mechanism flags (``dense_guidance``, ``negative_clicks``,
    ``propagation``) select the ablation variants down to the vanilla
    model.
    """

    def __init__(
        self,
        classes: int = 3,
        feature_dim: int = 32,
        stages: tuple = ((320, 16, (32, 32)), (96, 16, (32, 32))),
        extra_dim: int = 1,
        tau: float = 2.0,
        head_hidden: tuple = (64, 64, 64),
        dense_guidance: bool = True,
        negative_clicks: bool = True,
        propagation: bool = True,
        epochs: int = 15,
        learning_rate: float = 0.01,
        batch_size: int = 1,
        n_u_max: int = 10,
        k_n_max: int = 10,
        w_cls: float = 1.0,
        w_box: float = 1.0,
        w_fg: float = 1.0,
        fg_balance: float = 4.0,
        score_threshold: float = 0.3,
        nms_iou: float = 0.3,
        seed: int = 0,
    ):
        self.classes = classes
        self.feature_dim = feature_dim
        self.stages = stages
        self.extra_dim = extra_dim
        self.tau = tau
        self.head_hidden = head_hidden
        self.dense_guidance = dense_guidance
        self.negative_clicks = negative_clicks
        self.propagation = propagation
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_u_max = n_u_max
        self.k_n_max = k_n_max
        self.w_cls = w_cls
        self.w_box = w_box
        self.w_fg = w_fg
        self.fg_balance = fg_balance
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.seed = seed
        self.net_: DetectorNet | None = None
        self.history_: list[dict] | None = None

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [n for n in sig.parameters if n != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "ClickDetector":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for ClickDetector; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"ClickDetector({args})"

    def _detector_config(self) -> DetectorConfig:
        enc = EncoderConfig(
            stages=tuple(StageSpec(p, k, tuple(m)) for p, k, m in self.stages),
            feature_dim=self.feature_dim,
            class_count=self.classes,
            extra_dim=self.extra_dim,
            tau=self.tau,
            seed=self.seed,
        )
        return DetectorConfig(
            encoder=enc,
            head_hidden=tuple(self.head_hidden),
            dense_guidance=self.dense_guidance,
            negative_clicks=self.negative_clicks,
            propagation=self.propagation,
            score_threshold=self.score_threshold,
            nms_iou=self.nms_iou,
        )

    def _train_config(self, log_path=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.seed,
            n_u_max=self.n_u_max,
            k_n_max=self.k_n_max,
            w_cls=self.w_cls,
            w_box=self.w_box,
            w_fg=self.w_fg,
            fg_balance=self.fg_balance,
            log_path=log_path,
        )

    def fit(self, scenes, val_scenes=(), log_path=None) -> "ClickDetector":
        """Train on a scene corpus; returns self."""
        scenes = ensure_scenes(scenes, class_count=self.classes)
        net = DetectorNet.init(self._detector_config(), seed=self.seed)
        self.history_ = train_model(
            net, scenes, self._train_config(log_path=log_path), val_scenes=val_scenes
        )
        self.net_ = net
        return self

    def predict(self, scene, clicks=()) -> list[DetBox]:
        """Detections for one scene under the given click set."""
        check_is_fitted(self, "net_")
        scene = ensure_scene(
            scene,
            class_count=self.classes,
            min_points=self.net_.cfg.encoder.stages[0].points_out,
        )
        click_set = ensure_click_set(clicks, class_count=self.classes)
        return predict_boxes(self.net_, scene, click_set)

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        self.net_.save(path, extra_metadata={"estimator_params": _jsonable(self.get_params())})

    @classmethod
    def load(cls, path) -> "ClickDetector":
        net, meta = DetectorNet.load(path)
        est = cls()
        stored = meta.get("estimator_params")
        if stored:
            est.set_params(**{k: _tuplify(v) for k, v in stored.items()})
        est.net_ = net
        est.history_ = meta.get("history")
        return est


def _jsonable(params: dict) -> dict:
    out = {}
    for key, value in params.items():
        if isinstance(value, tuple):
            value = _listify(value)
        out[key] = value
    return out


def _listify(value):
    if isinstance(value, (tuple, list)):
        return [_listify(v) for v in value]
    return value


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value
