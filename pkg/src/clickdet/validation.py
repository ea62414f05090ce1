"""Input validation helpers shared by the estimator, service, and CLI."""

from __future__ import annotations

from typing import Iterable

from .clicks import Click, ClickSet
from .scenes import Scene


class NotFittedError(RuntimeError):
    """The estimator was used before ``fit`` (or loading a checkpoint)."""


def ensure_scene(obj, class_count: int | None = None, min_points: int | None = None) -> Scene:
    if not isinstance(obj, Scene):
        raise TypeError(f"expected a Scene, got {type(obj).__name__}")
    if class_count is not None and obj.class_count != class_count:
        raise ValueError(
            f"scene declares {obj.class_count} classes, expected {class_count}"
        )
    if min_points is not None and obj.n_points < min_points:
        raise ValueError(
            f"scene has {obj.n_points} points but at least {min_points} are required"
        )
    return obj


def ensure_scenes(objs, class_count: int | None = None) -> list[Scene]:
    scenes = [ensure_scene(o, class_count=class_count) for o in objs]
    if not scenes:
        raise ValueError("empty scene collection")
    return scenes


def ensure_click_set(obj, class_count: int | None = None) -> ClickSet:
    """Coerce a ClickSet, an iterable of Clicks, or wire dicts into a ClickSet."""
    if isinstance(obj, ClickSet):
        clicks = obj
    elif isinstance(obj, Iterable):
        items = list(obj)
        if all(isinstance(c, Click) for c in items):
            clicks = ClickSet(items)
        else:
            clicks = ClickSet.from_wire(items)
    else:
        raise TypeError(f"cannot interpret {type(obj).__name__} as clicks")
    if class_count is not None:
        for c in clicks:
            if c.is_positive and not 1 <= c.class_id <= class_count:
                raise ValueError(f"click class {c.class_id} outside 1..{class_count}")
    return clicks


def check_is_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted; call fit() or load a checkpoint"
        )
