"""Class activation maps and the confident-region labels derived from them."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import AlphaOrderViolation, AlphaOutOfRange, DimMismatch, ValidationError
from .tensor_io import (
    BACKGROUND,
    NEUTRAL,
    LabelMap,
    Tensor,
    read_json,
    read_tensor,
    write_json,
    write_tensor,
)


@dataclass(frozen=True, eq=False)
class ScoreStack:
    """``(C+1, H, W)`` float32 scores; channel ``C`` is background."""

    scores: np.ndarray
    class_present: np.ndarray  # (C,) bool

    def __post_init__(self):
        s = np.ascontiguousarray(self.scores, dtype=np.float32)
        present = np.asarray(self.class_present, dtype=bool).reshape(-1)
        if s.ndim != 3 or s.shape[0] != present.size + 1:
            raise DimMismatch(
                f"scores {s.shape} do not match {present.size} classes plus background"
            )
        if np.any(s[:-1][~present] != 0):
            raise ValidationError("absent class channel has non-zero scores")
        s.setflags(write=False)
        present.setflags(write=False)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "class_present", present)

    @property
    def num_classes(self) -> int:
        return self.class_present.size

    @property
    def height(self) -> int:
        return self.scores.shape[1]

    @property
    def width(self) -> int:
        return self.scores.shape[2]

    @property
    def objects(self) -> np.ndarray:
        return self.scores[:-1]

    @property
    def background(self) -> np.ndarray:
        return self.scores[-1]

    def with_scores(self, scores: np.ndarray) -> "ScoreStack":
        return ScoreStack(scores, self.class_present)

    def __eq__(self, other):
        if not isinstance(other, ScoreStack):
            return NotImplemented
        return (
            self.scores.shape == other.scores.shape
            and self.scores.tobytes() == other.scores.tobytes()
            and np.array_equal(self.class_present, other.class_present)
        )


RefinerHook = Callable[[ScoreStack], ScoreStack]


def identity_refiner(stack: ScoreStack) -> ScoreStack:
    return stack


@dataclass(frozen=True)
class ClassifierHead:
    weights: np.ndarray  # (C, D)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.ndim != 2:
            raise DimMismatch(f"classifier weights must be 2-D, got shape {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


def cam_from_features(features: np.ndarray, head: ClassifierHead, present) -> ScoreStack:
    """Per-class dot product of head rows with every feature column.

    Negative scores are clamped to zero and absent classes are zeroed.
    The background channel is left at zero.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise DimMismatch(f"feature map must be [D, H, W], got shape {f.shape}")
    present = np.asarray(present, dtype=bool).reshape(-1)
    d, h, w = f.shape
    if head.weights.shape[1] != d:
        raise DimMismatch(f"head width {head.weights.shape[1]} != feature depth {d}")
    if present.size != head.num_classes:
        raise DimMismatch(f"{present.size} presence flags for {head.num_classes} classes")
    raw = np.tensordot(head.weights.astype(np.float64), f, axes=(1, 0))
    raw = np.maximum(raw, 0.0)
    raw[~present] = 0.0
    scores = np.zeros((head.num_classes + 1, h, w), dtype=np.float32)
    scores[:-1] = raw
    return ScoreStack(scores, present)


def normalize_cam(stack: ScoreStack) -> ScoreStack:
    if np.any(stack.objects < 0):
        raise ValidationError("normalize_cam expects non-negative scores")
    s = stack.scores.astype(np.float64)
    peaks = s[:-1].reshape(stack.num_classes, -1).max(axis=1, initial=0.0)
    for c, peak in enumerate(peaks):
        if peak > 0:
            s[c] /= peak
    return stack.with_scores(s.astype(np.float32))


def background_scores(objects: np.ndarray, present, alpha: float) -> np.ndarray:
    if not alpha >= 1:
        raise AlphaOutOfRange(f"alpha must be >= 1, got {alpha}")
    present = np.asarray(present, dtype=bool)
    obj = np.asarray(objects, dtype=np.float64)[present]
    peak = obj.max(axis=0) if obj.shape[0] else np.zeros(objects.shape[1:])
    base = np.clip(1.0 - peak, 0.0, 1.0)
    return base ** alpha


def background_map(stack: ScoreStack, alpha: float) -> ScoreStack:
    """Fill the background channel with ``(1 - max_c M_c) ** alpha``."""
    s = stack.scores.copy()
    s[-1] = background_scores(stack.objects, stack.class_present, alpha)
    return stack.with_scores(s)


def confident_regions(
    stack: ScoreStack,
    alpha_low: float,
    alpha_high: float,
    refiner: RefinerHook = identity_refiner,
) -> LabelMap:
    """Label confident object pixels, confident background (254) and neutral (255).

    Object test uses the background amplified by ``alpha_low``; background
    test uses the background weakened by ``alpha_high``.  Exact ties are
    never confident.
    """
    if not (alpha_low >= 1 and alpha_high >= 1):
        raise AlphaOutOfRange(f"alphas must be >= 1, got {alpha_low}, {alpha_high}")
    if not alpha_low < alpha_high:
        raise AlphaOrderViolation(f"alpha_low {alpha_low} must be < alpha_high {alpha_high}")

    low = refiner(background_map(stack, alpha_low)).scores.astype(np.float64)
    high = refiner(background_map(stack, alpha_high)).scores.astype(np.float64)
    n_cls = stack.num_classes
    labels = np.full((stack.height, stack.width), NEUTRAL, dtype=np.uint8)

    obj = low[:n_cls]
    if n_cls:
        best = obj.argmax(axis=0)
        top = np.take_along_axis(obj, best[None], axis=0)[0]
        rest = obj.copy()
        np.put_along_axis(rest, best[None], -np.inf, axis=0)
        runner_up = rest.max(axis=0)
        is_obj = (top > runner_up) & (top > low[n_cls])
        labels[is_obj] = best[is_obj].astype(np.uint8)

    obj_high = high[:n_cls].max(axis=0) if n_cls else np.full(labels.shape, -np.inf)
    is_bg = high[n_cls] > obj_high
    labels[is_bg] = BACKGROUND
    return LabelMap(labels, num_classes=n_cls)


def write_score_stack(stack: ScoreStack, path) -> None:
    """AFT1 tensor at ``path`` plus ``<path>.json`` sidecar with class presence."""
    write_tensor(Tensor(stack.scores), path)
    write_json({"class_present": [bool(b) for b in stack.class_present]}, _sidecar(path))


def read_score_stack(path) -> ScoreStack:
    t = read_tensor(path)
    meta = read_json(_sidecar(path))
    if t.rank != 3:
        raise DimMismatch(f"score stack must be rank 3, got {t.rank}")
    return ScoreStack(t.data.copy(), np.array(meta["class_present"], dtype=bool))


def _sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")
