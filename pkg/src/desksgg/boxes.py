"""Box geometry on normalized (cx, cy, w, h) boxes.

Scalar helpers take anything array-like of length 4; the ``pairwise_*``
variants take (n, 4) and (m, 4) arrays and return (n, m) matrices.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

DEGENERATE = 1e-9


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def from_corners(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def union_box(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest box enclosing both (used for phrase detection)."""
    ca, cb = to_corners(a), to_corners(b)
    return from_corners(np.concatenate([np.minimum(ca[..., :2], cb[..., :2]), np.maximum(ca[..., 2:], cb[..., 2:])], axis=-1))


def box_l1(a, b) -> float:
    return float(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).sum())


def _check(boxes: np.ndarray) -> None:
    if np.any(boxes[..., 2:] <= DEGENERATE):
        raise ValueError("degenerate box: width and height must exceed 1e-9")


def _iou_parts(ca: np.ndarray, cb: np.ndarray):
    """Intersection, union and enclosure areas for broadcastable corner arrays."""
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0.0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])
    eh = np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])
    return inter, union, ew * eh


def box_iou(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check(a)
    _check(b)
    inter, union, _ = _iou_parts(to_corners(a), to_corners(b))
    return float(inter / union)


def box_giou(a, b) -> float:
    """Generalized IoU: IoU - (enclosure - union) / enclosure, in (-1, 1]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check(a)
    _check(b)
    inter, union, enclosure = _iou_parts(to_corners(a), to_corners(b))
    return float(inter / union - (enclosure - union) / enclosure)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64).reshape(-1, 4), np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union, _ = _iou_parts(to_corners(a)[:, None, :], to_corners(b)[None, :, :])
    return inter / union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64).reshape(-1, 4), np.asarray(b, dtype=np.float64).reshape(-1, 4)
    _check(a)
    _check(b)
    inter, union, enclosure = _iou_parts(to_corners(a)[:, None, :], to_corners(b)[None, :, :])
    return inter / union - (enclosure - union) / enclosure


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64).reshape(-1, 4), np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def elementwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, _ = _iou_parts(to_corners(a), to_corners(b))
    return inter / union
