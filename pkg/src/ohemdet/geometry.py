"""Axis-aligned box arithmetic.

Boxes are corner-form ``(x1, y1, x2, y2)`` in continuous scene coordinates;
area is ``(x2 - x1) * (y2 - y1)`` with no +1 pixel convention. Array inputs
are ``(n, 4)``; single boxes may be any length-4 sequence.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

# conventional guard against exp overflow in decode_delta
DEFAULT_DELTA_CLAMP = math.log(1000.0 / 16.0)
DEGENERATE_EPS = 1e-6


class BBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def is_valid(self) -> bool:
        finite = all(math.isfinite(v) for v in self)
        return finite and self.x2 > self.x1 and self.y2 > self.y1


class BoxDelta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


def as_boxes(boxes) -> np.ndarray:
    """Coerce to a float64 ``(n, 4)`` array."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (n, 4) boxes, got shape {arr.shape}")
    return arr


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two valid boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = as_boxes(a) if len(a) else np.zeros((0, 4))
    b = as_boxes(b) if len(b) else np.zeros((0, 4))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union


def _greedy(order: np.ndarray, suppress: np.ndarray, limit: int | None) -> list[int]:
    suppressed = np.zeros(suppress.shape[0], dtype=bool)
    keep: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        if limit is not None and len(keep) >= limit:
            break
        suppressed |= suppress[i]
    return keep


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep the lower index first."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(boxes, scores, iou_thresh: float, limit: int | None = None, suppress: np.ndarray | None = None) -> list[int]:
    """Greedy non-maximum suppression.

    A box is suppressed iff its IoU with an already-kept box exceeds
    ``iou_thresh``. Kept indices are returned in selection order. ``limit``
    stops after that many boxes are kept, which yields the same prefix as a
    full run. ``suppress`` may carry a precomputed boolean matrix
    ``iou_matrix(boxes, boxes) > iou_thresh`` to skip the IoU computation.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if suppress is None:
        if len(boxes) != n:
            raise ValueError(f"boxes/scores length mismatch: {len(boxes)} vs {n}")
        if n == 0:
            return []
        suppress = iou_matrix(boxes, boxes) > iou_thresh
    elif suppress.shape != (n, n):
        raise ValueError(f"suppress shape {suppress.shape} does not match {n} scores")
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms scores must be finite")
    return _greedy(score_order(scores), suppress, limit)


def encode_delta(proposals, targets) -> np.ndarray:
    """R-CNN style regression targets mapping ``proposals`` onto ``targets``.

    Works on single boxes (returns shape ``(4,)``) or ``(n, 4)`` arrays.
    """
    single = np.ndim(proposals) == 1
    p = as_boxes(proposals)
    t = as_boxes(targets)
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    out = np.stack(
        [
            ((t[:, 0] + 0.5 * tw) - (p[:, 0] + 0.5 * pw)) / pw,
            ((t[:, 1] + 0.5 * th) - (p[:, 1] + 0.5 * ph)) / ph,
            np.log(tw / pw),
            np.log(th / ph),
        ],
        axis=1,
    )
    return out[0] if single else out


def decode_delta(proposals, deltas, clamp: float = DEFAULT_DELTA_CLAMP) -> np.ndarray:
    """Apply regression deltas to proposals; inverse of :func:`encode_delta`.

    ``dw``/``dh`` are clamped to ``[-clamp, clamp]`` before exponentiation.
    """
    single = np.ndim(proposals) == 1
    p = as_boxes(proposals)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    cx = p[:, 0] + 0.5 * pw + d[:, 0] * pw
    cy = p[:, 1] + 0.5 * ph + d[:, 1] * ph
    w = pw * np.exp(np.clip(d[:, 2], -clamp, clamp))
    h = ph * np.exp(np.clip(d[:, 3], -clamp, clamp))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return out[0] if single else out


def clip_boxes(boxes, extent: tuple[float, float]) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, extent[0])
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, extent[1])
    return boxes


def degenerate_mask(boxes, eps: float = DEGENERATE_EPS) -> np.ndarray:
    """True where a box has non-finite coordinates or area at most ``eps``."""
    boxes = as_boxes(boxes)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    finite = np.all(np.isfinite(boxes), axis=1)
    return ~finite | (w <= 0) | (h <= 0) | (w * h <= eps)


class DeltaNormalizer:
    """Optional per-coordinate standardization of regression targets."""

    def __init__(self, means=(0.0, 0.0, 0.0, 0.0), stds=(1.0, 1.0, 1.0, 1.0)):
        self.means = np.asarray(means, dtype=np.float64)
        self.stds = np.asarray(stds, dtype=np.float64)

    @classmethod
    def fit(cls, targets: np.ndarray) -> "DeltaNormalizer":
        targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
        if len(targets) < 2:
            return cls()
        stds = targets.std(axis=0)
        stds[stds < 1e-8] = 1.0
        return cls(targets.mean(axis=0), stds)

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.means == 0.0) and np.all(self.stds == 1.0))

    def normalize(self, deltas: np.ndarray) -> np.ndarray:
        return (np.asarray(deltas) - self.means) / self.stds

    def denormalize(self, deltas: np.ndarray) -> np.ndarray:
        return np.asarray(deltas) * self.stds + self.means
