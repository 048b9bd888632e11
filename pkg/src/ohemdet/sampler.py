"""RoI labeling and mini-batch selection strategies."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import BBox, encode_delta, iou_matrix, nms

STRATEGIES = ("heuristic", "ohem", "all")


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "heuristic"
    batch_size: int = 128  # B, over all images of one iteration
    images_per_batch: int = 2  # N
    fg_fraction: float = 0.25
    bg_lo: float = 0.1
    fg_thresh: float = 0.5
    nms_dedup_iou: float = 0.7
    joint_selection: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.images_per_batch < 1 or self.batch_size < 1:
            raise ValueError("batch_size and images_per_batch must be >= 1")
        if self.batch_size % self.images_per_batch:
            raise ValueError("batch_size must be divisible by images_per_batch")
        for name in ("fg_fraction", "bg_lo", "fg_thresh", "nms_dedup_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.bg_lo < self.fg_thresh:
            raise ValueError("bg_lo must be below fg_thresh")

    @property
    def per_image(self) -> int:
        return self.batch_size // self.images_per_batch


class LabeledRoI(NamedTuple):
    roi_index: int
    box: BBox
    u: int
    max_iou: float
    matched_gt: int | None
    target: tuple[float, float, float, float] | None
    excluded: bool


@dataclass
class RoILabels:
    """Column-wise labels for every proposal of one scene."""

    boxes: np.ndarray  # (P, 4)
    labels: np.ndarray  # (P,) int, 0 = background
    max_iou: np.ndarray  # (P,)
    matched_gt: np.ndarray  # (P,) int, -1 when the RoI overlaps no object
    targets: np.ndarray  # (P, 4), zero rows for background
    excluded: np.ndarray  # (P,) bool

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledRoI:
        fg = self.labels[i] >= 1
        return LabeledRoI(
            roi_index=int(i),
            box=BBox(*map(float, self.boxes[i])),
            u=int(self.labels[i]),
            max_iou=float(self.max_iou[i]),
            matched_gt=int(self.matched_gt[i]) if self.matched_gt[i] >= 0 else None,
            target=tuple(map(float, self.targets[i])) if fg else None,
            excluded=bool(self.excluded[i]),
        )

    @property
    def fg_indices(self) -> np.ndarray:
        return np.flatnonzero((self.labels >= 1) & ~self.excluded)

    @property
    def bg_indices(self) -> np.ndarray:
        return np.flatnonzero((self.labels == 0) & ~self.excluded)

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.excluded)


def label_rois(proposals, gt_boxes, gt_classes, fg_thresh: float = 0.5, bg_lo: float = 0.1) -> RoILabels:
    """Match each proposal to its max-IoU object and assign fg / bg / excluded.

    Ties in IoU go to the lower object index.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if len(proposals) == 0:
        raise ValueError("label_rois needs at least one proposal")
    P = len(proposals)
    labels = np.zeros(P, dtype=np.int64)
    targets = np.zeros((P, 4))
    if len(gt_boxes):
        overlaps = iou_matrix(proposals, gt_boxes)
        matched = overlaps.argmax(axis=1)
        max_iou = overlaps[np.arange(P), matched]
        matched = np.where(max_iou > 0, matched, -1)
    else:
        max_iou = np.zeros(P)
        matched = np.full(P, -1)
    fg = max_iou >= fg_thresh
    labels[fg] = gt_classes[matched[fg]]
    if fg.any():
        targets[fg] = encode_delta(proposals[fg], gt_boxes[matched[fg]])
    excluded = max_iou < bg_lo
    return RoILabels(proposals, labels, max_iou, matched, targets, excluded)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def heuristic_sample(labeled: RoILabels, quota: int, fg_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Fixed-ratio sampling: ``round(fg_fraction*quota)`` fg (as available), bg for the rest.

    bg is drawn without replacement first and only repeats once exhausted.
    When the scene has no bg at all the batch is just the available fg.
    """
    if quota < 1:
        raise ValueError("quota must be >= 1")
    fg = labeled.fg_indices
    bg = labeled.bg_indices
    if len(fg) + len(bg) == 0:
        raise SamplingError("no non-excluded RoIs to sample from")
    n_fg = min(_round_half_up(fg_fraction * quota), len(fg))
    fg_pick = rng.choice(fg, n_fg, replace=False) if n_fg else np.empty(0, np.int64)
    need = quota - n_fg
    if len(bg) == 0:
        return fg_pick.astype(np.int64)
    n_unique = min(need, len(bg))
    bg_pick = rng.choice(bg, n_unique, replace=False)
    if need > n_unique:
        bg_pick = np.concatenate([bg_pick, rng.choice(bg, need - n_unique, replace=True)])
    return np.concatenate([fg_pick, bg_pick]).astype(np.int64)


def ohem_select(losses, boxes, quota: int, nms_dedup_iou: float = 0.7, suppress: np.ndarray | None = None) -> np.ndarray:
    """Hardest-first selection: NMS by loss, then the first ``quota`` survivors.

    Survivors come out of greedy NMS in descending-loss order, so stopping
    once ``quota`` boxes are kept is identical to suppress-then-truncate.
    Equal losses rank the lower index first. No fg/bg ratio is imposed.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if suppress is None and len(boxes) != len(losses):
        raise ValueError(f"losses/boxes length mismatch: {len(losses)} vs {len(boxes)}")
    if len(losses) == 0:
        return np.empty(0, np.int64)
    keep = nms(boxes, losses, nms_dedup_iou, limit=quota, suppress=suppress)
    return np.asarray(keep, dtype=np.int64)


def ohem_select_joint(per_image: list[tuple], batch_size: int, nms_dedup_iou: float = 0.7) -> list[np.ndarray]:
    """Joint variant: dedup within each image, then the top ``batch_size`` losses across images.

    ``per_image`` holds ``(losses, boxes)`` or ``(losses, boxes, suppress)``
    tuples. Returns selected indices per image. Ties rank earlier images,
    then lower indices, first.
    """
    survivors = []
    for img, item in enumerate(per_image):
        losses, boxes = item[0], item[1]
        suppress = item[2] if len(item) > 2 else None
        keep = ohem_select(losses, boxes, len(losses), nms_dedup_iou, suppress)
        survivors += [(-float(losses[k]), img, int(k)) for k in keep]
    survivors.sort()
    chosen = survivors[:batch_size]
    out = []
    for img in range(len(per_image)):
        out.append(np.array([k for _, i, k in chosen if i == img], dtype=np.int64))
    return out


def all_sample(labeled: RoILabels, quota: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Every non-excluded RoI, uniformly subsampled to ``quota`` when there are more."""
    active = labeled.active_indices
    if quota is None or len(active) <= quota:
        return active
    if rng is None:
        raise ValueError("rng required when subsampling")
    return np.sort(rng.choice(active, quota, replace=False))
