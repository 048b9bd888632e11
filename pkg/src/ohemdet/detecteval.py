"""Inference post-processing and VOC-style AP."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .geometry import BBox, DEFAULT_DELTA_CLAMP, DeltaNormalizer, clip_boxes, decode_delta, degenerate_mask, iou_matrix, nms, score_order
from .roihead import HeadParams, forward
from .synthdata import DatasetConfig, Scene, featurize

DEFAULT_SCORE_THRESH = 0.05
DEFAULT_NMS_IOU = 0.3
DEFAULT_RESCORE_THRESH = 0.5
DEFAULT_VOTE_IOU = 0.5

DETECTION_COLUMNS = ("scene_id", "class_id", "x1", "y1", "x2", "y2", "score")
REPORT_COLUMNS = ("class_id", "num_gt", "num_det", "ap")


class Detection(NamedTuple):
    scene_id: int
    class_id: int
    box: BBox
    score: float


@dataclass
class DetectStats:
    degenerate: int = 0
    rescored: int = 0


def _class_slot(deltas: np.ndarray, c: int, class_agnostic: bool) -> np.ndarray:
    return deltas[:, :4] if class_agnostic else deltas[:, 4 * (c - 1):4 * c]


def score_boxes(
    params: HeadParams,
    features: np.ndarray,
    boxes: np.ndarray,
    extent,
    normalizer: DeltaNormalizer | None = None,
    clamp: float = DEFAULT_DELTA_CLAMP,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class scores ``(n, K)`` and clipped relocalized boxes ``(n, K, 4)``."""
    probs, deltas = forward(params, features)
    probs = np.atleast_2d(probs).astype(np.float64)
    deltas = np.atleast_2d(deltas).astype(np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    K = params.num_classes
    out = np.empty((len(boxes), K, 4))
    for c in range(1, K + 1):
        d = _class_slot(deltas, c, params.class_agnostic)
        if normalizer is not None:
            d = normalizer.denormalize(d)
        out[:, c - 1] = clip_boxes(decode_delta(boxes, d, clamp), extent)
    return probs[:, 1:], out


def _filter(scores, boxes, score_thresh, stats):
    keep = scores >= score_thresh
    bad = degenerate_mask(boxes) if len(boxes) else np.zeros(0, bool)
    if stats is not None:
        stats.degenerate += int((keep & bad).sum())
    keep &= ~bad
    return scores[keep], boxes[keep]


def detect(
    params: HeadParams,
    scene: Scene,
    score_thresh: float = DEFAULT_SCORE_THRESH,
    nms_iou: float = DEFAULT_NMS_IOU,
    normalizer: DeltaNormalizer | None = None,
    stats: DetectStats | None = None,
) -> list[Detection]:
    """Score every proposal for every class, drop low scores, per-class NMS."""
    scores, boxes = score_boxes(params, scene.features, scene.proposals, scene.extent, normalizer)
    dets = []
    for c in range(1, params.num_classes + 1):
        s, b = _filter(scores[:, c - 1], boxes[:, c - 1], score_thresh, stats)
        for k in nms(b, s, nms_iou):
            dets.append(Detection(scene.scene_id, c, BBox(*map(float, b[k])), float(s[k])))
    return dets


def box_voting(kept_boxes, kept_scores, pool_boxes, pool_scores, vote_iou: float = DEFAULT_VOTE_IOU, weights: str = "score"):
    """Replace each kept box by the weighted mean of pool boxes with IoU >= ``vote_iou``.

    Weights are the raw pool scores (``weights="score"``) or uniform; the
    voted score is the max contributing score.
    """
    kept_boxes = np.asarray(kept_boxes, dtype=np.float64).reshape(-1, 4)
    pool_boxes = np.asarray(pool_boxes, dtype=np.float64).reshape(-1, 4)
    pool_scores = np.asarray(pool_scores, dtype=np.float64)
    if len(kept_boxes) == 0:
        return kept_boxes, np.asarray(kept_scores, dtype=np.float64)
    overlaps = iou_matrix(kept_boxes, pool_boxes)
    out_boxes = np.empty_like(kept_boxes)
    out_scores = np.empty(len(kept_boxes))
    for i in range(len(kept_boxes)):
        m = overlaps[i] >= vote_iou
        if not m.any():
            out_boxes[i], out_scores[i] = kept_boxes[i], kept_scores[i]
            continue
        w = pool_scores[m] if weights == "score" else np.ones(int(m.sum()))
        out_boxes[i] = (w[:, None] * pool_boxes[m]).sum(axis=0) / w.sum()
        out_scores[i] = pool_scores[m].max()
    return out_boxes, out_scores


def detect_iterative(
    params: HeadParams,
    scene: Scene,
    config: DatasetConfig,
    score_thresh: float = DEFAULT_SCORE_THRESH,
    nms_iou: float = DEFAULT_NMS_IOU,
    rescore_thresh: float = DEFAULT_RESCORE_THRESH,
    vote_iou: float = DEFAULT_VOTE_IOU,
    normalizer: DeltaNormalizer | None = None,
    vote_weights: str = "score",
    stats: DetectStats | None = None,
) -> list[Detection]:
    """Two-stage relocalization followed by NMS and weighted box voting.

    R1 are the scored, relocalized proposals. R1 boxes scoring at least
    ``rescore_thresh`` are featurized again and rescored/relocalized for the
    same class, giving R2. NMS runs on R1 + R2 and each survivor is voted
    over every R1 + R2 box of its class with IoU >= ``vote_iou``.
    """
    scores, boxes = score_boxes(params, scene.features, scene.proposals, scene.extent, normalizer)
    dets = []
    for c in range(1, params.num_classes + 1):
        s1, b1 = _filter(scores[:, c - 1], boxes[:, c - 1], score_thresh, stats)
        high = s1 >= rescore_thresh
        if high.any():
            feats = featurize(config, scene, b1[high])
            s2, b2 = score_boxes(params, feats, b1[high], scene.extent, normalizer)
            if stats is not None:
                stats.rescored += int(high.sum())
            s2, b2 = _filter(s2[:, c - 1], b2[:, c - 1], score_thresh, stats)
            rf_s, rf_b = np.concatenate([s1, s2]), np.concatenate([b1, b2])
        else:
            rf_s, rf_b = s1, b1
        keep = nms(rf_b, rf_s, nms_iou)
        vb, vs = box_voting(rf_b[keep], rf_s[keep], rf_b, rf_s, vote_iou, vote_weights)
        for box, score in zip(vb, vs):
            dets.append(Detection(scene.scene_id, c, BBox(*map(float, box)), float(score)))
    return dets


def detect_dataset(params, scenes: Iterable[Scene], iterative: bool = False, config: DatasetConfig | None = None, **kw) -> list[Detection]:
    dets = []
    for scene in scenes:
        if iterative:
            dets += detect_iterative(params, scene, config, **kw)
        else:
            dets += detect(params, scene, **kw)
    return dets


# --- evaluation ------------------------------------------------------------------


@dataclass
class EvalReport:
    ap: dict[int, float | None]
    num_gt: dict[int, int]
    num_det: dict[int, int]
    mean_ap: float = field(init=False)

    def __post_init__(self):
        valid = [v for v in self.ap.values() if v is not None]
        self.mean_ap = float(np.mean(valid)) if valid else 0.0

    def rows(self) -> list[dict]:
        out = []
        for c in sorted(self.ap):
            ap = self.ap[c]
            out.append({"class_id": c, "num_gt": self.num_gt[c], "num_det": self.num_det[c], "ap": "absent" if ap is None else f"{ap:.6f}"})
        out.append({"class_id": "mAP", "num_gt": sum(self.num_gt.values()), "num_det": sum(self.num_det.values()), "ap": f"{self.mean_ap:.6f}"})
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows())
        return path

    def summary(self) -> str:
        lines = [f"{'class':>6} {'gt':>6} {'det':>7} {'AP':>8}"]
        for row in self.rows()[:-1]:
            lines.append(f"{row['class_id']:>6} {row['num_gt']:>6} {row['num_det']:>7} {row['ap']:>8}")
        lines.append(f"mAP = {self.mean_ap:.4f}")
        return "\n".join(lines)


def ground_truth(scenes: Iterable[Scene]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    return {s.scene_id: (s.gt_boxes, s.gt_classes) for s in scenes}


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from a score-ordered TP/FP sequence."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / num_gt
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_detections(dets: list[Detection], gts: Mapping[int, tuple[np.ndarray, np.ndarray]], class_id: int, iou_thresh: float) -> np.ndarray:
    """TP flags for class ``class_id`` detections in descending-score order.

    Each detection takes the highest-IoU still-unmatched ground truth of its
    class (lower index on ties) if that IoU reaches ``iou_thresh``.
    """
    cls_dets = [d for d in dets if d.class_id == class_id]
    order = score_order(np.array([d.score for d in cls_dets]))
    used: dict[int, np.ndarray] = {}
    tp = np.zeros(len(cls_dets))
    for rank, j in enumerate(order):
        d = cls_dets[j]
        boxes, classes = gts.get(d.scene_id, (np.zeros((0, 4)), np.zeros(0, np.int64)))
        idx = np.flatnonzero(classes == class_id)
        if len(idx) == 0:
            continue
        taken = used.setdefault(d.scene_id, np.zeros(len(classes), bool))
        free = idx[~taken[idx]]
        if len(free) == 0:
            continue
        ov = iou_matrix([d.box], boxes[free])[0]
        k = int(np.argmax(ov))
        if ov[k] >= iou_thresh:
            taken[free[k]] = True
            tp[rank] = 1.0
    return tp


def voc_ap(detections: list[Detection], gts: Mapping[int, tuple[np.ndarray, np.ndarray]], num_classes: int, iou_thresh: float = 0.5) -> EvalReport:
    ap, num_gt, num_det = {}, {}, {}
    for c in range(1, num_classes + 1):
        n_gt = int(sum(int(np.sum(cl == c)) for _, cl in gts.values()))
        num_gt[c] = n_gt
        num_det[c] = sum(1 for d in detections if d.class_id == c)
        if n_gt == 0:
            ap[c] = None
            continue
        ap[c] = average_precision(match_detections(detections, gts, c, iou_thresh), n_gt)
    return EvalReport(ap, num_gt, num_det)


def evaluate(params, scenes: list[Scene], iterative: bool = False, config: DatasetConfig | None = None, iou_thresh: float = 0.5, **kw) -> tuple[EvalReport, list[Detection]]:
    dets = detect_dataset(params, scenes, iterative=iterative, config=config, **kw)
    return voc_ap(dets, ground_truth(scenes), params.num_classes, iou_thresh), dets


# --- detections CSV ----------------------------------------------------------------


def write_detections(path, detections: Iterable[Detection]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DETECTION_COLUMNS)
        for d in detections:
            writer.writerow([d.scene_id, d.class_id, *(repr(float(v)) for v in d.box), repr(float(d.score))])
    return path


def read_detections(path) -> list[Detection]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DETECTION_COLUMNS:
            raise ValueError(f"{path}: unexpected detection columns {reader.fieldnames}")
        return [
            Detection(int(r["scene_id"]), int(r["class_id"]), BBox(float(r["x1"]), float(r["y1"]), float(r["x2"]), float(r["y2"])), float(r["score"]))
            for r in reader
        ]
