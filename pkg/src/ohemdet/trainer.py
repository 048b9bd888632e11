"""SGD training loop with heuristic, all-RoIs and online hard example mining.

Each iteration draws N scenes and accumulates gradients over N single-scene
passes before one momentum-SGD update. For OHEM every scene first goes
through a readonly pass: all non-excluded RoIs are forwarded under the
current parameters and their losses ranked; only the selected RoIs are then
forwarded again and backpropagated. The two counters in
:class:`IterationRecord` expose that asymmetry.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .detecteval import evaluate
from .geometry import DeltaNormalizer, iou_matrix
from .roihead import (
    HeadGradients, HeadParams, NonFiniteError, backward, feature_stats, init_params, load_snapshot, roi_losses, save_snapshot, sgd_step,
)
from .sampler import SamplerConfig, all_sample, heuristic_sample, label_rois, ohem_select, ohem_select_joint
from .synthdata import Dataset

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("iter", "lr", "selected_count", "mean_selected_loss", "forward_roi_count", "backward_roi_count", "wall_time_ms")
LOSS_COLUMNS = RECORD_COLUMNS[:-1]
ABLATION_COLUMNS = (
    "variant", "seed", "final_map", "final_mean_loss", "mean_iter_time_ms",
    "final_map_iterative", "final_mean_cls", "final_mean_loc", "mean_forward_rois", "mean_backward_rois", "lr",
)


class TrainingAbort(RuntimeError):
    """Non-finite loss or gradient; ``diagnostic`` describes the offending RoI."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass(frozen=True)
class TrainConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    lr_initial: float = 0.001
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 1500
    total_iters: int = 4000
    snapshot_every: int = 0  # 0 writes only the final snapshot
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    hidden_dim: int = 384
    loss_lambda: float = 1.0
    class_agnostic: bool = False
    normalize_targets: bool = False
    standardize_inputs: bool = True

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not (self.lr_initial > 0 and 0 < self.lr_decay_factor <= 1 and self.lr_decay_every >= 1):
            raise ValueError("learning-rate schedule values must be positive")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be >= 0")

    def lr_at(self, it: int) -> float:
        return self.lr_initial * self.lr_decay_factor ** (it // self.lr_decay_every)

    def with_sampler(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, sampler=dataclasses.replace(self.sampler, **changes))


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    lr: float
    selected_count: int
    mean_selected_loss: float
    forward_roi_count: int
    backward_roi_count: int
    wall_time: float  # seconds

    def row(self, timing: bool = True) -> list:
        out = [self.iter, repr(self.lr), self.selected_count, repr(self.mean_selected_loss), self.forward_roi_count, self.backward_roi_count]
        if timing:
            out.append(f"{1000.0 * self.wall_time:.3f}")
        return out


class PreparedScene(NamedTuple):
    boxes: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    targets: np.ndarray  # float32, normalized if requested
    active: np.ndarray
    labeled: object  # RoILabels


class PreparedSplit:
    """Per-scene labels and cached dedup matrices for one (dataset, bg_lo)."""

    def __init__(self, dataset: Dataset, fg_thresh: float, bg_lo: float, normalizer: DeltaNormalizer | None = None):
        self.dataset = dataset
        self.fg_thresh = fg_thresh
        self.bg_lo = bg_lo
        self.normalizer = normalizer
        self.scenes: list[PreparedScene] = []
        for scene in dataset.scenes:
            lab = label_rois(scene.proposals, scene.gt_boxes, scene.gt_classes, fg_thresh, bg_lo)
            targets = lab.targets
            if normalizer is not None:
                targets = np.where((lab.labels >= 1)[:, None], normalizer.normalize(targets), 0.0)
            self.scenes.append(PreparedScene(scene.proposals, scene.features, lab.labels, targets.astype(np.float32), lab.active_indices, lab))
        self._suppress: dict[tuple[int, float], np.ndarray] = {}

    def suppress(self, i: int, thresh: float) -> np.ndarray:
        """Boolean ``IoU > thresh`` matrix among the active RoIs of scene ``i``."""
        key = (i, thresh)
        if key not in self._suppress:
            b = self.scenes[i].boxes[self.scenes[i].active]
            self._suppress[key] = iou_matrix(b, b) > thresh
        return self._suppress[key]

    def concatenated(self):
        feats = np.concatenate([s.features[s.active] for s in self.scenes])
        labels = np.concatenate([s.labels[s.active] for s in self.scenes])
        targets = np.concatenate([s.targets[s.active] for s in self.scenes])
        return feats, labels, targets


def fit_normalizer(dataset: Dataset, fg_thresh: float = 0.5) -> DeltaNormalizer:
    targets = []
    for scene in dataset.scenes:
        lab = label_rois(scene.proposals, scene.gt_boxes, scene.gt_classes, fg_thresh, 0.0)
        targets.append(lab.targets[lab.labels >= 1])
    return DeltaNormalizer.fit(np.concatenate(targets))


@dataclass
class TrainResult:
    params: HeadParams
    records: list[IterationRecord]
    snapshots: list[Path]
    velocity: HeadGradients
    events: list[tuple[int, str]]
    normalizer: DeltaNormalizer | None


def _selection(cfg: SamplerConfig, prep: PreparedSplit, idx: list[int], params: HeadParams, rng) -> tuple[list[np.ndarray], int]:
    """Selected RoI indices per drawn scene, plus the forward RoI count."""
    quota = cfg.per_image
    if cfg.strategy == "heuristic":
        sel = [heuristic_sample(prep.scenes[i].labeled, quota, cfg.fg_fraction, rng) for i in idx]
        return sel, sum(len(s) for s in sel)
    if cfg.strategy == "all":
        sel = [all_sample(prep.scenes[i].labeled, quota, rng) for i in idx]
        return sel, sum(len(s) for s in sel)

    # readonly pass over every non-excluded RoI
    scored = []
    forward = 0
    for i in idx:
        s = prep.scenes[i]
        a = s.active
        total = roi_losses(params, s.features[a], s.labels[a], s.targets[a]).total
        forward += len(a)
        if not np.all(np.isfinite(total)):
            bad = int(a[np.flatnonzero(~np.isfinite(total))[0]])
            raise TrainingAbort("non-finite loss in readonly pass", {"scene_index": i, "roi_index": bad, "box": s.boxes[bad].tolist(), "label": int(s.labels[bad])})
        scored.append((total, s.boxes[a], prep.suppress(i, cfg.nms_dedup_iou)))
    if cfg.joint_selection:
        picks = ohem_select_joint(scored, cfg.batch_size, cfg.nms_dedup_iou)
    else:
        picks = [ohem_select(t, b, quota, cfg.nms_dedup_iou, suppress=sup) for t, b, sup in scored]
    return [prep.scenes[i].active[p] for i, p in zip(idx, picks)], forward


def train_step(params: HeadParams, prep: PreparedSplit, idx: list[int], selected: list[np.ndarray]):
    """Accumulated mean-loss gradient over the selected RoIs of the drawn scenes.

    Returns ``(grads, selected_count, mean_selected_loss)``; ``grads`` is None
    for an empty selection.
    """
    total_sel = sum(len(s) for s in selected)
    if total_sel == 0:
        return None, 0, float("nan")
    grads = HeadGradients.zeros_like(params)
    loss_sum = 0.0
    for i, sel in zip(idx, selected):
        if len(sel) == 0:
            continue
        s = prep.scenes[i]
        losses, g = backward(params, s.features[sel], s.labels[sel], s.targets[sel], scale=1.0 / total_sel)
        if not np.all(np.isfinite(losses.total)):
            bad = int(sel[np.flatnonzero(~np.isfinite(losses.total))[0]])
            raise TrainingAbort("non-finite loss", {"scene_index": i, "roi_index": bad, "box": s.boxes[bad].tolist(), "label": int(s.labels[bad])})
        grads += g
        loss_sum += float(losses.total.astype(np.float64).sum())
    return grads, total_sel, loss_sum / total_sel


def iteration_rng(seed: int, it: int) -> np.random.Generator:
    """Generator for iteration ``it``: first draws the N scene indices, then sampling."""
    return np.random.default_rng([seed, 0x49544552, it])


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    resume=None,
    prepared: PreparedSplit | None = None,
    on_snapshot: Callable[[int, HeadParams], None] | None = None,
) -> TrainResult:
    """Run SGD for ``config.total_iters`` iterations.

    Scene draws and sampling use a generator seeded by ``(seed, iteration)``
    so a run resumed from a snapshot (``resume`` = path or loaded snapshot)
    reproduces the remaining records exactly.
    """
    cfg = config.sampler
    ds_cfg = dataset.config
    normalizer = fit_normalizer(dataset, cfg.fg_thresh) if config.normalize_targets else None
    if prepared is None:
        prepared = PreparedSplit(dataset, cfg.fg_thresh, cfg.bg_lo, normalizer)
    if resume is not None:
        snap = load_snapshot(resume) if isinstance(resume, (str, Path)) else resume
        params, start = snap.params, snap.iteration
        velocity = snap.velocity if snap.velocity is not None else HeadGradients.zeros_like(params)
    else:
        mean = std = None
        if config.standardize_inputs:
            mean, std = feature_stats(np.concatenate([s.features for s in dataset.scenes]))
        params = init_params(
            ds_cfg.feature_dim, config.hidden_dim, ds_cfg.num_classes,
            np.random.default_rng([config.seed, 0x494E4954]),
            lam=config.loss_lambda, class_agnostic=config.class_agnostic,
            input_mean=mean, input_std=std,
        )
        velocity = HeadGradients.zeros_like(params)
        start = 0
    if params.feature_dim != ds_cfg.feature_dim or params.num_classes != ds_cfg.num_classes:
        raise ValueError("snapshot dimensions do not match the dataset")
    out_dir = Path(out_dir) if out_dir is not None else None
    extra = {"normalizer": None if normalizer is None else {"means": normalizer.means.tolist(), "stds": normalizer.stds.tolist()}}

    records: list[IterationRecord] = []
    snapshots: list[Path] = []
    events: list[tuple[int, str]] = []
    n_scenes = len(dataset.scenes)
    for it in range(start, config.total_iters):
        t0 = time.perf_counter()
        lr = config.lr_at(it)
        rng = iteration_rng(config.seed, it)
        idx = [int(i) for i in rng.integers(0, n_scenes, cfg.images_per_batch)]
        selected, forward_count = _selection(cfg, prepared, idx, params, rng)
        grads, n_sel, mean_loss = train_step(params, prepared, idx, selected)
        if grads is None:
            events.append((it, "empty selection; update skipped"))
            log.warning("iteration %d: empty selection, update skipped", it)
        else:
            try:
                params, velocity = sgd_step(params, grads, lr, velocity, config.momentum, config.weight_decay)
            except NonFiniteError as exc:
                raise TrainingAbort(str(exc), {"iteration": it, "scenes": idx}) from None
        records.append(IterationRecord(it, lr, n_sel, mean_loss, forward_count, n_sel, time.perf_counter() - t0))

        done = it + 1
        if (config.snapshot_every and done % config.snapshot_every == 0) or done == config.total_iters:
            if out_dir is not None:
                snapshots.append(save_snapshot(out_dir / f"snap_{done}", params, done, velocity, extra))
            if on_snapshot is not None:
                on_snapshot(done, params)
    return TrainResult(params, records, snapshots, velocity, events, normalizer)


def snapshot_normalizer(extra: dict) -> DeltaNormalizer | None:
    norm = (extra or {}).get("normalizer")
    return None if norm is None else DeltaNormalizer(norm["means"], norm["stds"])


def write_records(path, records: list[IterationRecord], timing: bool = True) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS if timing else LOSS_COLUMNS)
        for r in records:
            writer.writerow(r.row(timing))
    return path


class MeanLoss(NamedTuple):
    total: float
    cls: float
    loc: float


def eval_mean_loss(params: HeadParams, split, fg_thresh: float = 0.5, chunk: int = 20000) -> MeanLoss:
    """Mean per-RoI loss over every proposal of a split (bg_lo = 0), independent of any sampler."""
    if isinstance(split, PreparedSplit):
        if split.bg_lo != 0.0 or split.fg_thresh != fg_thresh:
            split = PreparedSplit(split.dataset, fg_thresh, 0.0, split.normalizer)
    else:
        split = PreparedSplit(split, fg_thresh, 0.0)
    feats, labels, targets = split.concatenated()
    sums = np.zeros(3)
    for lo in range(0, len(labels), chunk):
        sl = slice(lo, lo + chunk)
        losses = roi_losses(params, feats[sl], labels[sl], targets[sl])
        sums += [losses.total.astype(np.float64).sum(), losses.cls.astype(np.float64).sum(), losses.loc.astype(np.float64).sum()]
    n = max(len(labels), 1)
    return MeanLoss(*(float(v / n) for v in sums))


# --- ablation suite ----------------------------------------------------------------

# name -> (sampler overrides, lr multiplier)
ABLATION_VARIANTS: dict[str, tuple[dict, float]] = {
    "heuristic_bglo0.1": ({"strategy": "heuristic", "bg_lo": 0.1, "images_per_batch": 2, "batch_size": 128}, 1.0),
    "heuristic_bglo0": ({"strategy": "heuristic", "bg_lo": 0.0, "images_per_batch": 2, "batch_size": 128}, 1.0),
    "heuristic_n1": ({"strategy": "heuristic", "bg_lo": 0.1, "images_per_batch": 1, "batch_size": 128}, 1.0),
    "all_rois_b2048": ({"strategy": "all", "bg_lo": 0.0, "images_per_batch": 2, "batch_size": 2048}, None),
    "ohem_n1": ({"strategy": "ohem", "bg_lo": 0.0, "images_per_batch": 1, "batch_size": 128}, 1.0),
    "ohem_n2": ({"strategy": "ohem", "bg_lo": 0.0, "images_per_batch": 2, "batch_size": 128}, 1.0),
}
DEFAULT_ALL_ROIS_LR_MULTIPLIER = 3.0


@dataclass
class AblationRow:
    variant: str
    seed: int
    final_map: float
    final_mean_loss: float
    mean_iter_time_ms: float
    final_map_iterative: float
    final_mean_cls: float
    final_mean_loc: float
    mean_forward_rois: float
    mean_backward_rois: float
    lr: float
    curve: list[tuple[int, float]] = field(default_factory=list)  # (iteration, eval mean loss)

    def row(self) -> list:
        return [getattr(self, c) for c in ABLATION_COLUMNS]


def variant_config(base: TrainConfig, name: str, seed: int, all_lr_multiplier: float = DEFAULT_ALL_ROIS_LR_MULTIPLIER) -> TrainConfig:
    overrides, mult = ABLATION_VARIANTS[name]
    mult = all_lr_multiplier if mult is None else mult
    cfg = base.with_sampler(**overrides)
    return dataclasses.replace(cfg, lr_initial=base.lr_initial * mult, seed=seed)


def run_ablation_suite(
    base: TrainConfig,
    train_ds: Dataset,
    test_ds: Dataset,
    seeds=(0, 1, 2),
    variants=None,
    all_lr_multiplier: float = DEFAULT_ALL_ROIS_LR_MULTIPLIER,
    iterative: bool = True,
    progress: Callable[[AblationRow], None] | None = None,
    curve_every: int = 0,
) -> list[AblationRow]:
    """Train every (variant, seed) pair; report test mAP and the all-RoI training loss.

    ``curve_every > 0`` also records the all-RoI training loss every that
    many iterations into ``AblationRow.curve``.
    """
    variants = list(ABLATION_VARIANTS) if variants is None else list(variants)
    unknown = set(variants) - set(ABLATION_VARIANTS)
    if unknown:
        raise ValueError(f"unknown ablation variants: {sorted(unknown)}")
    normalizer = fit_normalizer(train_ds, base.sampler.fg_thresh) if base.normalize_targets else None
    prepared: dict[float, PreparedSplit] = {}

    def prep(bg_lo: float) -> PreparedSplit:
        if bg_lo not in prepared:
            prepared[bg_lo] = PreparedSplit(train_ds, base.sampler.fg_thresh, bg_lo, normalizer)
        return prepared[bg_lo]

    rows = []
    for name in variants:
        for seed in seeds:
            cfg = variant_config(base, name, seed, all_lr_multiplier)
            curve: list[tuple[int, float]] = []
            hook = None
            if curve_every:
                cfg = dataclasses.replace(cfg, snapshot_every=curve_every)
                hook = lambda it, p: curve.append((it, eval_mean_loss(p, prep(0.0), cfg.sampler.fg_thresh).total))  # noqa: E731
            result = train(cfg, train_ds, prepared=prep(cfg.sampler.bg_lo), on_snapshot=hook)
            mean_loss = eval_mean_loss(result.params, prep(0.0), cfg.sampler.fg_thresh)
            report, _ = evaluate(result.params, test_ds.scenes, normalizer=result.normalizer)
            map_iter = math.nan
            if iterative:
                report_it, _ = evaluate(result.params, test_ds.scenes, iterative=True, config=test_ds.config, normalizer=result.normalizer)
                map_iter = report_it.mean_ap
            recs = result.records
            row = AblationRow(
                variant=name,
                seed=seed,
                final_map=report.mean_ap,
                final_mean_loss=mean_loss.total,
                mean_iter_time_ms=1000.0 * float(np.mean([r.wall_time for r in recs])),
                final_map_iterative=map_iter,
                final_mean_cls=mean_loss.cls,
                final_mean_loc=mean_loss.loc,
                mean_forward_rois=float(np.mean([r.forward_roi_count for r in recs])),
                mean_backward_rois=float(np.mean([r.backward_roi_count for r in recs])),
                lr=cfg.lr_initial,
                curve=curve,
            )
            log.info("ablation %s seed %d: mAP %.4f mean loss %.4f", name, seed, row.final_map, row.final_mean_loss)
            if progress is not None:
                progress(row)
            rows.append(row)
    return rows


def write_ablation(path, rows: list[AblationRow]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for r in rows:
            writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r.row()])
    return path
