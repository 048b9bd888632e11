"""Online hard example mining for a region-based detection head on a synthetic benchmark."""

__version__ = "0.1.0"

from .geometry import BBox, decode_delta, encode_delta, iou, iou_matrix, nms
from .roihead import HeadParams, backward, forward, init_params, load_snapshot, save_snapshot
from .sampler import SamplerConfig, heuristic_sample, label_rois, ohem_select
from .synthdata import DatasetConfig, generate_dataset, read_dataset, write_dataset
from .trainer import TrainConfig, eval_mean_loss, run_ablation_suite, train
from .detecteval import detect, detect_iterative, evaluate, voc_ap

__all__ = [
    "BBox", "decode_delta", "encode_delta", "iou", "iou_matrix", "nms",
    "HeadParams", "backward", "forward", "init_params", "load_snapshot", "save_snapshot",
    "SamplerConfig", "heuristic_sample", "label_rois", "ohem_select",
    "DatasetConfig", "generate_dataset", "read_dataset", "write_dataset",
    "TrainConfig", "eval_mean_loss", "run_ablation_suite", "train",
    "detect", "detect_iterative", "evaluate", "voc_ap",
]
