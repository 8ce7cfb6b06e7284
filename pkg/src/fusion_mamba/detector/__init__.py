"""Dual-stream RGB / thermal detector built around the fusion block."""

from .config import TrainConfig, format_config, parse_lines
from .data import DetectionSample, collate, load_dataset, save_dataset, synth_dataset
from .loss import LossBreakdown, assign_targets, detection_loss
from .metrics import COCO_THRESHOLDS, box_iou, mean_ap
from .model import (
    BACKBONE_CHANNELS,
    BoxPrediction,
    DetectorParams,
    backbone_forward,
    decode,
    detect_forward,
    forward_raw,
    fused_features,
    nms,
    predict,
)
from .train import SGD, TrainResult, evaluate, feature_heatmap, heatmap, load_model, train, write_pgm

__all__ = [
    "BACKBONE_CHANNELS", "BoxPrediction", "COCO_THRESHOLDS", "DetectionSample", "DetectorParams",
    "LossBreakdown", "SGD", "TrainConfig", "TrainResult", "assign_targets", "backbone_forward",
    "box_iou", "collate", "decode", "detect_forward", "detection_loss", "evaluate", "feature_heatmap",
    "format_config", "forward_raw", "fused_features", "heatmap", "load_dataset", "load_model",
    "mean_ap", "nms", "parse_lines", "predict", "save_dataset", "synth_dataset", "train", "write_pgm",
]
