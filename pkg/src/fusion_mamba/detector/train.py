"""Training, evaluation and feature heatmaps for the dual-stream detector."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, TrainingDiverged
from ..tensor_core.module import load_checkpoint, save_checkpoint
from ..tensor_core.tensor import backward, no_grad
from .config import TrainConfig, format_config, parse_lines
from .data import collate
from .loss import detection_loss
from .metrics import COCO_THRESHOLDS, mean_ap
from .model import DetectorParams, forward_raw, fused_features, predict

LOG_FIELDS = ("epoch", "step", "loss", "coord", "conf", "class")
CONFIG_FILE = "config.txt"
LOG_FILE = "loss_log.csv"


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def clip_by_global_norm(grads, max_norm: float):
    if max_norm <= 0:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads]


@dataclass
class TrainResult:
    params: DetectorParams
    config: TrainConfig
    log: list = field(default_factory=list)
    checkpoint: Path | None = None

    def epoch_means(self) -> list[float]:
        means = []
        for e in range(1, self.config.epochs + 1):
            vals = [row["loss"] for row in self.log if row["epoch"] == e]
            if vals:
                means.append(float(np.mean(vals)))
        return means

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for row in rows:
        writer.writerow([row["epoch"], row["step"]] + [repr(float(row[k])) for k in LOG_FIELDS[2:]])
    return buf.getvalue()


def build_model(config: TrainConfig) -> DetectorParams:
    return DetectorParams(config.n_classes, config.fmb, seed=config.seed)


def train(config: TrainConfig, dataset, out_dir=None, progress=None) -> TrainResult:
    """Train from scratch; with ``out_dir`` writes the checkpoint, config and loss log there.

    The sample order, initial weights and every other random choice derive
    from ``config.seed``.
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    for s in dataset:
        if s.size != config.image_size:
            raise ConfigurationError(f"sample size {s.size} != image_size {config.image_size}")
        s.validate(config.n_classes)
    params = build_model(config)
    named = list(params.named_parameters())
    opt = SGD([p for _, p in named], config.learning_rate, config.momentum, config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    log = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            rgb, ir, boxes = collate(batch)
            outputs = forward_raw((rgb, ir), params, config.fmb)
            losses = detection_loss(outputs, boxes, config.lambda_coord)
            values = losses.values()
            step += 1
            if not np.isfinite(values["loss"]):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {values}")
            grads = backward(losses.total, [p for _, p in named])
            for (name, _), g in zip(named, grads):
                if not np.all(np.isfinite(g)):
                    raise TrainingDiverged(f"non-finite gradient for {name} at epoch {epoch} step {step}")
            opt.step(clip_by_global_norm(grads, config.grad_clip))
            params.zero_grad()
            row = {"epoch": epoch, "step": step, **values}
            log.append(row)
            if progress is not None:
                progress(row)
    result = TrainResult(params, config, log)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(params, out / "checkpoint")
        (out / "checkpoint" / CONFIG_FILE).write_text(format_config(config))
        (out / LOG_FILE).write_text(result.log_csv())
    return result


def load_model(checkpoint) -> tuple[DetectorParams, TrainConfig]:
    """Accepts a checkpoint directory, a TrainResult or a (params, config) pair."""
    if isinstance(checkpoint, TrainResult):
        return checkpoint.params, checkpoint.config
    if isinstance(checkpoint, tuple):
        return checkpoint
    directory = Path(checkpoint)
    config, _ = parse_lines((directory / CONFIG_FILE).read_text())
    params = build_model(config)
    load_checkpoint(params, directory)
    return params, config


def evaluate(checkpoint, dataset, iou_thresholds=COCO_THRESHOLDS, conf_floor: float = 0.05,
             nms_iou: float = 0.5) -> dict:
    """mAP metrics of a trained model on ``dataset`` after greedy class-wise NMS."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    params, config = load_model(checkpoint)
    detections = predict(dataset, params, config.fmb, conf_floor=conf_floor, iou_threshold=nms_iou)
    return mean_ap(detections, [s.boxes for s in dataset], config.n_classes, iou_thresholds)


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def feature_heatmap(feature: np.ndarray) -> np.ndarray:
    """Channel mean of |feature| for a (1,C,h,w) or (C,h,w) map, min-max normalized."""
    f = np.asarray(feature)
    if f.ndim == 4:
        f = f[0]
    return normalize_map(np.abs(f).mean(axis=0))


def heatmap(checkpoint, sample, stage: int) -> np.ndarray:
    params, config = load_model(checkpoint)
    if stage not in config.fmb.stages:
        raise ConfigurationError(f"stage {stage} is not a fusion stage {config.fmb.stages}")
    with no_grad():
        fused = fused_features(sample, params, config.fmb)
    return feature_heatmap(fused[stage].data)


def write_pgm(path, image: np.ndarray) -> Path:
    """ASCII PGM (P2) with 255 gray levels from values in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    levels = np.rint(img * 255).astype(int)
    h, w = levels.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in levels)
    path = Path(path)
    path.write_text(f"P2\n{w} {h}\n255\n{rows}\n")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.asarray(tokens[4:4 + w * h], dtype=np.float64).reshape(h, w) / maxval
