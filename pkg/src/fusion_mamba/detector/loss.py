"""Detection loss: lambda * (1 - IoU) + objectness BCE + class cross-entropy.

Each ground-truth box is matched to exactly one cell: the cell containing its
center, on the scale whose reference size (``REF_SIZE_PER_STRIDE * stride``)
is closest to the box's longer side in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from ..tensor_core import ops
from ..tensor_core.tensor import Tensor
from .model import ScaleOutput, cell_centers

REF_SIZE_PER_STRIDE = 2.0
IOU_EPS = 1e-9


@dataclass
class Assignment:
    """Matched cells on one scale: batch/row/col indices plus their boxes and classes."""

    b: np.ndarray
    i: np.ndarray
    j: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return len(self.b)


@dataclass
class LossBreakdown:
    total: Tensor
    coord: Tensor
    conf: Tensor
    cls: Tensor
    n_matched: int

    def values(self) -> dict:
        return {"loss": float(self.total.data), "coord": float(self.coord.data),
                "conf": float(self.conf.data), "class": float(self.cls.data)}


def assign_targets(targets, outputs: list[ScaleOutput]) -> list[Assignment]:
    """Match every target box to one (scale, cell); later duplicates of a taken cell are dropped."""
    strides = np.array([o.stride for o in outputs], dtype=np.float64)
    per_scale = [([], [], [], [], []) for _ in outputs]
    taken = set()
    for b, boxes in enumerate(targets):
        for x0, y0, x1, y1, c in np.asarray(boxes, dtype=np.float64).reshape(-1, 5):
            side = max(x1 - x0, y1 - y0)
            s = int(np.argmin(np.abs(np.log(side) - np.log(REF_SIZE_PER_STRIDE * strides))))
            _, _, h, w = outputs[s].box.shape
            i = min(int((y0 + y1) / 2 // strides[s]), h - 1)
            j = min(int((x0 + x1) / 2 // strides[s]), w - 1)
            if (s, b, i, j) in taken:
                continue
            taken.add((s, b, i, j))
            for lst, v in zip(per_scale[s], (b, i, j, (x0, y0, x1, y1), int(c))):
                lst.append(v)
    out = []
    for bs, is_, js, bx, cs in per_scale:
        out.append(Assignment(np.asarray(bs, dtype=np.int64), np.asarray(is_, dtype=np.int64),
                              np.asarray(js, dtype=np.int64), np.asarray(bx, dtype=np.float64).reshape(-1, 4),
                              np.asarray(cs, dtype=np.int64)))
    return out


def box_iou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable IoU between matching rows of pred (n,4) and constant gt (n,4)."""
    g = ops.tensor(gt.astype(pred.dtype))
    iw = ops.relu(ops.sub(ops.minimum(pred[:, 2], g[:, 2]), ops.maximum(pred[:, 0], g[:, 0])))
    ih = ops.relu(ops.sub(ops.minimum(pred[:, 3], g[:, 3]), ops.maximum(pred[:, 1], g[:, 1])))
    inter = ops.mul(iw, ih)
    area_p = ops.mul(ops.sub(pred[:, 2], pred[:, 0]), ops.sub(pred[:, 3], pred[:, 1]))
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    union = ops.sub(ops.add(area_p, area_g.astype(pred.dtype)), inter)
    return ops.div(inter, ops.add(union, IOU_EPS))


def _matched_boxes(o: ScaleOutput, a: Assignment) -> Tensor:
    _, _, h, w = o.box.shape
    cx, cy = cell_centers(h, w, o.stride)
    raw = o.box[a.b, :, a.i, a.j]  # (n, 4): left, top, right, bottom
    d = ops.mul(ops.softplus(raw), float(o.stride))
    centers = np.stack([cx[a.i, a.j], cy[a.i, a.j]] * 2, axis=1).astype(raw.dtype)
    sign = np.array([-1.0, -1.0, 1.0, 1.0], dtype=raw.dtype)
    return ops.add(ops.mul(d, sign), centers)


def detection_loss(outputs: list[ScaleOutput], targets, lambda_coord: float = 7.5) -> LossBreakdown:
    """``targets`` holds one (n,5) array of (x_min, y_min, x_max, y_max, class) per image."""
    if not lambda_coord > 0:
        raise ConfigurationError(f"lambda_coord must be positive, got {lambda_coord}")
    assignments = assign_targets(targets, outputs)
    n_pos = sum(len(a) for a in assignments)
    conf_sum = None
    ious, logits, labels = [], [], []
    for o, a in zip(outputs, assignments):
        t = np.zeros(o.obj.shape, dtype=o.obj.dtype)
        t[a.b, 0, a.i, a.j] = 1.0
        term = ops.sum(ops.bce_with_logits(o.obj, t))
        conf_sum = term if conf_sum is None else ops.add(conf_sum, term)
        if len(a):
            ious.append(box_iou_tensor(_matched_boxes(o, a), a.boxes))
            logits.append(o.cls[a.b, :, a.i, a.j])
            labels.append(a.classes)
    conf = ops.div(conf_sum, float(max(1, n_pos)))
    dtype = conf.dtype
    if n_pos:
        coord = ops.mean(ops.sub(1.0, ops.concat(ious)))
        cls = ops.cross_entropy(ops.concat(logits), np.concatenate(labels))
    else:
        coord = ops.tensor(np.zeros((), dtype=dtype))
        cls = ops.tensor(np.zeros((), dtype=dtype))
    total = ops.add(ops.add(ops.mul(coord, float(lambda_coord)), conf), cls)
    return LossBreakdown(total, coord, conf, cls, n_pos)
