"""Average precision with 101-point interpolation.

Detections of a class are ranked by score (stable order on ties) and matched
greedily: each one takes the highest-IoU ground truth of the same image and
class that is still unmatched, provided the IoU reaches the threshold.
"""

from __future__ import annotations

import numpy as np

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n,4) and (m,4) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def greedy_match(det_image, det_boxes, gt_boxes_by_image, iou_threshold):
    """True-positive flags for detections already sorted by descending score."""
    used = {img: np.zeros(len(g), dtype=bool) for img, g in gt_boxes_by_image.items()}
    tp = np.zeros(len(det_boxes), dtype=bool)
    for k, (img, box) in enumerate(zip(det_image, det_boxes)):
        gts = gt_boxes_by_image.get(img)
        if gts is None or len(gts) == 0:
            continue
        ious = box_iou(box[None], gts)[0]
        ious[used[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            used[img][best] = True
            tp[k] = True
    return tp


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from ranked TP flags."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # Envelope: best precision at any recall at least as large.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(tp), envelope[np.minimum(idx, len(tp) - 1)], 0.0)
    return float(vals.mean())


def class_ap(detections, ground_truth, cls: int, iou_threshold: float) -> float | None:
    """AP for one class; None when the class has no ground truth.

    ``detections`` is a per-image list of (boxes, scores, classes) and
    ``ground_truth`` a per-image list of (n,5) box/class arrays.
    """
    gt_by_image = {}
    n_gt = 0
    for img, gt in enumerate(ground_truth):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 5)
        sel = gt[gt[:, 4] == cls, :4]
        gt_by_image[img] = sel
        n_gt += len(sel)
    if n_gt == 0:
        return None
    det_image, det_boxes, det_scores = [], [], []
    for img, (boxes, scores, classes) in enumerate(detections):
        sel = np.asarray(classes) == cls
        det_boxes.extend(np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[sel])
        det_scores.extend(np.asarray(scores, dtype=np.float64)[sel])
        det_image.extend([img] * int(sel.sum()))
    order = np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable")
    det_image = [det_image[k] for k in order]
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)[order]
    tp = greedy_match(det_image, det_boxes, gt_by_image, iou_threshold)
    return interpolated_ap(tp, n_gt)


def mean_ap(detections, ground_truth, n_classes: int, iou_thresholds=COCO_THRESHOLDS) -> dict:
    """Per-class AP per threshold plus ``mAP50`` and ``mAP`` (mean over thresholds).

    Classes without ground truth are left out of the means.
    """
    if len(ground_truth) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    thresholds = tuple(float(t) for t in iou_thresholds)
    per_class = {}
    for c in range(n_classes):
        aps = [class_ap(detections, ground_truth, c, t) for t in thresholds]
        if aps[0] is not None:
            per_class[c] = dict(zip(thresholds, aps))
    if not per_class:
        raise ValueError("dataset contains no ground-truth boxes")
    by_threshold = {t: float(np.mean([per_class[c][t] for c in per_class])) for t in thresholds}
    result = {"per_class": per_class, "by_threshold": by_threshold,
              "mAP": float(np.mean(list(by_threshold.values())))}
    result["mAP50"] = by_threshold.get(0.5, float("nan"))
    return result
