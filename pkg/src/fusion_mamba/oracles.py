"""Slow reference implementations used to cross-check the fast paths."""

from __future__ import annotations

import numpy as np

from .ssm_core.lti import lti_conv_kernel, lti_scan, lti_scan_via_kernel


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _prefix_tp_count(ranked, gts, iou_threshold) -> int:
    """Match the top-k ranked detections from scratch; returns the TP count."""
    used = [[False] * len(g) for g in gts]
    tp = 0
    for img, box in ranked:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts[img]):
            if used[img][j]:
                continue
            v = _iou(box, g)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_threshold:
            used[img][best] = True
            tp += 1
    return tp


def brute_force_ap(detections, ground_truth, cls: int, iou_threshold: float) -> float | None:
    """AP by re-matching every ranked prefix and scanning all operating points.

    Recall level r gets the maximum precision over every prefix whose recall
    reaches r (0 if none does), averaged over r = 0, 0.01, ..., 1.
    """
    gts = []
    for gt in ground_truth:
        rows = np.asarray(gt, dtype=float).reshape(-1, 5)
        gts.append([tuple(r[:4]) for r in rows if int(r[4]) == cls])
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return None
    dets = []
    for img, (boxes, scores, classes) in enumerate(detections):
        for box, score, c in zip(np.asarray(boxes).reshape(-1, 4), scores, classes):
            if int(c) == cls:
                dets.append((float(score), len(dets), img, tuple(box)))
    dets.sort(key=lambda d: (-d[0], d[1]))
    points = []
    for k in range(1, len(dets) + 1):
        tp = _prefix_tp_count([(d[2], d[3]) for d in dets[:k]], gts, iou_threshold)
        points.append((tp / n_gt, tp / k))
    total = 0.0
    for i in range(101):
        r = i / 100
        total += max([p for rec, p in points if rec >= r - 1e-12], default=0.0)
    return total / 101


def random_ap_instance(rng, n_images: int = 3, max_boxes: int = 10, n_classes: int = 2, size: float = 64.0):
    """Random (detections, ground_truth) with at most ``max_boxes`` ground-truth boxes in total."""
    def boxes(n):
        xy = rng.uniform(0, size * 0.8, (n, 2))
        wh = rng.uniform(size * 0.05, size * 0.3, (n, 2))
        return np.concatenate([xy, np.minimum(xy + wh, size)], axis=1)

    counts = rng.multinomial(int(rng.integers(1, max_boxes + 1)), np.ones(n_images) / n_images)
    ground_truth, detections = [], []
    for n in counts:
        gt = np.concatenate([boxes(n), rng.integers(0, n_classes, (n, 1))], axis=1)
        ground_truth.append(gt)
        n_near = int(rng.integers(0, n + 1))
        near = gt[rng.permutation(n)[:n_near], :4] + rng.normal(0, size * 0.03, (n_near, 4))
        near[:, 2:] = np.maximum(near[:, 2:], near[:, :2] + 1.0)
        n_rand = int(rng.integers(0, 4))
        det_boxes = np.concatenate([near, boxes(n_rand)])
        scores = np.round(rng.uniform(0, 1, len(det_boxes)), 2)  # coarse values create ties
        classes = rng.integers(0, n_classes, len(det_boxes))
        detections.append((det_boxes, scores, classes))
    return detections, ground_truth


def lti_draw(rng, max_n: int = 16, max_d: int = 8, max_l: int = 64):
    """Random stable diagonal discretized LTI system and input."""
    N = int(rng.integers(1, max_n + 1))
    D = int(rng.integers(1, max_d + 1))
    L = int(rng.integers(1, max_l + 1))
    A_bar = np.exp(-rng.uniform(0.01, 2.0, (D, N)))
    B_bar = rng.normal(0, 1, (D, N))
    C = rng.normal(0, 1, (D, N))
    x = rng.normal(0, 1, (L, D))
    return x, A_bar, B_bar, C


def lti_agreement(x, A_bar, B_bar, C) -> float:
    """Max relative difference between the recurrent and convolutional LTI paths."""
    a = lti_scan(x, A_bar, B_bar, C)
    b = lti_scan_via_kernel(x, lti_conv_kernel(A_bar, B_bar, C, x.shape[0]))
    scale = max(np.abs(a).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)
