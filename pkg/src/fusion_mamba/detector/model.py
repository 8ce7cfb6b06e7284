"""Dual-stream toy detector.

Two plain backbones (RGB with 3 input channels, IR with 1) of five stride-2
3x3 conv + map norm + SiLU stages. At every stage from 2 on, the pair of stage features
is fused into P_i: by a fusion block at the configured stages (whose enhanced
outputs feed the next backbone stage) and by plain addition elsewhere.
P_3..P_5 go through a small top-down neck and an anchor-free per-cell head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, DimensionError
from ..fusion import FmbConfig, FmbParams, fmb
from ..tensor_core import ops
from ..tensor_core.module import Module
from ..tensor_core.tensor import Parameter, Tensor, get_default_dtype, no_grad

BACKBONE_CHANNELS = (4, 8, 16, 32, 64)
FUSED_STAGES = (2, 3, 4, 5)
HEAD_STAGES = (3, 4, 5)
OBJ_PRIOR = 0.01


def stride_of(stage: int) -> int:
    return 2 ** stage


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, scale=None):
        dtype = get_default_dtype()
        std = scale if scale is not None else np.sqrt(2.0 / (c_in * kernel * kernel))
        self.w = Parameter(rng.normal(0.0, std, (c_out, c_in, kernel, kernel)), dtype=dtype)
        self.b = Parameter(np.zeros(c_out), dtype=dtype)


class NormConv(Conv):
    """Conv followed by a whole-map norm (one group over C,H,W) with per-channel gain and shift."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng):
        super().__init__(c_in, c_out, kernel, rng)
        dtype = get_default_dtype()
        self.norm_g = Parameter(np.ones(c_out), dtype=dtype)
        self.norm_b = Parameter(np.zeros(c_out), dtype=dtype)


class Backbone(Module):
    def __init__(self, in_channels: int, channels, rng):
        chans = (in_channels,) + tuple(channels)
        self.stages = [NormConv(chans[i], chans[i + 1], 3, rng) for i in range(len(channels))]


class Neck(Module):
    def __init__(self, channels, width: int, rng):
        dtype = get_default_dtype()
        self.lateral_w = {}
        self.lateral_b = {}
        self.lateral_g = {}
        self.lateral_s = {}
        self.smooth = {}
        for s in HEAD_STAGES:
            c = channels[s - 1]
            self.lateral_w[str(s)] = Parameter(rng.normal(0, 1 / np.sqrt(c), (width, c)), dtype=dtype)
            self.lateral_b[str(s)] = Parameter(np.zeros(width), dtype=dtype)
            self.lateral_g[str(s)] = Parameter(np.ones(width), dtype=dtype)
            self.lateral_s[str(s)] = Parameter(np.zeros(width), dtype=dtype)
            self.smooth[str(s)] = Conv(width, width, 3, rng)


class Head(Module):
    """Per-scale 1x1 projection to 4 box distances, 1 objectness logit and class logits."""

    def __init__(self, width: int, n_classes: int, rng):
        dtype = get_default_dtype()
        self.w = {}
        self.b = {}
        for s in HEAD_STAGES:
            self.w[str(s)] = Parameter(rng.normal(0, 0.01, (5 + n_classes, width)), dtype=dtype)
            bias = np.zeros(5 + n_classes)
            bias[4] = np.log(OBJ_PRIOR / (1 - OBJ_PRIOR))
            self.b[str(s)] = Parameter(bias, dtype=dtype)


class DetectorParams(Module):
    def __init__(self, n_classes: int, fmb_config: FmbConfig, seed: int = 0,
                 channels=BACKBONE_CHANNELS, neck_width: int = 32):
        if len(channels) != 5 or any(c % 4 for c in channels[1:]):
            raise ConfigurationError(f"need 5 stage widths, fused ones divisible by 4: {channels}")
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.channels = tuple(channels)
        self.backbone_r = Backbone(3, channels, rng)
        self.backbone_ir = Backbone(1, channels, rng)
        self.fmb = {}
        if fmb_config.fusion_active:
            for s in fmb_config.stages:
                self.fmb[str(s)] = FmbParams(channels[s - 1], fmb_config, rng=rng)
        self.neck = Neck(channels, neck_width, rng)
        self.head = Head(neck_width, n_classes, rng)


@dataclass
class ScaleOutput:
    """Raw head tensors for one scale: box (B,4,h,w), obj (B,1,h,w), cls (B,K,h,w)."""

    stage: int
    box: Tensor
    obj: Tensor
    cls: Tensor

    @property
    def stride(self) -> int:
        return stride_of(self.stage)


@dataclass
class BoxPrediction:
    box: np.ndarray  # x_min, y_min, x_max, y_max
    scores: np.ndarray  # per-class probabilities
    confidence: float


def _images(sample_or_pair):
    if isinstance(sample_or_pair, tuple):
        rgb, ir = sample_or_pair
    else:
        rgb, ir = sample_or_pair.rgb, sample_or_pair.ir
    rgb, ir = ops.tensor(rgb), ops.tensor(ir)
    if rgb.ndim != 4 or ir.ndim != 4 or rgb.shape[1] != 3 or ir.shape[1] != 1:
        raise DimensionError(f"expected (B,3,S,S) and (B,1,S,S) images, got {rgb.shape} and {ir.shape}")
    if rgb.shape[2:] != ir.shape[2:] or rgb.shape[0] != ir.shape[0]:
        raise DimensionError(f"RGB {rgb.shape} and IR {ir.shape} do not pair up")
    S = rgb.shape[2]
    if rgb.shape[3] != S or S % 32:
        raise ConfigurationError(f"image size must be square and divisible by 32, got {rgb.shape[2:]}")
    return rgb, ir


def map_norm(x, gain, shift) -> Tensor:
    """Zero mean, unit variance over each sample's whole (C, H, W) map, then a per-channel affine."""
    B, C, H, W = x.shape
    flat = ops.layer_norm(ops.reshape(x, (B, C * H * W)))
    chan = (1, C, 1, 1)
    return ops.add(ops.mul(ops.reshape(flat, x.shape), ops.reshape(gain, chan)), ops.reshape(shift, chan))


def _stage(x, conv: NormConv) -> Tensor:
    return ops.silu(map_norm(ops.conv2d(x, conv.w, conv.b, stride=2), conv.norm_g, conv.norm_b))


def backbone_forward(sample, params: DetectorParams) -> dict:
    """Unfused feature pairs ``{i: (F_R_i, F_IR_i)}`` for stages 2..5."""
    rgb, ir = _images(sample)
    out = {}
    for i in range(1, 6):
        rgb = _stage(rgb, params.backbone_r.stages[i - 1])
        ir = _stage(ir, params.backbone_ir.stages[i - 1])
        if i >= 2:
            out[i] = (rgb, ir)
    return out


def fused_features(sample, params: DetectorParams, config: FmbConfig) -> dict:
    """Fused maps ``{i: P_i}`` for stages 2..5.

    Enhanced features from a fusion stage replace the plain ones as input to
    the next backbone stage.
    """
    rgb, ir = _images(sample)
    fused = {}
    for i in range(1, 6):
        rgb = _stage(rgb, params.backbone_r.stages[i - 1])
        ir = _stage(ir, params.backbone_ir.stages[i - 1])
        if i < 2:
            continue
        if str(i) in params.fmb and i in config.stages:
            rgb, ir, fused[i] = fmb(rgb, ir, config, params.fmb[str(i)])
        else:
            fused[i] = ops.add(rgb, ir)
    return fused


def _neck(fused: dict, neck: Neck) -> dict:
    lat = {}
    for s in HEAD_STAGES:
        k = str(s)
        lat[s] = map_norm(ops.linear(fused[s], neck.lateral_w[k], neck.lateral_b[k]), neck.lateral_g[k], neck.lateral_s[k])
    merged = {5: lat[5]}
    merged[4] = ops.add(lat[4], ops.upsample_nearest(merged[5]))
    merged[3] = ops.add(lat[3], ops.upsample_nearest(merged[4]))
    return {s: ops.silu(ops.conv2d(merged[s], neck.smooth[str(s)].w, neck.smooth[str(s)].b)) for s in HEAD_STAGES}


def forward_raw(sample, params: DetectorParams, config: FmbConfig) -> list[ScaleOutput]:
    feats = _neck(fused_features(sample, params, config), params.neck)
    outs = []
    for s in HEAD_STAGES:
        y = ops.linear(feats[s], params.head.w[str(s)], params.head.b[str(s)])
        outs.append(ScaleOutput(s, y[:, 0:4], y[:, 4:5], y[:, 5:]))
    return outs


def cell_centers(h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """(h, w) arrays of cell-center x and y in pixels."""
    cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
    return cx, cy


def _softplus(v):
    return np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def decode(outputs: list[ScaleOutput], image_size: int | None = None):
    """Per-cell boxes (B,M,4), confidences (B,M) and class probabilities (B,M,K).

    Cells are ordered by scale, then row-major within the scale.
    """
    boxes, confs, probs = [], [], []
    for o in outputs:
        B, _, h, w = o.box.shape
        cx, cy = cell_centers(h, w, o.stride)
        d = _softplus(o.box.data.astype(np.float64)) * o.stride
        box = np.stack([cx - d[:, 0], cy - d[:, 1], cx + d[:, 2], cy + d[:, 3]], axis=-1)
        if image_size is not None:
            box = np.clip(box, 0, image_size)
        boxes.append(box.reshape(B, h * w, 4))
        confs.append(_sigmoid(o.obj.data[:, 0].astype(np.float64)).reshape(B, h * w))
        logits = o.cls.data.astype(np.float64).transpose(0, 2, 3, 1).reshape(B, h * w, -1)
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        probs.append(e / e.sum(axis=-1, keepdims=True))
    return np.concatenate(boxes, 1), np.concatenate(confs, 1), np.concatenate(probs, 1)


def detect_forward(sample, params: DetectorParams, config: FmbConfig) -> list[BoxPrediction]:
    """One BoxPrediction per head cell for a single-image sample."""
    rgb, _ = _images(sample)
    if rgb.shape[0] != 1:
        raise DimensionError("detect_forward takes a single sample; use forward_raw for batches")
    with no_grad():
        outs = forward_raw(sample, params, config)
    boxes, confs, probs = decode(outs, rgb.shape[2])
    return [BoxPrediction(boxes[0, m], probs[0, m], float(confs[0, m])) for m in range(boxes.shape[1])]


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        ix = np.clip(np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0]), 0, None)
        iy = np.clip(np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1]), 0, None)
        inter = ix * iy
        iou = inter / np.maximum(areas[i] + areas[rest] - inter, 1e-12)
        order = rest[iou <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def postprocess(boxes, confs, probs, conf_floor: float = 0.05, iou_threshold: float = 0.5,
                max_detections: int = 100):
    """Class-wise NMS for one image; returns (boxes (n,4), scores (n,), classes (n,))."""
    classes = probs.argmax(axis=-1)
    scores = confs * probs.max(axis=-1)
    keep_boxes, keep_scores, keep_classes = [], [], []
    for c in np.unique(classes):
        sel = np.flatnonzero((classes == c) & (scores >= conf_floor))
        if sel.size == 0:
            continue
        kept = sel[nms(boxes[sel], scores[sel], iou_threshold)]
        keep_boxes.append(boxes[kept])
        keep_scores.append(scores[kept])
        keep_classes.append(np.full(kept.size, c))
    if not keep_boxes:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    b, s, c = np.concatenate(keep_boxes), np.concatenate(keep_scores), np.concatenate(keep_classes)
    order = np.argsort(-s, kind="stable")[:max_detections]
    return b[order], s[order], c[order]


def predict(samples, params: DetectorParams, config: FmbConfig, batch_size: int = 8, **nms_kwargs):
    """Post-NMS detections for every sample as (boxes, scores, classes) tuples."""
    results = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        rgb = np.concatenate([s.rgb for s in chunk])
        ir = np.concatenate([s.ir for s in chunk])
        with no_grad():
            outs = forward_raw((rgb, ir), params, config)
        boxes, confs, probs = decode(outs, rgb.shape[2])
        for b in range(len(chunk)):
            results.append(postprocess(boxes[b], confs[b], probs[b], **nms_kwargs))
    return results
