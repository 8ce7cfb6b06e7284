"""Synthetic paired RGB / thermal detection data.

Every object is drawn with high contrast in exactly one modality and only a
faint leak (``LEAK`` of its contrast) in the other, so a detector that sees
one modality misses roughly half of the objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from ..tensor_core.io import read_tns, write_tns

SHAPES = ("rectangle", "disc", "triangle")
LEAK = 0.1


@dataclass
class DetectionSample:
    rgb: np.ndarray  # (1, 3, S, S)
    ir: np.ndarray  # (1, 1, S, S)
    boxes: np.ndarray  # (n, 5): x_min, y_min, x_max, y_max, class_id
    meta: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.rgb.shape[-1]

    def validate(self, n_classes: int) -> None:
        S = self.size
        for x0, y0, x1, y1, c in self.boxes:
            if not (0 <= x0 < x1 <= S and 0 <= y0 < y1 <= S):
                raise ValueError(f"box {(x0, y0, x1, y1)} outside a {S}x{S} image")
            if not 0 <= c < n_classes:
                raise ValueError(f"class {c} outside [0, {n_classes})")


def _smooth_field(rng, S, amplitude):
    coarse = rng.normal(0.0, 1.0, (5, 5))
    idx = np.linspace(0, 4, S)
    i0 = np.minimum(idx.astype(int), 3)
    t = idx - i0
    rows = coarse[i0] * (1 - t)[:, None] + coarse[i0 + 1] * t[:, None]
    grid = rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]
    return amplitude * grid / (np.abs(grid).max() + 1e-9)


def _shape_mask(kind, S, x0, y0, x1, y1):
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    inside = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    if kind == 0:
        return inside
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    if kind == 1:
        rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    # Upward triangle spanning the box.
    frac = (yy - y0) / (y1 - y0)
    half = frac * (x1 - x0) / 2
    return inside & (np.abs(xx - cx) <= half)


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def render_sample(rng, image_size: int, n_classes: int, max_objects: int = 3, noise: float = 0.03):
    S = image_size
    rgb = 0.5 + np.stack([_smooth_field(rng, S, 0.15) for _ in range(3)])
    ir = 0.4 + _smooth_field(rng, S, 0.1)[None]
    boxes, meta = [], []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        for _attempt in range(20):
            side_w = rng.uniform(S / 12, S / 2.5)
            side_h = np.clip(side_w * rng.uniform(0.7, 1.4), S / 12, S / 2.5)
            x0 = rng.uniform(0, S - side_w)
            y0 = rng.uniform(0, S - side_h)
            box = (float(np.floor(x0)), float(np.floor(y0)),
                   float(np.ceil(x0 + side_w)), float(np.ceil(y0 + side_h)))
            if all(_iou(box, b[:4]) < 0.05 for b in boxes):
                break
        else:
            continue
        cls = int(rng.integers(0, n_classes))
        mask = _shape_mask(cls, S, *box)
        contrast = rng.uniform(0.35, 0.6)
        visible = bool(rng.integers(0, 2))
        if visible:
            color = rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.6, 1.0, size=3)
            rgb[:, mask] += contrast * color[:, None]
            ir[:, mask] += LEAK * contrast * float(np.mean(color))
        else:
            ir[:, mask] += contrast
            rgb[:, mask] += LEAK * contrast
        boxes.append((*box, cls))
        meta.append({"modality": "visible" if visible else "thermal", "contrast": contrast})
    rgb = rgb + rng.normal(0, noise, rgb.shape)
    ir = ir + rng.normal(0, noise, ir.shape)
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    return DetectionSample(
        rgb=np.clip(rgb, 0, 1).astype(np.float32)[None],
        ir=np.clip(ir, 0, 1).astype(np.float32)[None],
        boxes=arr,
        meta=meta,
    )


def synth_dataset(seed, n_samples: int, image_size: int = 64, n_classes: int = 2,
                  max_objects: int = 3) -> list[DetectionSample]:
    if image_size % 32:
        raise ConfigurationError(f"image_size must be divisible by 32, got {image_size}")
    if not 1 <= n_classes <= len(SHAPES):
        raise ConfigurationError(f"n_classes must be in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    return [render_sample(rng, image_size, n_classes, max_objects) for _ in range(n_samples)]


def collate(samples) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    rgb = np.concatenate([s.rgb for s in samples])
    ir = np.concatenate([s.ir for s in samples])
    return rgb, ir, [s.boxes for s in samples]


def save_dataset(samples, directory) -> Path:
    """Write ``rgb_<id>.tns``, ``ir_<id>.tns`` and ``boxes_<id>.txt`` per sample."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_tns(directory / f"rgb_{i:05d}.tns", s.rgb)
        write_tns(directory / f"ir_{i:05d}.tns", s.ir)
        lines = [f"{int(c)} {x0:g} {y0:g} {x1:g} {y1:g}" for x0, y0, x1, y1, c in s.boxes]
        (directory / f"boxes_{i:05d}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    return directory


def load_dataset(directory) -> list[DetectionSample]:
    directory = Path(directory)
    samples = []
    for rgb_path in sorted(directory.glob("rgb_*.tns")):
        sid = rgb_path.stem[len("rgb_"):]
        rows = []
        for line in (directory / f"boxes_{sid}.txt").read_text().splitlines():
            if line.strip():
                c, x0, y0, x1, y1 = line.split()
                rows.append((float(x0), float(y0), float(x1), float(y1), int(c)))
        samples.append(DetectionSample(
            rgb=read_tns(rgb_path),
            ir=read_tns(directory / f"ir_{sid}.tns"),
            boxes=np.asarray(rows, dtype=np.float64).reshape(-1, 5),
        ))
    return samples
