"""Named ablation matrices over the fusion block configuration.

Every row trains a fresh detector on the same synthetic split and reports
test mAP. Presets:

    modules         full block, without SSCS, without DSSF, addition only
    position        fusion stage sets {2,3,5}, {2,4,5}, {3,4,5}
    n_dssf          2, 4, 8 or 16 stacked DSSF layers
    dual_attention  both cross terms, each one alone, neither
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .detector.config import TrainConfig
from .detector.data import synth_dataset
from .detector.train import evaluate, train

PRESETS = {
    "modules": (
        ("full", {}),
        ("no_sscs", {"use_sscs": False}),
        ("no_dssf", {"use_dssf": False}),
        ("addition", {"use_sscs": False, "use_dssf": False}),
    ),
    "position": (
        ("stages_2_3_5", {"stages": (2, 3, 5)}),
        ("stages_2_4_5", {"stages": (2, 4, 5)}),
        ("stages_3_4_5", {"stages": (3, 4, 5)}),
    ),
    "n_dssf": tuple((f"n_dssf_{n}", {"n_dssf": n}) for n in (2, 4, 8, 16)),
    "dual_attention": (
        ("both", {}),
        ("ir_to_rgb_only", {"attn_rgb_to_ir": False}),
        ("rgb_to_ir_only", {"attn_ir_to_rgb": False}),
        ("none", {"attn_ir_to_rgb": False, "attn_rgb_to_ir": False}),
    ),
}

TABLE_FIELDS = ("preset", "variant", "seed", "mAP50", "mAP", "final_loss", "seconds")


def split_datasets(config: TrainConfig):
    """Train and test sets for ``config``; both derive from ``config.seed``."""
    train_set = synth_dataset([config.seed, 2], config.n_train, config.image_size, config.n_classes)
    test_set = synth_dataset([config.seed, 3], config.n_test, config.image_size, config.n_classes)
    return train_set, test_set


def run_variant(config: TrainConfig, train_set, test_set, out_dir=None) -> dict:
    t0 = time.perf_counter()
    result = train(config, train_set, out_dir=out_dir)
    metrics = evaluate(result, test_set)
    return {
        "mAP50": metrics["mAP50"],
        "mAP": metrics["mAP"],
        "final_loss": result.epoch_means()[-1],
        "seconds": time.perf_counter() - t0,
        "log": result.log,
    }


def run_preset(name: str, base: TrainConfig, out_dir=None, datasets=None, progress=None) -> list[dict]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    train_set, test_set = datasets if datasets is not None else split_datasets(base)
    rows = []
    for variant, changes in PRESETS[name]:
        config = base.replace(**changes)
        sub = Path(out_dir) / name / variant if out_dir is not None else None
        row = {"preset": name, "variant": variant, "seed": base.seed,
               **run_variant(config, train_set, test_set, out_dir=sub)}
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def format_table(rows) -> str:
    """CSV with one line per variant."""
    lines = [",".join(TABLE_FIELDS)]
    for r in rows:
        lines.append(f"{r['preset']},{r['variant']},{r['seed']},{r['mAP50']:.4f},{r['mAP']:.4f},"
                     f"{r['final_loss']:.4f},{r['seconds']:.1f}")
    return "\n".join(lines) + "\n"


def median_by_variant(rows) -> dict:
    by = {}
    for r in rows:
        by.setdefault(r["variant"], []).append(r["mAP50"])
    return {k: float(np.median(v)) for k, v in by.items()}
