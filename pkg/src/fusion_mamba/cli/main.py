"""``fusion-mamba`` command line: train, eval, heatmap, bench, selftest, ablate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .. import ablation, bench, checks
from ..detector.data import load_dataset, synth_dataset
from ..detector.train import evaluate, heatmap, train, write_pgm
from ..errors import ConfigParseError, ConfigurationError, TrainingDiverged, UsageError
from .config import CliConfig, format_cli_config, parse_config

SUBCOMMANDS = ("train", "eval", "heatmap", "bench", "selftest", "ablate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusion-mamba", description=__doc__)
    parser.add_argument("subcommand", help=", ".join(SUBCOMMANDS))
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--preset", help=f"ablation preset: {', '.join(ablation.PRESETS)}")
    parser.add_argument("--sizes", help="comma-separated sequence lengths for bench")
    return parser


def _sizes(text):
    if not text:
        return bench.DEFAULT_SIZES
    try:
        sizes = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"--sizes must be a comma list of integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs at least one positive length")
    return sizes


def _train_set(cfg: CliConfig):
    if cfg.train_dir:
        return load_dataset(cfg.train_dir)
    return ablation.split_datasets(cfg.train)[0]


def _test_set(cfg: CliConfig):
    if cfg.test_dir:
        return load_dataset(cfg.test_dir)
    return ablation.split_datasets(cfg.train)[1]


def _checkpoint(cfg: CliConfig, out: Path) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint"


def cmd_train(cfg, out, args, echo):
    def progress(row):
        if row["step"] % 10 == 0:
            echo(f"epoch {row['epoch']} step {row['step']} loss {row['loss']:.4f}")

    result = train(cfg.train, _train_set(cfg), out_dir=out, progress=progress)
    for e, m in enumerate(result.epoch_means(), start=1):
        echo(f"epoch {e} mean loss {m:.4f}")
    echo(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(cfg, out, args, echo):
    metrics = evaluate(_checkpoint(cfg, out), _test_set(cfg))
    lines = ["metric,value", f"mAP50,{metrics['mAP50']:.6f}", f"mAP,{metrics['mAP']:.6f}"]
    for c, aps in sorted(metrics["per_class"].items()):
        lines.append(f"AP50_class{c},{aps[0.5]:.6f}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    echo(f"mAP50 {metrics['mAP50']:.4f}  mAP(50:95) {metrics['mAP']:.4f}")
    return 0


def cmd_heatmap(cfg, out, args, echo):
    samples = _test_set(cfg)
    if not 0 <= cfg.heatmap_sample < len(samples):
        raise UsageError(f"heatmap_sample {cfg.heatmap_sample} outside [0, {len(samples)})")
    img = heatmap(_checkpoint(cfg, out), samples[cfg.heatmap_sample], cfg.heatmap_stage)
    path = write_pgm(out / f"heatmap_p{cfg.heatmap_stage}_{cfg.heatmap_sample}.pgm", img)
    echo(f"wrote {path} ({img.shape[1]}x{img.shape[0]})")
    return 0


def cmd_bench(cfg, out, args, echo):
    rows = bench.run_bench(_sizes(args.sizes), seed=cfg.train.seed)
    text = bench.format_csv(rows)
    (out / "bench.csv").write_text(text)
    echo(text.rstrip())
    return 0


def cmd_selftest(cfg, out, args, echo):
    seed = cfg.train.seed
    results = [checks.check_lti_oracle(seed=seed)]
    results += checks.check_gradients(seed=seed)
    results += checks.invariant_results(seed=seed)
    results.append(checks.check_ap_oracle(seed=seed))
    results.append(checks.check_determinism(seed=seed))
    results.append(checks.check_bench(_sizes(args.sizes)))
    lines = [r.line() for r in results]
    (out / "selftest.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        echo(line)
    failed = [r.name for r in results if not r.passed]
    echo(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_ablate(cfg, out, args, echo):
    if not args.preset:
        raise UsageError(f"ablate needs --preset ({', '.join(ablation.PRESETS)})")
    if args.preset not in ablation.PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(ablation.PRESETS)}")
    datasets = (_train_set(cfg), _test_set(cfg))

    def progress(row):
        echo(f"{row['variant']}: mAP50 {row['mAP50']:.4f} mAP {row['mAP']:.4f} ({row['seconds']:.0f}s)")

    rows = ablation.run_preset(args.preset, cfg.train, out_dir=out, datasets=datasets, progress=progress)
    table = ablation.format_table(rows)
    (out / f"ablate_{args.preset}.csv").write_text(table)
    echo(table.rstrip())
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
    "ablate": cmd_ablate,
}


def main(argv=None, echo=print) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.subcommand not in COMMANDS:
            raise UsageError(f"unknown subcommand {args.subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
        cfg = parse_config(args.config) if args.config else CliConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise UsageError("--seed must be non-negative")
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        resolved = format_cli_config(cfg)
        (out / "config_resolved.txt").write_text(resolved)
        echo("# resolved config")
        echo(resolved.rstrip())
        return COMMANDS[args.subcommand](cfg, out, args, echo)
    except (UsageError, ConfigParseError, ConfigurationError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"fusion-mamba: error: {exc}", file=sys.stderr)
        return 2


def entry_point() -> None:
    sys.exit(main())
