"""Flat ``key=value`` run configuration for the command line."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from ..detector.config import TrainConfig, format_config, parse_lines
from ..errors import ConfigParseError

# Keys beyond TrainConfig / FmbConfig: dataset and checkpoint locations plus
# heatmap selection. Empty path values mean "synthesize" / "use --out".
EXTRA_DEFAULTS = {
    "train_dir": "",
    "test_dir": "",
    "checkpoint": "",
    "heatmap_stage": 5,
    "heatmap_sample": 0,
}


@dataclass(frozen=True)
class CliConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    train_dir: str = ""
    test_dir: str = ""
    checkpoint: str = ""
    heatmap_stage: int = 5
    heatmap_sample: int = 0

    def extras(self) -> dict:
        return {k: getattr(self, k) for k in EXTRA_DEFAULTS}

    def with_seed(self, seed: int) -> "CliConfig":
        return replace(self, train=self.train.replace(seed=seed))


def parse_text(text: str) -> CliConfig:
    train, extras = parse_lines(text, extra_keys=tuple(EXTRA_DEFAULTS))
    values = {}
    lines = text.splitlines()
    for key, raw in extras.items():
        default = EXTRA_DEFAULTS[key]
        if isinstance(default, int):
            try:
                values[key] = int(raw)
            except ValueError:
                lineno = next(i for i, ln in enumerate(lines, 1) if ln.split("#", 1)[0].strip().startswith(key))
                raise ConfigParseError(f"malformed value for {key}: {raw!r}", lineno, lines[lineno - 1]) from None
        else:
            values[key] = raw
    return CliConfig(train=train, **values)


def parse_config(path) -> CliConfig:
    """Read a config file; absent keys take their defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_text(text)


def format_cli_config(config: CliConfig) -> str:
    """Resolved config in the same format :func:`parse_text` reads."""
    return format_config(config.train, config.extras())
