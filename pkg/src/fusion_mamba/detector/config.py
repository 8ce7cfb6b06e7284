"""Training configuration and its flat ``key=value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..errors import ConfigParseError, ConfigurationError
from ..fusion import FmbConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    lambda_coord: float = 7.5
    seed: int = 0
    image_size: int = 64
    n_classes: int = 2
    n_train: int = 200
    n_test: int = 50
    grad_clip: float = 10.0
    fmb: FmbConfig = field(default_factory=FmbConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigurationError("learning_rate, weight_decay and grad_clip must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.lambda_coord <= 0:
            raise ConfigurationError("lambda_coord must be positive")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigurationError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.n_classes < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("n_classes, n_train and n_test must be positive")

    def replace(self, **changes) -> "TrainConfig":
        """Copy with changes; FmbConfig field names are routed into ``fmb``."""
        fmb_names = {f.name for f in dataclasses.fields(FmbConfig)}
        fmb_changes = {k: changes.pop(k) for k in list(changes) if k in fmb_names}
        if fmb_changes:
            changes["fmb"] = self.fmb.replace(**fmb_changes)
        return dataclasses.replace(self, **changes)


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _parser_for(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _parse_int_tuple
    raise TypeError(type(default))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_keys() -> dict:
    """key -> (owner, default) for every flat key, in echo order."""
    keys = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name != "fmb":
            keys[f.name] = ("train", f.default)
    fmb_default = FmbConfig()
    for f in dataclasses.fields(FmbConfig):
        keys[f.name] = ("fmb", getattr(fmb_default, f.name))
    return keys


def flatten(config: TrainConfig) -> dict:
    out = {}
    for key, (owner, _) in config_keys().items():
        out[key] = getattr(config.fmb if owner == "fmb" else config, key)
    return out


def format_config(config: TrainConfig, extra: dict | None = None) -> str:
    lines = [f"{k}={format_value(v)}" for k, v in flatten(config).items()]
    lines += [f"{k}={v}" for k, v in (extra or {}).items()]
    return "\n".join(lines) + "\n"


def parse_lines(text: str, extra_keys=()) -> tuple[TrainConfig, dict]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped.

    Returns the config plus a dict of any ``extra_keys`` that were set (as
    strings). Every error names the offending line.
    """
    keys = config_keys()
    train_kw, fmb_kw, extras = {}, {}, {}
    seen = {}
    last_lineno, last_line = 0, ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        last_lineno, last_line = lineno, raw
        if "=" not in line:
            raise ConfigParseError("expected key=value", lineno, raw)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigParseError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, raw)
        seen[key] = lineno
        if key in extra_keys:
            extras[key] = value
            continue
        if key not in keys:
            raise ConfigParseError(f"unknown key {key!r}", lineno, raw)
        owner, default = keys[key]
        try:
            parsed = _parser_for(default)(value)
        except ValueError as exc:
            raise ConfigParseError(f"malformed value for {key}: {exc}", lineno, raw) from None
        (fmb_kw if owner == "fmb" else train_kw)[key] = parsed
    try:
        config = TrainConfig(fmb=FmbConfig(**fmb_kw), **train_kw)
    except ConfigurationError as exc:
        bad = [k for k in seen if k in str(exc)]
        lineno = seen[bad[0]] if bad else last_lineno
        raise ConfigParseError(f"invalid configuration: {exc}", lineno,
                               text.splitlines()[lineno - 1] if lineno else last_line) from None
    return config, extras
