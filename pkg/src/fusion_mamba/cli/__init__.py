"""Command-line interface."""

from .config import CliConfig, format_cli_config, parse_config, parse_text
from .main import main

__all__ = ["CliConfig", "format_cli_config", "main", "parse_config", "parse_text"]
