"""Command-line orchestration: config, stages and report records."""

from .main import build_parser, main

__all__ = ["build_parser", "main"]
