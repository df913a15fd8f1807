#!/usr/bin/env python3
"""Misc utilities."""

import logging
from pathlib import Path
from typing import Any, Dict

import numpy as np
from rich.console import Console
from rich.logging import RichHandler

from .errors import ConfigError

console = Console(stderr=True)

# Seed stream tags, combined with the run seed through a SeedSequence
STREAM_INIT = 0
STREAM_SOURCE_SHUFFLE = 1
STREAM_TARGET_SHUFFLE = 2
STREAM_POSTERIOR = 3
STREAM_DATA = 4
STREAM_SPLIT = 5
STREAM_EVAL = 6


def load_config(filename: Path) -> Dict[str, Any]:
    """Load configuration variables.

    Args:
        filename (Path): The configuration file to load

    Returns:
        Dict[str, Any]: The configuration data
    """
    try:
        source = filename.read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read configuration file {filename}: {e}") from e

    config: Dict[str, Any] = {}
    try:
        exec(source, None, config)
    except Exception as e:
        raise ConfigError(f"Invalid configuration file {filename}: {e}") from e

    # Drop modules and helpers pulled in by the config file itself
    return {
        k: v
        for k, v in config.items()
        if not k.startswith("_") and not callable(v) and not hasattr(v, "__spec__")
    }


def setup_logging(verbose: bool = False) -> None:
    """Route the package loggers to the rich console.

    Args:
        verbose (bool): Log debug messages. Defaults to False.
    """
    logger = logging.getLogger("usfan")
    logger.handlers.clear()
    logger.addHandler(RichHandler(console=console, show_path=False))
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def make_rng(seed: int, stream: int, counter: int = 0) -> np.random.Generator:
    """Build a PCG64 generator for a given seed, stream and counter.

    Args:
        seed (int): The run seed
        stream (int): One of the STREAM_* tags
        counter (int): Sub-stream counter (e.g. the epoch). Defaults to 0.

    Returns:
        np.random.Generator: A generator backed by PCG64
    """
    if seed < 0:
        raise ConfigError(f"Seeds must be unsigned integers, got {seed}")
    return np.random.Generator(np.random.PCG64([seed, stream, counter]))
