#!/usr/bin/env python3
"""Uncertainty-guided source-free domain adaptation."""

__all__ = [
    "UsfanError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FrozenPartError",
    "NumericalError",
    "DenseNet",
    "NetPart",
    "Sgd",
    "SgdSchedule",
    "LaplaceConfig",
    "Variant",
    "FullPosterior",
    "KroneckerPosterior",
    "AdaptConfig",
    "Weighting",
    "train_source",
    "adapt_target",
    "LabeledSet",
    "UnlabeledSet",
    "BlobSpec",
    "OpenSetSpec",
    "MetricsReport",
    "PredictionMode",
    "evaluate",
    "RunConfig",
    "load_config",
    "make_rng",
    "setup_logging",
]

from .adaptation import AdaptConfig, Weighting, adapt_target, train_source
from .domains import BlobSpec, LabeledSet, OpenSetSpec, UnlabeledSet
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FrozenPartError,
    NumericalError,
    UsfanError,
)
from .evaluation import MetricsReport, PredictionMode, evaluate
from .laplace import FullPosterior, KroneckerPosterior, LaplaceConfig, Variant
from .netcore import DenseNet, NetPart, Sgd, SgdSchedule
from .pipeline import RunConfig
from .utils import load_config, make_rng, setup_logging
