#!/usr/bin/env python3
"""Run configuration and the stages shared by the command-line tools."""

import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from rich.progress import track

from .adaptation import (
    AdaptConfig,
    AdaptReport,
    SourceReport,
    Weighting,
    adapt_target,
    train_source,
)
from .domains import (
    PRESETS_VERSION,
    LabeledSet,
    OpenSetSpec,
    UnlabeledSet,
    gen_open_set,
    gen_toy,
    interpolated_preset,
    load_csv,
)
from .errors import ConfigError, DataError
from .evaluation import evaluate, split_holdout
from .laplace import LaplaceConfig, Posterior, Variant, fit
from .netcore import DenseNet, SgdSchedule
from .utils import STREAM_INIT, console, load_config, make_rng

__all__ = [
    "OUTPUT_ROOT_ENV",
    "PRESETS",
    "SWEEP_COLUMNS",
    "RunConfig",
    "load_run_config",
    "write_run_config",
    "load_domains",
    "source_split",
    "init_network",
    "run_toy",
    "run_sweep",
]

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "USFAN_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# Shift scale of each named preset, 0 being mild and 1 strong
PRESETS = {"mild": 0.0, "strong": 1.0}

SWEEP_COLUMNS = [
    "shift_scale",
    "seed",
    "source_acc",
    "map_target_acc",
    "shot_im_acc",
    "ent_weighting_acc",
    "usfan_acc",
]


def _is_plain_name(name: str) -> bool:
    """True for a single path component other than `.` and `..`."""
    if name in ("", ".", "..") or "\\" in name:
        return False
    return Path(name).name == name


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, as flat keys of a config file.

    Data comes either from a toy preset (optionally with an explicit shift
    scale) or from a pair of CSV files. Keys prefixed with schedule_ and
    laplace_ feed SgdSchedule and LaplaceConfig; weight_decay doubles as the
    Laplace prior precision.
    """

    experiment: str = "toy_mild"
    output_root: Optional[str] = None

    # Data
    preset: Optional[str] = "mild"
    shift_scale: Optional[float] = None
    n_per_class: int = 150
    open_set: bool = False
    n_private: int = 150
    source_csv: Optional[str] = None
    target_csv: Optional[str] = None
    n_classes: Optional[int] = None

    # Network
    hidden_dims: Tuple[int, ...] = (32, 16)

    # Training and adaptation
    alpha: float = 0.1
    gamma: float = 0.5
    batch_size: int = 64
    epochs_source: int = 50
    epochs_target: int = 30
    baseline_mode: bool = False
    map_weighting: bool = False
    seed: int = 0
    schedule_eta0: float = 1e-2
    schedule_decay_a: float = 10.0
    schedule_decay_b: float = 0.75
    schedule_momentum: float = 0.9
    weight_decay: float = 5e-4

    # Laplace
    laplace_temperature: float = 0.4
    laplace_mc_samples: int = 10
    laplace_variant: str = "kronecker"

    # Evaluation and exports
    holdout_fraction: float = 0.2
    unknown_percentile: float = 99.0
    grid_bounds: Tuple[float, float, float, float] = (-10.0, 10.0, -10.0, 10.0)
    grid_resolution: int = 100
    histogram_bins: int = 20
    sweep_shift_scales: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    sweep_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        if not _is_plain_name(self.experiment):
            raise ConfigError(f"Invalid experiment name: '{self.experiment}'")
        uses_csv = self.source_csv is not None or self.target_csv is not None
        if uses_csv:
            if self.source_csv is None or self.target_csv is None:
                raise ConfigError("source_csv and target_csv must be given together")
        elif self.preset not in PRESETS and self.shift_scale is None:
            raise ConfigError(
                f"Unknown preset '{self.preset}', expected one of {', '.join(PRESETS)}"
            )
        if any(width < 1 for width in self.hidden_dims):
            raise ConfigError(f"Hidden widths must be positive, got {self.hidden_dims}")
        if len(self.grid_bounds) != 4:
            raise ConfigError("grid_bounds must be (x_min, x_max, y_min, y_max)")
        # Validates the nested configurations eagerly
        self.adapt_config()

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "RunConfig":
        """Build a configuration; missing keys take their defaults.

        Args:
            mapping (Mapping[str, Any]): Key/value pairs, e.g. from load_config

        Returns:
            RunConfig: The configuration
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"Unknown configuration key(s): {', '.join(unknown)}")
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in mapping.items()}
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"Invalid configuration value: {e}") from e

    def adapt_config(self) -> AdaptConfig:
        """The AdaptConfig of this run."""
        try:
            variant = Variant(self.laplace_variant)
        except ValueError as e:
            raise ConfigError(f"Unknown Laplace variant '{self.laplace_variant}'") from e
        return AdaptConfig(
            alpha=self.alpha,
            gamma=self.gamma,
            batch_size=self.batch_size,
            epochs_source=self.epochs_source,
            epochs_target=self.epochs_target,
            schedule=SgdSchedule(
                eta0=self.schedule_eta0,
                decay_a=self.schedule_decay_a,
                decay_b=self.schedule_decay_b,
                momentum=self.schedule_momentum,
                weight_decay=self.weight_decay,
            ),
            laplace=LaplaceConfig(
                prior_precision=self.weight_decay,
                temperature=self.laplace_temperature,
                mc_samples=self.laplace_mc_samples,
                variant=variant,
            ),
            baseline_mode=self.baseline_mode,
            map_weighting=self.map_weighting,
            seed=self.seed,
        )

    @property
    def laplace(self) -> LaplaceConfig:
        return self.adapt_config().laplace

    @property
    def uses_csv(self) -> bool:
        return self.source_csv is not None

    def run_dir(self) -> Path:
        """Run directory `<root>/<experiment>`, root from the config or the environment."""
        root = self.output_root or os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)
        return Path(root) / self.experiment

    def to_mapping(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_run_config(filename: Path) -> RunConfig:
    """Load a run configuration file."""
    return RunConfig.from_mapping(load_config(filename))


def write_run_config(path: Path, cfg: RunConfig) -> None:
    """Write the resolved configuration as a config file loadable by load_run_config."""
    lines = [
        f'"""Resolved configuration of experiment {cfg.experiment}."""',
        "",
        f"# presets_version: {PRESETS_VERSION}",
    ]
    lines += [f"{k} = {v!r}" for k, v in cfg.to_mapping().items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_domains(
    cfg: RunConfig,
) -> Tuple[LabeledSet, Union[LabeledSet, UnlabeledSet]]:
    """Source and target data of a run.

    Toy targets keep their labels; they are only used for evaluation.

    Args:
        cfg (RunConfig): The run configuration

    Returns:
        Tuple[LabeledSet, Union[LabeledSet, UnlabeledSet]]: Source and target data
    """
    if cfg.uses_csv:
        assert cfg.source_csv is not None and cfg.target_csv is not None
        source = load_csv(Path(cfg.source_csv), cfg.n_classes)
        if not isinstance(source, LabeledSet):
            raise DataError(f"Source data {cfg.source_csv} has no label column")
        n_target_classes = source.n_classes + 1 if cfg.open_set else source.n_classes
        target = load_csv(Path(cfg.target_csv), n_target_classes)
        return source, target

    scale = cfg.shift_scale if cfg.shift_scale is not None else PRESETS[str(cfg.preset)]
    spec = interpolated_preset(scale, cfg.seed, cfg.n_per_class)
    if cfg.open_set:
        return gen_open_set(OpenSetSpec(base=spec, n_private=cfg.n_private))
    return gen_toy(spec)


def source_split(
    cfg: RunConfig, source: LabeledSet
) -> Tuple[LabeledSet, Optional[LabeledSet]]:
    """Training part of the source data and, for open-set runs, the calibration hold-out."""
    if not cfg.open_set:
        return source, None
    return split_holdout(source, cfg.holdout_fraction, cfg.seed)


def init_network(cfg: RunConfig, source: LabeledSet) -> DenseNet:
    """Seeded network sized for the source data."""
    dims = [source.inputs.shape[1], *cfg.hidden_dims, source.n_classes]
    return DenseNet.initialize(dims, make_rng(cfg.seed, STREAM_INIT))


def _adapt(
    cfg: RunConfig,
    weighting: Weighting,
    net: DenseNet,
    posterior: Posterior,
    target: LabeledSet,
) -> AdaptReport:
    adapt_cfg = replace(
        cfg.adapt_config(),
        baseline_mode=weighting == Weighting.UNIFORM,
        map_weighting=weighting == Weighting.MAP,
    )
    return adapt_target(net, posterior, target.unlabeled(), adapt_cfg, target.indices)


def run_toy(cfg: RunConfig) -> Dict[str, float]:
    """Run the full closed-set pipeline on a toy preset with every weighting mode.

    Args:
        cfg (RunConfig): The run configuration; must use a toy preset

    Returns:
        Dict[str, float]: One row of the sweep table
    """
    if cfg.uses_csv:
        raise ConfigError("Toy runs need a preset, not CSV data")
    cfg = replace(cfg, open_set=False)
    source, target = load_domains(cfg)
    assert isinstance(target, LabeledSet)

    adapt_cfg = cfg.adapt_config()
    report: SourceReport = train_source(init_network(cfg, source), source, adapt_cfg)
    posterior = fit(report.net, source, adapt_cfg.laplace)

    row: Dict[str, float] = {
        "shift_scale": (
            cfg.shift_scale if cfg.shift_scale is not None else PRESETS[str(cfg.preset)]
        ),
        "seed": cfg.seed,
        "source_acc": report.accuracy,
        "map_target_acc": evaluate(report.net, target).accuracy,
    }
    columns = {
        Weighting.UNIFORM: "shot_im_acc",
        Weighting.MAP: "ent_weighting_acc",
        Weighting.LAPLACE: "usfan_acc",
    }
    for weighting, column in columns.items():
        adapted = _adapt(cfg, weighting, report.net, posterior, target)
        row[column] = evaluate(adapted.net, target).accuracy
    return row


def run_sweep(cfg: RunConfig, progress: bool = False) -> pd.DataFrame:
    """Run run_toy over every sweep shift scale and seed.

    Returns:
        pd.DataFrame: One row per (shift_scale, seed) with SWEEP_COLUMNS
    """
    runs = [
        replace(cfg, shift_scale=float(scale), seed=int(seed))
        for scale in cfg.sweep_shift_scales
        for seed in cfg.sweep_seeds
    ]
    rows: List[Dict[str, float]] = []
    for run in track(runs, description="Sweep...", console=console, disable=not progress):
        logger.debug(f"Sweep run shift_scale={run.shift_scale} seed={run.seed}")
        rows.append(run_toy(run))

    df = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    df["seed"] = df["seed"].astype(np.int64)
    return df
