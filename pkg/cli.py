#!/usr/bin/env python3
"""Source training, Laplace fitting, target adaptation and evaluation tools."""

import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace
from typing import Iterator, Optional, Tuple

import click
import typer
from rich.table import Table
from typing_extensions import Annotated

from usfan import LabeledSet, RunConfig, UsfanError, setup_logging
from usfan.adaptation import Weighting, adapt_target, train_source
from usfan.errors import ConfigError, DataError, DimensionError
from usfan.evaluation import (
    MetricsReport,
    PredictionMode,
    decision_grid,
    entropy_histogram,
    entropy_threshold,
    evaluate,
)
from usfan.laplace import Posterior, fit
from usfan.netcore import DenseNet
from usfan.pipeline import (
    init_network,
    load_domains,
    load_run_config,
    run_sweep,
    source_split,
    write_run_config,
)
from usfan.storage import load_network, load_posterior, save_network, save_posterior
from usfan.utils import STREAM_EVAL, console, make_rng

app = typer.Typer()

SOURCE_CKPT = "source.ckpt"
TARGET_CKPT = "target.ckpt"
POSTERIOR = "source.lap"

ConfigOption = Annotated[
    Path, typer.Option("--config", "-c", help="The run configuration file")
]
CheckpointOption = Annotated[
    Optional[Path], typer.Option(help="Network checkpoint. Defaults to the run's own.")
]
PosteriorOption = Annotated[
    Optional[Path], typer.Option(help="Laplace posterior. Defaults to the run's own.")
]
ModeOption = Annotated[
    PredictionMode, typer.Option(help="MAP head or Laplace predictive probabilities")
]


@contextmanager
def _errors() -> Iterator[None]:
    try:
        yield
    except UsfanError as e:
        console.print(f"[bold red]Error:[/bold red] {e}")
        raise typer.Exit(code=e.exit_code)


def _prepare(config: Path) -> Tuple[RunConfig, Path]:
    cfg = load_run_config(config)
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    write_run_config(run_dir / "config.py", cfg)
    return cfg, run_dir


def _labeled_target(cfg: RunConfig) -> LabeledSet:
    _, target = load_domains(cfg)
    if not isinstance(target, LabeledSet):
        raise DataError(f"Target data {cfg.target_csv} has no label column")
    return target


def _check_fits(net: DenseNet, n_features: int, n_classes: int) -> None:
    if net.input_dim != n_features or net.n_classes != n_classes:
        raise DimensionError(
            f"Checkpoint ({net.input_dim} features, {net.n_classes} classes) does not "
            f"match the configured data ({n_features} features, {n_classes} classes)"
        )


def _posterior(
    path: Optional[Path], run_dir: Path, required: bool
) -> Optional[Posterior]:
    path = path if path is not None else run_dir / POSTERIOR
    if not path.exists():
        if required:
            raise ConfigError(f"No posterior at {path}: run fit-laplace first")
        return None
    return load_posterior(path)


def _print_metrics(title: str, metrics: MetricsReport) -> None:
    table = Table(title=title)
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    table.add_row("accuracy", f"{metrics.accuracy:0.4f}")
    table.add_row("OS", f"{metrics.os:0.4f}")
    table.add_row("OS*", f"{metrics.os_star:0.4f}")
    for k, acc in enumerate(metrics.per_class_acc):
        table.add_row(f"class {k}", f"{acc:0.4f}")
    console.print(table)


@app.command("train-source")
def train_source_cmd(ctx: typer.Context, config: ConfigOption) -> None:
    """Train the source model and save its checkpoint."""
    with _errors():
        cfg, run_dir = _prepare(config)
        source, _ = load_domains(cfg)
        train, _ = source_split(cfg, source)

        report = train_source(
            init_network(cfg, train), train, cfg.adapt_config(), progress=True
        )
        save_network(run_dir / SOURCE_CKPT, report.net)

        metrics = evaluate(report.net, train)
        metrics.to_frame().to_csv(run_dir / "source_metrics.csv", index=False)
        report.history.to_csv(run_dir / "source_history.csv", index=False)
        _print_metrics("Source", metrics)


@app.command("fit-laplace")
def fit_laplace_cmd(
    ctx: typer.Context, config: ConfigOption, checkpoint: CheckpointOption = None
) -> None:
    """Fit the last-layer Laplace posterior of a source checkpoint."""
    with _errors():
        cfg, run_dir = _prepare(config)
        net = load_network(checkpoint or run_dir / SOURCE_CKPT)
        source, _ = load_domains(cfg)
        train, _ = source_split(cfg, source)
        _check_fits(net, train.inputs.shape[1], train.n_classes)

        posterior = fit(net, train, cfg.laplace)
        save_posterior(run_dir / POSTERIOR, posterior)
        console.print(f"Saved {posterior.variant} posterior to {run_dir / POSTERIOR}")


@app.command("adapt")
def adapt_cmd(
    ctx: typer.Context,
    config: ConfigOption,
    checkpoint: CheckpointOption = None,
    posterior: PosteriorOption = None,
    baseline: Annotated[
        bool, typer.Option(help="Uniform weights (SHOT-IM baseline)")
    ] = False,
    map_weighting: Annotated[
        bool, typer.Option(help="Weights from the tempered MAP head")
    ] = False,
) -> None:
    """Adapt the feature extractor to the target data."""
    with _errors():
        cfg = load_run_config(config)
        cfg = replace(
            cfg,
            baseline_mode=cfg.baseline_mode or baseline,
            map_weighting=cfg.map_weighting or map_weighting,
        )
        run_dir = cfg.run_dir()
        run_dir.mkdir(parents=True, exist_ok=True)
        write_run_config(run_dir / "config.py", cfg)

        adapt_cfg = cfg.adapt_config()
        net = load_network(checkpoint or run_dir / SOURCE_CKPT)
        head_posterior = None
        if adapt_cfg.weighting == Weighting.LAPLACE:
            head_posterior = _posterior(posterior, run_dir, required=True)

        _, target = load_domains(cfg)
        labels = target.indices if isinstance(target, LabeledSet) else None
        report = adapt_target(
            net,
            head_posterior,
            target.unlabeled() if isinstance(target, LabeledSet) else target,
            adapt_cfg,
            labels=labels,
            progress=True,
        )
        save_network(run_dir / TARGET_CKPT, report.net)

        with open(run_dir / "adapt_log.csv", "w", encoding="utf-8") as f:
            f.write(f"# mode={report.weighting}\n")
            report.log.to_csv(f, index=False)

        last = report.log.iloc[-1]
        console.print(
            f"mode={report.weighting} final loss={last['loss_total']:0.4f} "
            f"mean weight={last['mean_weight']:0.4f}"
        )


@app.command("eval")
def eval_cmd(
    ctx: typer.Context,
    config: ConfigOption,
    checkpoint: CheckpointOption = None,
    posterior: PosteriorOption = None,
    mode: ModeOption = PredictionMode.MAP,
) -> None:
    """Evaluate a checkpoint on the labelled target data."""
    with _errors():
        cfg, run_dir = _prepare(config)
        checkpoint = checkpoint or run_dir / TARGET_CKPT
        net = load_network(checkpoint)
        target = _labeled_target(cfg)
        n_known = target.n_classes - 1 if cfg.open_set else target.n_classes
        _check_fits(net, target.inputs.shape[1], n_known)

        needs_posterior = mode == PredictionMode.PREDICTIVE
        head_posterior = _posterior(posterior, run_dir, required=needs_posterior)
        rng = make_rng(cfg.seed, STREAM_EVAL)

        threshold = None
        if cfg.open_set:
            source, _ = load_domains(cfg)
            _, holdout = source_split(cfg, source)
            assert holdout is not None
            threshold = entropy_threshold(
                net,
                holdout,
                mode,
                head_posterior,
                cfg.laplace,
                rng,
                cfg.unknown_percentile,
            )
            console.print(f"Unknown-class entropy threshold = {threshold:0.4f}")

        metrics = evaluate(
            net, target, mode, head_posterior, cfg.laplace, rng, unknown_threshold=threshold
        )
        output = run_dir / f"eval_{checkpoint.stem}_{mode}.csv"
        metrics.to_frame().to_csv(output, index=False)
        _print_metrics(f"{checkpoint.name} ({mode})", metrics)


@app.command("grid")
def grid_cmd(
    ctx: typer.Context,
    config: ConfigOption,
    checkpoint: CheckpointOption = None,
    posterior: PosteriorOption = None,
    mode: ModeOption = PredictionMode.MAP,
    resolution: Annotated[
        Optional[int], typer.Option(min=1, help="Cells along each axis")
    ] = None,
) -> None:
    """Export the decision surface of a 2-D model."""
    with _errors():
        cfg, run_dir = _prepare(config)
        checkpoint = checkpoint or run_dir / TARGET_CKPT
        net = load_network(checkpoint)
        head_posterior = _posterior(
            posterior, run_dir, required=mode == PredictionMode.PREDICTIVE
        )

        df = decision_grid(
            net,
            cfg.grid_bounds,
            resolution or cfg.grid_resolution,
            mode,
            head_posterior,
            cfg.laplace,
            make_rng(cfg.seed, STREAM_EVAL),
        )
        output = run_dir / f"grid_{checkpoint.stem}_{mode}.csv"
        df.to_csv(output, index=False)
        console.print(f"Saved {len(df)} grid cells to {output}")


@app.command("entropy")
def entropy_cmd(
    ctx: typer.Context,
    config: ConfigOption,
    checkpoint: CheckpointOption = None,
    posterior: PosteriorOption = None,
    mode: ModeOption = PredictionMode.MAP,
    bins: Annotated[Optional[int], typer.Option(help="Number of bins")] = None,
) -> None:
    """Export target entropy histograms of correct and incorrect predictions."""
    with _errors():
        cfg, run_dir = _prepare(config)
        checkpoint = checkpoint or run_dir / TARGET_CKPT
        net = load_network(checkpoint)
        target = _labeled_target(cfg)
        head_posterior = _posterior(
            posterior, run_dir, required=mode == PredictionMode.PREDICTIVE
        )

        df = entropy_histogram(
            net,
            target,
            bins if bins is not None else cfg.histogram_bins,
            mode,
            head_posterior,
            cfg.laplace,
            make_rng(cfg.seed, STREAM_EVAL),
        )
        output = run_dir / f"entropy_{checkpoint.stem}_{mode}.csv"
        df.to_csv(output, index=False)
        console.print(f"Saved entropy histogram to {output}")


@app.command("sweep")
def sweep_cmd(ctx: typer.Context, config: ConfigOption) -> None:
    """Compare the weighting modes across shift scales and seeds."""
    with _errors():
        cfg, run_dir = _prepare(config)
        df = run_sweep(cfg, progress=True)
        df.to_csv(run_dir / "sweep.csv", index=False)

        summary = df.drop(columns="seed").groupby("shift_scale").mean()
        table = Table(title="Mean target accuracy")
        table.add_column("shift_scale", justify="right")
        for column in summary.columns:
            table.add_column(column, justify="right")
        for scale, row in summary.iterrows():
            table.add_row(f"{scale:0.2f}", *[f"{v:0.4f}" for v in row])
        console.print(table)


@app.callback()
def callback(
    ctx: typer.Context,
    verbose: Annotated[bool, typer.Option(help="Log debug messages")] = False,
):
    """Uncertainty-guided source-free domain adaptation."""
    setup_logging(verbose)
    ctx.obj = SimpleNamespace(verbose=verbose)


def main() -> None:
    """Run the application, usage errors exiting with code 1."""
    try:
        code = app(standalone_mode=False)
    except click.UsageError as e:
        e.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    sys.exit(code if isinstance(code, int) else 0)


if __name__ == "__main__":
    main()
