#!/usr/bin/env python3
"""Misc utils."""

from pathlib import Path

import pandas as pd
import typer
from rich.table import Table

from usfan.domains import save_csv
from usfan.errors import UsfanError
from usfan.pipeline import load_domains, load_run_config
from usfan.storage import container_info
from usfan.utils import console

app = typer.Typer()


@app.command()
def info(
    container: Path,
) -> None:
    """Display information regarding a checkpoint or posterior container."""
    try:
        attrs = container_info(container)
    except UsfanError as e:
        console.print(f"[bold red]Error:[/bold red] {e}")
        raise typer.Exit(code=e.exit_code)

    table = Table(title=str(container))
    table.add_column("Key")
    table.add_column("Value")
    for key, value in attrs.items():
        table.add_row(key, str(value))
    console.print(table)


@app.command()
def export_data(
    config: Path,
    output_dir: Path,
) -> None:
    """Write the source and target data of a configuration as CSV files."""
    try:
        cfg = load_run_config(config)
        source, target = load_domains(cfg)
    except UsfanError as e:
        console.print(f"[bold red]Error:[/bold red] {e}")
        raise typer.Exit(code=e.exit_code)

    output_dir.mkdir(parents=True, exist_ok=True)
    save_csv(output_dir / "source.csv", source)
    save_csv(output_dir / "target.csv", target)

    counts = pd.Series(source.indices).value_counts().sort_index()
    console.print(f"{source.n = }, {target.n = }")
    console.print(f"source class counts: {counts.to_dict()}")


if __name__ == "__main__":
    app()
