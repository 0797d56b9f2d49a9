"""Command-line interface for the SADAG lab."""

import functools
import logging
import time
from pathlib import Path
from typing import Optional

import click

from .calibration import measure_sharpness_curve
from .errors import SadagError
from .harness.config import (
    ExperimentConfig,
    coerce_value,
    parse_config,
    parse_overrides,
    parse_value,
)
from .harness.formats import read_dataset, save_checkpoint
from .harness.metrics import append_rows
from .harness.runner import ExperimentRunner, run_sweep

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)


def _setup_logging(verbose: bool, log_file: Optional[str]) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)
    if log_file:
        handler = logging.FileHandler(log_file)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)


def _load_config(
    config: Optional[str], seed: Optional[int], sets: tuple[str, ...], **fixed
) -> ExperimentConfig:
    cfg = parse_config(config) if config else ExperimentConfig()
    overrides = parse_overrides(sets)
    if seed is not None:
        overrides["seed"] = seed
    overrides.update(fixed)
    cfg = cfg.with_overrides(overrides) if overrides else cfg
    root = logging.getLogger()
    if root.level != logging.DEBUG:
        root.setLevel(cfg.log_level.upper())
    return cfg


def experiment_options(func):
    """Options shared by every experiment command."""

    @click.option(
        "--config", "-c", type=click.Path(dir_okay=False), help="Config file (key = value)"
    )
    @click.option("--out", "-o", type=click.Path(file_okay=False), help="Output directory")
    @click.option("--seed", type=int, default=None, help="Override the config seed")
    @click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override a config key")
    @click.option("--force", is_flag=True, help="Use artifacts built under a different config")
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        return func(*args, **kwargs)

    return wrapper


def reports_errors(func):
    """Turn lab errors into a one-line message and a nonzero exit status."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except SadagError as exc:
            message = str(exc)
            if not message.startswith("["):
                message = f"[{type(exc).__name__}] {message}"
            raise click.ClickException(message) from exc

    return wrapper


def _runner(config, out, seed, sets, force, **fixed) -> ExperimentRunner:
    cfg = _load_config(config, seed, sets, **fixed)
    return ExperimentRunner(cfg, out, force)


def _echo_rows(rows) -> None:
    for row in rows:
        click.echo(
            f"{row.run_id}: mode={row.mode} top1={row.top1:.4f} recon={row.recon:.6g} "
            f"sharpness={row.sharpness:.6g} (rho={row.rho:g})"
        )


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.option("--log-file", type=click.Path(dir_okay=False), help="Also log to this file")
def cli(verbose, log_file):
    """SADAG lab - sharpness-aware data generation for zero-shot quantization."""
    _setup_logging(verbose, log_file)


@cli.command("make-data")
@experiment_options
@reports_errors
def make_data(config, out, seed, sets, force):
    """Write the toy train/val datasets."""
    runner = _runner(config, out, seed, sets, force)
    train, val = runner.ensure_data()
    click.echo(f"{len(train)} train / {len(val)} val images in {runner.data_dir}")


@cli.command("train-teacher")
@experiment_options
@click.option("--train", "train_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--val", "val_path", type=click.Path(exists=True, dir_okay=False))
@reports_errors
def train_teacher_cmd(config, out, seed, sets, force, train_path, val_path):
    """Train (or reuse) the full-precision teacher."""
    runner = _runner(config, out, seed, sets, force)
    if train_path and val_path:
        train, val = runner.load_dataset(train_path), runner.load_dataset(val_path)
    else:
        train, val = runner.ensure_data()
    t = runner.ensure_teacher(train, val)
    report = runner.evaluate_on(t, val)
    click.echo(f"Teacher {runner.teacher_path}: val top-1 {report.top1:.4f}")


@cli.command()
@experiment_options
@click.option("--teacher", "teacher_path", type=click.Path(exists=True, dir_okay=False))
@reports_errors
def generate(config, out, seed, sets, force, teacher_path):
    """Synthesize a calibration set from the teacher."""
    runner = _runner(config, out, seed, sets, force)
    t = runner.load_teacher(teacher_path) if teacher_path else runner.ensure_teacher()
    ds = runner.ensure_synthetic(t)
    click.echo(f"{len(ds)} synthetic images in {runner.synth_path} (mode {ds.provenance.mode})")
    for warning in ds.provenance.warnings:
        click.echo(f"warning: {warning}")


@cli.command("calibrate")
@experiment_options
@click.option("--teacher", "teacher_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--output", "output_path", type=click.Path(dir_okay=False))
@reports_errors
def calibrate_cmd(config, out, seed, sets, force, teacher_path, data_path, output_path):
    """Calibrate a quantized copy on synthetic (default) or given data."""
    runner = _runner(config, out, seed, sets, force)
    t = runner.load_teacher(teacher_path) if teacher_path else runner.ensure_teacher()
    if data_path is None:
        q = runner.ensure_quantnet(t, runner.ensure_synthetic(t))
        target = runner.quant_path
    else:
        _, _, meta = read_dataset(data_path)
        if meta.get("kind") == "synthetic":
            images = runner.load_synthetic(data_path).images
        else:
            images = runner.load_dataset(data_path).images
        q = runner.calibrate_on(t, images)
        target = Path(output_path) if output_path else runner.quant_path
        save_checkpoint(q, target, {"seed": runner.cfg.seed, "source": str(data_path)})
    click.echo(f"Quantized net {target}: weights {q.bits_w}, activations {q.bits_a}")


@cli.command()
@experiment_options
@click.option("--teacher", "teacher_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--quant", "quant_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False))
@reports_errors
def evaluate(config, out, seed, sets, force, teacher_path, quant_path, data_path):
    """Report top-1, reconstruction loss and sharpness; append a metrics row."""
    start = time.perf_counter()
    runner = _runner(config, out, seed, sets, force)
    val = runner.load_dataset(data_path) if data_path else runner.ensure_data()[1]
    t = runner.load_teacher(teacher_path) if teacher_path else runner.ensure_teacher()
    if quant_path:
        q = runner.load_quantnet(quant_path, t)
    else:
        q = runner.ensure_quantnet(t, runner.ensure_synthetic(t))
    report = runner.evaluate_on(q, val)
    row = runner.row(report, time.perf_counter() - start)
    append_rows(runner.metrics_path, [row])
    _echo_rows([row])


@cli.command()
@experiment_options
@click.option("--teacher", "teacher_path", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--pool", "pool_path", type=click.Path(exists=True, dir_okay=False), help="Labeled pool"
)
@reports_errors
def select(config, out, seed, sets, force, teacher_path, pool_path):
    """Gradient-matched vs random real subsets of each configured size."""
    cfg = _load_config(config, seed, sets, mode="select")
    runner = ExperimentRunner(cfg, out, force, teacher_file=teacher_path, pool_file=pool_path)
    _echo_rows(runner.run())


@cli.command()
@experiment_options
@click.option("--teacher", "teacher_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--quant", "quant_path", type=click.Path(exists=True, dir_okay=False))
@reports_errors
def sharpness(config, out, seed, sets, force, teacher_path, quant_path):
    """Sharpness of the calibrated net at each configured radius."""
    if not quant_path:
        _echo_rows(_runner(config, out, seed, sets, force, mode="sharpness").run())
        return
    runner = _runner(config, out, seed, sets, force)
    t = runner.load_teacher(teacher_path) if teacher_path else runner.ensure_teacher()
    q = runner.load_quantnet(quant_path, t)
    _, val = runner.ensure_data()
    with runner.stage_scope("sharpness"):
        probes = measure_sharpness_curve(
            q, t, val.images[: runner.cfg.eval_samples], runner.cfg.sharpness_radii
        )
    for probe in probes:
        click.echo(f"rho={probe.rho:g}: L_R {probe.base_loss:.6g} -> {probe.perturbed_loss:.6g}")


@cli.command()
@experiment_options
@click.option(
    "--grid",
    "grid_items",
    multiple=True,
    required=True,
    metavar="KEY=[V1, V2, ...]",
    help="Values to sweep for one config key",
)
@click.option("--workers", "-w", type=int, default=None, help="Worker processes (default: auto)")
@reports_errors
def sweep(config, out, seed, sets, force, grid_items, workers):
    """Run a grid of configurations in parallel and summarize them."""
    base = _load_config(config, seed, sets)
    grid = {}
    for item in grid_items:
        key, _, text = item.partition("=")
        values = parse_value(key.strip(), text.strip())
        values = values if isinstance(values, list) else [values]
        grid[key.strip()] = [coerce_value(key.strip(), v) for v in values]
    summary = run_sweep(base, grid, out, workers, force)
    click.echo(summary.to_string(index=False))


@cli.command()
@experiment_options
@click.option(
    "--mode", type=click.Choice(["sadag", "bn-only", "select", "sharpness"]), default=None
)
@reports_errors
def run(config, out, seed, sets, force, mode):
    """Run the whole pipeline for the configured mode."""
    fixed = {"mode": mode} if mode else {}
    rows = _runner(config, out, seed, sets, force, **fixed).run()
    _echo_rows(rows)


if __name__ == "__main__":
    cli()
