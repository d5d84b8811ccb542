"""
==================
Multi-view editing
==================

Command line for the whole pipeline: render a synthetic dataset, train the toy velocity network, propagate an edit
and benchmark the editing methods.
"""

from __future__ import annotations

import functools
import json
import logging
import time
from pathlib import Path
from typing import Optional

import click
import param

from mvgrid_edit.definitions import (
    DEFAULT_TILE_SIZE,
    LOGGER_NAME,
    METHODS,
    MIN_TILE_SIZE,
    PRESETS,
)
from mvgrid_edit.errors import ConfigError, DataError, MvEditError
from mvgrid_edit.processing.editor import EditConfig, EditRequest, run_method
from mvgrid_edit.processing.metrics import evaluate_benchmark
from mvgrid_edit.processing.mvgrid import read_image, role_path, side_by_side, write_image
from mvgrid_edit.processing.synth import load_dataset, make_dataset
from mvgrid_edit.processing.trainer import TrainConfig, train, training_examples
from mvgrid_edit.processing.velocity import TinyFlowNet

logger = logging.getLogger(LOGGER_NAME)

DATA_KEYS = ("dataset", "model", "scenes", "seed", "tile_size")
LOG_LEVELS = [logging.WARNING, logging.INFO, logging.DEBUG]


class CommandError(click.ClickException):
    """A package error surfaced on the command line with its own exit code."""

    def __init__(self, err: MvEditError):
        super().__init__(str(err))
        self.exit_code = err.exit_code


def reports_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MvEditError as err:
            raise CommandError(err) from err

    return wrapper


class RunConfigFile(param.Parameterized):
    """JSON run file: ``edit`` and ``train`` sections mirror their configs, ``data`` holds paths and dataset size."""

    edit = param.Dict(default={})
    train = param.Dict(default={})
    data = param.Dict(default={})
    preset_name = param.String(default=None, allow_None=True)

    @classmethod
    def load(cls, path: Path | str) -> RunConfigFile:
        path = Path(path)
        try:
            document = json.loads(path.read_text())
        except (OSError, ValueError) as err:
            raise DataError(f"could not read run config {path}: {err}") from err
        if not isinstance(document, dict):
            raise ConfigError(f"run config {path} must hold a JSON object")
        sections = {"edit": EditConfig.field_names(), "train": TrainConfig.field_names(), "data": list(DATA_KEYS)}
        unknown = sorted(set(document) - set(sections) - {"preset_name"})
        for section, allowed in sections.items():
            unknown += [f"{section}.{key}" for key in sorted(set(document.get(section, {})) - set(allowed))]
        if unknown:
            raise ConfigError(f"unknown run config keys: {unknown}")
        if document.get("preset_name") is not None and document["preset_name"] not in PRESETS:
            raise ConfigError(f"unknown preset {document['preset_name']!r}, expected one of {sorted(PRESETS)}")
        # validates bounds before any command starts
        EditConfig(**{k: v for k, v in document.get("edit", {}).items()})
        TrainConfig(**document.get("train", {}))
        return cls(**document)

    def default_map(self) -> dict:
        """Option defaults per subcommand, in click's ``default_map`` layout."""
        data = {k: v for k, v in self.data.items() if v is not None}
        edit_options = {
            "preset": self.preset_name or self.edit.get("preset_name"),
            "steps": self.edit.get("total_steps"),
            "nmax": self.edit.get("n_max"),
            "cfg_tar": self.edit.get("cfg_tar"),
            "cfg_src": self.edit.get("cfg_src"),
            "seed_grid": self.edit.get("seed_grid"),
            "seed_cond": self.edit.get("seed_cond"),
            "snapshot_every": self.edit.get("snapshot_every"),
            "model": data.get("model"),
        }
        train_options = {
            "data": data.get("dataset"),
            "out": data.get("model"),
            **{key: self.train.get(key) for key in TrainConfig.field_names()},
        }
        render_options = {
            "scenes": data.get("scenes"),
            "seed": data.get("seed"),
            "tile": data.get("tile_size"),
            "out": data.get("dataset"),
        }
        defaults = {
            "render": render_options,
            "train": train_options,
            "edit": edit_options,
            "eval": {**edit_options, "data": data.get("dataset")},
        }
        return {cmd: {k: v for k, v in options.items() if v is not None} for cmd, options in defaults.items()}


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="JSON run file; explicit flags override it",
)
@click.option("--verbose", "-v", count=True, help="-v for progress, -vv for per-step detail")
@click.pass_context
@reports_errors
def main(ctx: click.Context, config_path: Optional[Path] = None, verbose: int = 0):
    """
    Propagate single-view edits across multi-view grids.
    """
    logging.basicConfig(level=LOG_LEVELS[min(verbose, len(LOG_LEVELS) - 1)], format="%(levelname)s %(message)s")
    if config_path is not None:
        ctx.default_map = RunConfigFile.load(config_path).default_map()


@main.command()
@click.option("--scenes", type=click.IntRange(min=1), required=True, help="Number of scene pairs")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--tile", type=click.IntRange(min=MIN_TILE_SIZE), default=DEFAULT_TILE_SIZE, show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True, help="Dataset directory")
@reports_errors
def render(scenes: int, seed: int, tile: int, out: Path):
    """Render a synthetic dataset of (source, edited) scene pairs."""
    manifest = make_dataset(scenes, seed, tile_size=tile, out_dir=out)
    logger.info(f"Wrote {len(manifest['records'])} records to {out}")


@main.command("train")
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--epochs", type=click.IntRange(min=0), default=TrainConfig.epochs, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Checkpoint file")
@click.option("--batch-size", type=click.IntRange(min=1), default=TrainConfig.batch_size, show_default=True)
@click.option("--learning-rate", type=click.FloatRange(min=0), default=TrainConfig.learning_rate, show_default=True)
@click.option("--optimizer", type=click.Choice(["adam", "sgd"]), default=TrainConfig.optimizer, show_default=True)
@click.option("--checkpoint-every", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--cond-drop", type=click.FloatRange(0, 1), default=TrainConfig.cond_drop, show_default=True)
@click.option("--noise-condition/--clean-condition", default=TrainConfig.noise_condition, show_default=True)
@reports_errors
def train_command(data: Path, out: Path, **train_options):
    """Fit the toy velocity network to a rendered dataset by flow matching."""
    cfg = TrainConfig(**train_options)
    dataset = load_dataset(data)
    model = TinyFlowNet(tile_size=dataset.tile_size, seed=cfg.seed)
    logger.info(f"Training {model.parameter_count} parameters on {len(dataset)} scene pairs")
    _, curve = train(model, training_examples(dataset.records), cfg, checkpoint_path=out)
    loss_path = out.with_name(f"{out.stem}.loss.csv")
    curve.to_csv(loss_path, index=False)
    logger.info(f"Wrote loss curve {loss_path}")


def edit_options(fn):
    """Schedule, guidance and seed flags shared by ``edit`` and ``eval``."""
    options = [
        click.option("--model", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True),
        click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None, help="Named n_max/cfg_tar pair"),
        click.option("--steps", type=click.IntRange(min=1), default=None, help="Scheduler steps T"),
        click.option("--nmax", type=click.IntRange(min=1), default=None, help="Retained high-noise steps"),
        click.option("--cfg-tar", type=click.FloatRange(min=0), default=None),
        click.option("--cfg-src", type=click.FloatRange(min=0), default=None),
        click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True, help="Seed of both noises"),
        click.option("--seed-grid", type=click.IntRange(min=0), default=None, help="Overrides --seed for grid noise"),
        click.option("--seed-cond", type=click.IntRange(min=0), default=None, help="Overrides --seed for view noise"),
        click.option("--snapshot-every", type=click.IntRange(min=0), default=0),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def build_edit_config(preset, steps, nmax, cfg_tar, cfg_src, seed, seed_grid, seed_cond, snapshot_every) -> EditConfig:
    values = {
        "total_steps": steps,
        "n_max": nmax,
        "cfg_tar": cfg_tar,
        "cfg_src": cfg_src,
        "seed_grid": seed if seed_grid is None else seed_grid,
        "seed_cond": seed if seed_cond is None else seed_cond,
        "snapshot_every": snapshot_every,
    }
    if preset is not None:
        return EditConfig.from_preset(preset, **values)
    return EditConfig(**{k: v for k, v in values.items() if v is not None})


@main.command()
@edit_options
@click.option("--src-grid", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--src-view", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--tar-view", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--method", type=click.Choice(METHODS), default="propagate", show_default=True)
@click.option(
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
    help="Output stem; writes <stem>_edit.png and its trace <stem>_edit.json",
)
@click.option("--snapshots", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--comparison", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--timing", is_flag=True, default=False, help="Record wall time in the trace")
@reports_errors
def edit(
    model: Path,
    src_grid: Path,
    src_view: Path,
    tar_view: Path,
    method: str,
    out: Path,
    snapshots: Optional[Path],
    comparison: Optional[Path],
    timing: bool,
    **config_options,
):
    """Propagate the change from --src-view to --tar-view across the source grid."""
    if snapshots is not None and not config_options["snapshot_every"]:
        config_options["snapshot_every"] = 1
    cfg = build_edit_config(**config_options)
    logger.info(f"Edit config: {cfg.to_dict()}")
    req = EditRequest(
        x_src=read_image(src_grid, kind="grid"),
        i_src=read_image(src_view, kind="view"),
        i_tar=read_image(tar_view, kind="view"),
    )
    net = TinyFlowNet.load(model, tile_size=req.tile_size)

    start = time.perf_counter()
    result, trace = run_method(method, net, req, cfg)
    wall_time = time.perf_counter() - start if timing else None

    edited = write_image(result, role_path(out, "edit"))
    edited.with_suffix(".json").write_text(trace.to_json(cfg, wall_time) + "\n")
    if snapshots is not None:
        for index, grid in sorted(trace.snapshots.items()):
            write_image(grid, snapshots / f"step_{index:04d}.png")
    if comparison is not None:
        write_image(side_by_side([req.i_src, req.i_tar, req.x_src, result]), comparison)
    logger.info(f"Wrote {edited} ({method}, {len(trace)} steps)")


@main.command("eval")
@edit_options
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--methods", default="all", show_default=True, help="Comma separated methods, or 'all'")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Report JSON")
@click.option("--html", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Static HTML report")
@reports_errors
def eval_command(model: Path, data: Path, methods: str, out: Path, html: Optional[Path], **config_options):
    """Benchmark editing methods on a rendered dataset against its ground-truth edited grids."""
    cfg = build_edit_config(**config_options)
    dataset = load_dataset(data)
    net = TinyFlowNet.load(model, tile_size=dataset.tile_size)
    report = evaluate_benchmark(net, dataset.records, methods, cfg)
    report.to_json(out)
    report.to_csv(out.with_suffix(".csv"))
    if html is not None:
        from mvgrid_edit.apps.report import save_report_html

        save_report_html(report, html)
    logger.info(f"Wrote report {out}")


if __name__ == "__main__":
    main()
