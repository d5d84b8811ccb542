"""
Pixel-space evaluation of edited grids against ground-truth edited grids.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm.auto import tqdm

from mvgrid_edit.definitions import (
    LOGGER_NAME,
    MASK_EPSILON,
    METHODS,
    PSNR_CAP,
    PSNR_MSE_FLOOR,
    PSNR_PEAK,
    REFERENCE_METHODS,
    REPORT_SCHEMA_VERSION,
)
from mvgrid_edit.errors import ConfigError, ShapeError, UndefinedMetricError
from mvgrid_edit.processing.editor import EditConfig, EditRequest, run_method
from mvgrid_edit.processing.mvgrid import MvGrid
from mvgrid_edit.processing.synth import SceneRecord
from mvgrid_edit.processing.velocity import VelocityModel

logger = logging.getLogger(LOGGER_NAME)

GridLike = Union[MvGrid, np.ndarray]

MASK_TOLERANCE = 1e-9

METRIC_COLUMNS = ["mse", "psnr", "preservation_error", "edit_direction_cosine"]
HIGHER_IS_BETTER = {"mse": False, "psnr": True, "preservation_error": False, "edit_direction_cosine": True}
ROW_COLUMNS = ["scene_id", "edit_kind", "method", *METRIC_COLUMNS, "clipped_fraction"]
WIN_RATE_COLUMNS = ["method", "opponent", "metric", "win_rate", "n_scenes"]
METRIC_NOTES = {
    "edit_direction_cosine": "pixel-space analogue of a directional similarity: cosine between pred - src and "
    "gt_tar - src over all grid values",
    "preservation_error": "mse restricted to pixels outside the ground-truth edit footprint",
}


def _pixels(grid: GridLike) -> np.ndarray:
    return np.asarray(grid.pixels if isinstance(grid, MvGrid) else grid, dtype=np.float64)


def _pair(a: GridLike, b: GridLike) -> tuple[np.ndarray, np.ndarray]:
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare grids of shape {a.shape} and {b.shape}")
    return a, b


def region_mask(src: GridLike, tar: GridLike, epsilon: float = MASK_EPSILON) -> np.ndarray:
    """
    Pixels (H, W) where any channel of the ground-truth edit moved by more than ``epsilon``.

    The default ``epsilon`` is one 8-bit step, so a change of exactly one step is not part of the footprint.
    """
    src, tar = _pair(src, tar)
    return np.any(np.abs(tar - src) > epsilon + MASK_TOLERANCE, axis=-1)


def mse(a: GridLike, b: GridLike) -> float:
    """
    >>> round(mse(np.zeros((2, 2)), np.full((2, 2), 0.2)), 12)
    0.04
    """
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: GridLike, b: GridLike, peak: float = PSNR_PEAK) -> float:
    """
    ``10 log10(peak^2 / mse)``, capped for (near) identical inputs.

    >>> round(psnr(np.zeros(4), np.full(4, 0.2)), 9)
    20.0
    """
    error = mse(a, b)
    if error < PSNR_MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / error))


def preservation_error(pred: GridLike, src: GridLike, mask: np.ndarray) -> float:
    pred, src = _pair(pred, src)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:-1]:
        raise ShapeError(f"mask of shape {mask.shape} does not cover a grid of shape {pred.shape}")
    keep = ~mask
    if not keep.any():
        raise UndefinedMetricError("preservation error is undefined: the edit footprint covers the whole grid")
    return float(np.mean((pred[keep] - src[keep]) ** 2))


def edit_direction_cosine(pred: GridLike, src: GridLike, gt_tar: GridLike) -> float:
    """
    Cosine between the predicted change ``pred - src`` and the true change ``gt_tar - src``; 0 for no change.

    >>> round(edit_direction_cosine(np.array([2.0, 0.0]), np.zeros(2), np.array([1.0, 1.0])), 6)
    0.707107
    """
    pred, src = _pair(pred, src)
    _, gt_tar = _pair(src, gt_tar)
    true_change = (gt_tar - src).ravel()
    true_norm = np.linalg.norm(true_change)
    if true_norm == 0:
        raise UndefinedMetricError("edit direction is undefined: the ground-truth edit changes nothing")
    change = (pred - src).ravel()
    norm = np.linalg.norm(change)
    if norm == 0:
        return 0.0
    return float(np.clip(change @ true_change / (norm * true_norm), -1.0, 1.0))


def _undefined_as_nan(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedMetricError as err:
        logger.debug(str(err))
        return math.nan


def score(pred: GridLike, src: GridLike, gt_tar: GridLike) -> dict[str, float]:
    """All four metrics of one prediction; undefined ones are NaN."""
    mask = region_mask(src, gt_tar)
    return {
        "mse": mse(pred, gt_tar),
        "psnr": psnr(pred, gt_tar),
        "preservation_error": _undefined_as_nan(preservation_error, pred, src, mask),
        "edit_direction_cosine": _undefined_as_nan(edit_direction_cosine, pred, src, gt_tar),
    }


def _clean(value):
    if isinstance(value, (float, np.floating)):
        return None if math.isnan(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def _records(df: pd.DataFrame) -> list[dict]:
    return [{key: _clean(value) for key, value in row.items()} for row in df.to_dict("records")]


@dataclass
class BenchmarkReport:
    rows: pd.DataFrame
    aggregates: pd.DataFrame
    win_rates: pd.DataFrame
    methods: list[str]
    config: dict

    def win_rate(self, method: str, opponent: str, metric: str) -> float:
        match = self.win_rates[
            (self.win_rates["method"] == method)
            & (self.win_rates["opponent"] == opponent)
            & (self.win_rates["metric"] == metric)
        ]
        if match.empty:
            raise KeyError(f"no win rate for {method} vs {opponent} on {metric}")
        return float(match["win_rate"].iloc[0])

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "methods": list(self.methods),
            "config": dict(self.config),
            "metric_notes": METRIC_NOTES,
            "rows": _records(self.rows),
            "aggregates": _records(self.aggregates),
            "win_rates": _records(self.win_rates),
        }

    def to_json(self, path: Optional[Path | str] = None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(path, index=False)
        return path


def aggregate(rows: pd.DataFrame, methods: Sequence[str]) -> pd.DataFrame:
    """Per-method means over scenes, skipping undefined values; rows in ``methods`` order."""
    means = rows.groupby("method", sort=False)[METRIC_COLUMNS].mean()
    means = means.reindex(list(methods))
    means["n_scenes"] = rows.groupby("method", sort=False)["scene_id"].nunique().reindex(list(methods))
    return means.reset_index()


def win_rates(rows: pd.DataFrame, methods: Sequence[str]) -> pd.DataFrame:
    """
    Fraction of scenes on which ``method`` strictly beats ``opponent``, per metric.

    Scenes where either value is undefined are left out; ties are not wins.
    """
    out = []
    for metric in METRIC_COLUMNS:
        table = rows.pivot(index="scene_id", columns="method", values=metric)
        for method, opponent in itertools.permutations(methods, 2):
            pair = table[[method, opponent]].dropna()
            if HIGHER_IS_BETTER[metric]:
                wins = pair[method] > pair[opponent]
            else:
                wins = pair[method] < pair[opponent]
            rate = float(wins.mean()) if len(pair) else math.nan
            out.append((method, opponent, metric, rate, len(pair)))
    return pd.DataFrame(out, columns=WIN_RATE_COLUMNS)


def parse_methods(methods: str | Iterable[str]) -> list[str]:
    """
    Resolve a method list; ``"all"`` means every editing method.

    >>> parse_methods("propagate,sdedit")
    ['propagate', 'sdedit']
    """
    if isinstance(methods, str):
        methods = list(METHODS) if methods == "all" else [m.strip() for m in methods.split(",") if m.strip()]
    methods = list(dict.fromkeys(methods))
    unknown = [m for m in methods if m not in METHODS + REFERENCE_METHODS]
    if unknown or not methods:
        raise ConfigError(f"unknown methods {unknown}, expected a subset of {list(METHODS + REFERENCE_METHODS)}")
    return methods


def _predict(method: str, model: VelocityModel, record: SceneRecord, cfg: EditConfig) -> tuple[MvGrid, float]:
    if method == "oracle":
        return record.tar_grid, 0.0
    if method == "identity":
        return record.src_grid, 0.0
    req = EditRequest(x_src=record.src_grid, i_src=record.src_cond, i_tar=record.tar_cond)
    grid, trace = run_method(method, model, req, cfg)
    return grid, trace.clipped_fraction


def evaluate_benchmark(
    model: VelocityModel,
    records: Sequence[SceneRecord],
    methods: str | Iterable[str],
    cfg: EditConfig,
) -> BenchmarkReport:
    """
    Run every method on every record with the same edit config and score it against the record's ground truth.

    Rows are sorted by scene id, then by the order of ``methods``.
    """
    methods = parse_methods(methods)
    rows = []
    for record in tqdm(sorted(records, key=lambda r: r.id), desc="eval", unit="scene", disable=None):
        for method in methods:
            pred, clipped = _predict(method, model, record, cfg)
            metrics = score(pred, record.src_grid, record.tar_grid)
            rows.append(
                {
                    "scene_id": record.id,
                    "edit_kind": record.edit.get("kind"),
                    "method": method,
                    **metrics,
                    "clipped_fraction": clipped,
                }
            )
    rows = pd.DataFrame(rows, columns=ROW_COLUMNS)
    aggregates = aggregate(rows, methods)
    for _, agg in aggregates.iterrows():
        logger.info(
            f"{agg['method']}: mse={agg['mse']:.6g} psnr={agg['psnr']:.4g} "
            f"preservation={agg['preservation_error']:.6g} direction={agg['edit_direction_cosine']:.4g}"
        )
    return BenchmarkReport(
        rows=rows,
        aggregates=aggregates,
        win_rates=win_rates(rows, methods),
        methods=methods,
        config=cfg.to_dict(),
    )
