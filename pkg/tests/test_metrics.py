import json
import math

import numpy as np
import pandas as pd
import pytest

from mvgrid_edit.definitions import MASK_EPSILON, PSNR_CAP
from mvgrid_edit.errors import ConfigError, ShapeError, UndefinedMetricError
from mvgrid_edit.processing.editor import EditConfig
from mvgrid_edit.processing.metrics import (
    BenchmarkReport,
    edit_direction_cosine,
    evaluate_benchmark,
    mse,
    parse_methods,
    preservation_error,
    psnr,
    region_mask,
)
from mvgrid_edit.processing.synth import load_dataset


@pytest.fixture()
def grids(rng, tile_size):
    shape = (3 * tile_size, 2 * tile_size, 3)
    src = rng.uniform(-0.8, 0.8, shape)
    tar = src.copy()
    tar[: tile_size // 2] += 0.15
    return src, tar


@pytest.fixture()
def records(dataset_dir):
    return load_dataset(dataset_dir).records


def test_mse_and_psnr_arithmetic(grids):
    src, _ = grids
    assert mse(src, src) == 0.0
    assert psnr(src, src) == PSNR_CAP
    assert mse(src, src + 0.2) == pytest.approx(0.04)
    assert psnr(src, src + 0.2) == pytest.approx(20.0)


def test_mse_is_symmetric_and_nonnegative(grids, rng):
    src, tar = grids
    other = rng.uniform(-1, 1, src.shape)
    assert mse(src, other) == mse(other, src) >= 0.0
    with pytest.raises(ShapeError):
        mse(src, src[:-1])


def test_region_mask_marks_the_edited_rows(grids, tile_size):
    src, tar = grids
    mask = region_mask(src, tar)
    assert mask.shape == src.shape[:2]
    assert mask[: tile_size // 2].all()
    assert not mask[tile_size // 2 :].any()


def test_region_mask_ignores_single_quantization_steps(grids):
    src, _ = grids
    assert not region_mask(src, src + MASK_EPSILON).any()
    assert region_mask(src, src + 2 * MASK_EPSILON).all()


def test_preservation_error(grids):
    src, tar = grids
    mask = region_mask(src, tar)
    assert preservation_error(src, src, mask) == 0.0
    assert preservation_error(tar, src, mask) == 0.0
    half = np.zeros(src.shape[:2], dtype=bool)
    half[: src.shape[0] // 2] = True
    assert preservation_error(src + 0.1, src, half) == pytest.approx(0.01)
    with pytest.raises(UndefinedMetricError):
        preservation_error(src, src, np.ones(src.shape[:2], dtype=bool))


def test_preservation_error_is_bounded_by_mse_over_the_kept_fraction(grids, rng):
    src, tar = grids
    mask = region_mask(src, tar)
    pred = src + rng.normal(0, 0.1, src.shape)
    kept = 1 - mask.mean()
    assert preservation_error(pred, src, mask) * kept <= mse(pred, src) + 1e-15


def test_edit_direction_cosine(grids, rng):
    src, tar = grids
    assert edit_direction_cosine(tar, src, tar) == pytest.approx(1.0)
    assert edit_direction_cosine(src - (tar - src), src, tar) == pytest.approx(-1.0)
    assert edit_direction_cosine(src, src, tar) == 0.0
    pred = src + rng.normal(0, 0.1, src.shape)
    assert edit_direction_cosine(src + 3.0 * (pred - src), src, tar) == pytest.approx(
        edit_direction_cosine(pred, src, tar)
    )
    with pytest.raises(UndefinedMetricError):
        edit_direction_cosine(tar, src, src)


def test_parse_methods():
    assert parse_methods("all") == ["propagate", "sdedit", "flowedit_coupling", "naive"]
    assert parse_methods(["oracle", "identity", "oracle"]) == ["oracle", "identity"]
    with pytest.raises(ConfigError):
        parse_methods("propagate,p2p")
    with pytest.raises(ConfigError):
        parse_methods("")


def test_reference_methods_bound_the_metrics(tiny_net, records):
    report = evaluate_benchmark(tiny_net, records, ["oracle", "identity"], EditConfig())
    rows = report.rows
    assert len(rows) == 2 * len(records)
    oracle = rows[rows["method"] == "oracle"]
    identity = rows[rows["method"] == "identity"]
    assert (oracle["psnr"] == PSNR_CAP).all()
    assert np.allclose(oracle["edit_direction_cosine"], 1.0)
    assert (oracle["preservation_error"].dropna() <= MASK_EPSILON**2 + 1e-12).all()
    assert (identity["edit_direction_cosine"] == 0.0).all()
    assert (identity["preservation_error"].dropna() == 0.0).all()
    for record, (_, row) in zip(records, identity.iterrows()):
        assert row["scene_id"] == record.id
        assert row["mse"] == mse(record.src_grid, record.tar_grid)


def test_benchmark_report_layout(tiny_net, records):
    cfg = EditConfig(total_steps=10, n_max=4)
    report = evaluate_benchmark(tiny_net, records, "propagate,sdedit", cfg)
    assert list(report.rows["method"].unique()) == ["propagate", "sdedit"]
    assert list(report.rows["scene_id"]) == sorted(report.rows["scene_id"])
    assert list(report.aggregates["method"]) == ["propagate", "sdedit"]
    assert (report.aggregates["n_scenes"] == len(records)).all()
    assert len(report.win_rates) == 2 * 4
    rate = report.win_rate("propagate", "sdedit", "preservation_error")
    assert 0.0 <= rate <= 1.0
    with pytest.raises(KeyError):
        report.win_rate("propagate", "naive", "mse")


def test_report_bytes_are_deterministic(tiny_net, records, tmp_path):
    cfg = EditConfig(total_steps=10, n_max=4)
    first = evaluate_benchmark(tiny_net, records, "propagate,naive", cfg)
    second = evaluate_benchmark(tiny_net, records, "propagate,naive", cfg)
    assert first.to_json() == second.to_json()
    first.to_json(tmp_path / "report.json")
    document = json.loads((tmp_path / "report.json").read_text())
    assert document["schema_version"] == 1
    assert len(document["rows"]) == 2 * len(records)
    assert "pixel-space" in document["metric_notes"]["edit_direction_cosine"]
    assert document["config"]["n_max"] == 4
    path = first.to_csv(tmp_path / "report.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == list(first.rows.columns)


def test_undefined_metrics_are_written_as_null():
    rows = pd.DataFrame(
        [{"scene_id": "0000", "edit_kind": "recolor", "method": "oracle", "mse": 0.0, "psnr": 100.0,
          "preservation_error": math.nan, "edit_direction_cosine": 1.0, "clipped_fraction": 0.0}]
    )
    empty = rows.iloc[:0]
    report = BenchmarkReport(rows=rows, aggregates=empty, win_rates=empty, methods=["oracle"], config={})
    assert json.loads(report.to_json())["rows"][0]["preservation_error"] is None

