import json
import shlex

import click
import pandas as pd
import pytest

from mvgrid_edit.cli import CommandError, main
from mvgrid_edit.definitions import EXIT_DATA, EXIT_USAGE
from mvgrid_edit.processing.velocity import TinyFlowNet

TILE = 8


def run(command: str):
    return main(shlex.split(command), standalone_mode=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run(f"render --scenes 2 --seed 5 --tile {TILE} --out {root}/data")
    run(f"train --data {root}/data --epochs 0 --out {root}/model.bin")
    return root


@pytest.fixture(scope="module")
def scene_dir(workspace):
    return next((workspace / "data" / "scenes").iterdir())


def test_render(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(manifest["records"]) == 2
    assert manifest["tile_size"] == TILE


def test_render_is_reproducible(workspace, tmp_path):
    run(f"render --scenes 2 --seed 5 --tile {TILE} --out {tmp_path}/again")
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (workspace / "data" / "manifest.json").read_bytes()


def test_render_needs_a_scene(tmp_path):
    with pytest.raises(click.BadParameter):
        run(f"render --scenes 0 --out {tmp_path}/none")


def test_untrained_checkpoint(workspace):
    assert (workspace / "model.bin").read_bytes() == TinyFlowNet(tile_size=TILE, seed=0).to_bytes()
    assert (workspace / "model.loss.csv").exists()


def test_train_writes_the_loss_curve(workspace, tmp_path):
    run(f"train --data {workspace}/data --epochs 1 --batch-size 2 --out {tmp_path}/m.bin")
    curve = pd.read_csv(tmp_path / "m.loss.csv")
    assert curve["epoch"].tolist() == [1]
    assert TinyFlowNet.load(tmp_path / "m.bin").tile_size == TILE


def test_identity_edit_returns_the_source_grid(workspace, scene_dir, tmp_path):
    run(
        f"edit --model {workspace}/model.bin --src-grid {scene_dir}/src_grid.png --src-view {scene_dir}/src_cond.png "
        f"--tar-view {scene_dir}/src_cond.png --cfg-tar 1 --cfg-src 1 --out {tmp_path}/out"
    )
    assert (tmp_path / "out_edit.png").read_bytes() == (scene_dir / "src_grid.png").read_bytes()


def test_edit_outputs(workspace, scene_dir, tmp_path):
    command = (
        f"edit --model {workspace}/model.bin --src-grid {scene_dir}/src_grid.png --src-view {scene_dir}/src_cond.png "
        f"--tar-view {scene_dir}/tar_cond.png --preset appearance --steps 40 --seed 3 "
        f"--snapshots {tmp_path}/snaps --comparison {tmp_path}/strip.png --out {tmp_path}/out.png"
    )
    run(command)
    trace = json.loads((tmp_path / "out_edit.json").read_text())
    assert trace["config"]["preset_name"] == "appearance"
    assert trace["config"]["n_max"] == 27
    assert trace["config"]["seed_grid"] == trace["config"]["seed_cond"] == 3
    assert len(trace["steps"]) == 27
    assert len(list((tmp_path / "snaps").glob("step_*.png"))) == 27
    assert (tmp_path / "strip.png").exists()
    assert not (tmp_path / "out.png").exists()
    first = (tmp_path / "out_edit.png").read_bytes()
    run(command)
    assert (tmp_path / "out_edit.png").read_bytes() == first


def test_edit_rejects_steps_below_the_retained_steps(workspace, scene_dir, tmp_path):
    with pytest.raises(CommandError) as err:
        run(
            f"edit --model {workspace}/model.bin --src-grid {scene_dir}/src_grid.png "
            f"--src-view {scene_dir}/src_cond.png --tar-view {scene_dir}/tar_cond.png --steps 10 --out {tmp_path}/o.png"
        )
    assert err.value.exit_code == EXIT_USAGE


def test_edit_rejects_a_corrupt_checkpoint(scene_dir, tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"not a model")
    with pytest.raises(CommandError) as err:
        run(
            f"edit --model {tmp_path}/bad.bin --src-grid {scene_dir}/src_grid.png --src-view {scene_dir}/src_cond.png "
            f"--tar-view {scene_dir}/tar_cond.png --out {tmp_path}/o.png"
        )
    assert err.value.exit_code == EXIT_DATA


def test_eval(workspace, tmp_path):
    run(
        f"eval --model {workspace}/model.bin --data {workspace}/data --methods propagate,sdedit "
        f"--steps 10 --nmax 4 --out {tmp_path}/report.json --html {tmp_path}/report.html"
    )
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["methods"] == ["propagate", "sdedit"]
    assert len(report["rows"]) == 2 * 2
    assert len(pd.read_csv(tmp_path / "report.csv")) == 2 * 2
    assert (tmp_path / "report.html").exists()


def test_eval_on_missing_data(workspace, tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(CommandError) as err:
        run(f"eval --model {workspace}/model.bin --data {tmp_path}/empty --out {tmp_path}/r.json")
    assert err.value.exit_code == EXIT_DATA


def test_run_config_file(workspace, scene_dir, tmp_path):
    config = {
        "preset_name": "mild-texture",
        "edit": {"seed_grid": 2, "seed_cond": 4},
        "data": {"model": str(workspace / "model.bin")},
    }
    (tmp_path / "run.json").write_text(json.dumps(config))
    run(
        f"--config {tmp_path}/run.json edit --src-grid {scene_dir}/src_grid.png --src-view {scene_dir}/src_cond.png "
        f"--tar-view {scene_dir}/tar_cond.png --out {tmp_path}/chair"
    )
    trace = json.loads((tmp_path / "chair_edit.json").read_text())
    assert trace["config"]["preset_name"] == "mild-texture"
    assert trace["config"]["n_max"] == 20
    assert (trace["config"]["seed_grid"], trace["config"]["seed_cond"]) == (2, 4)


def test_run_config_file_rejects_unknown_keys(tmp_path):
    (tmp_path / "run.json").write_text(json.dumps({"edit": {"guidance": 2.0}}))
    with pytest.raises(CommandError) as err:
        run(f"--config {tmp_path}/run.json render --scenes 1 --out {tmp_path}/data")
    assert err.value.exit_code == EXIT_USAGE


def test_pipeline_is_reproducible(workspace, tmp_path):
    for name in ("a", "b"):
        run(f"train --data {workspace}/data --epochs 1 --batch-size 2 --seed 4 --out {tmp_path}/{name}/m.bin")
        run(
            f"eval --model {tmp_path}/{name}/m.bin --data {workspace}/data --steps 10 --nmax 4 "
            f"--out {tmp_path}/{name}/report.json"
        )
    for rel in ("m.bin", "m.loss.csv", "report.json", "report.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["methods"] == ["propagate", "sdedit", "flowedit_coupling", "naive"]
    assert len(report["rows"]) == 2 * 4
