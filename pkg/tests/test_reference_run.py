import json
import shlex
from pathlib import Path

import pandas as pd
import pytest

from mvgrid_edit.cli import main
from mvgrid_edit.definitions import DEFAULT_TOTAL_STEPS, PRESETS

REFERENCE_RUN = Path(__file__).parent.resolve() / "data/reference_run.json"


def run(command: str):
    return main(shlex.split(command), standalone_mode=False)


def test_record_matches_the_preset_table(reference_run):
    assert reference_run["presets"] == PRESETS
    assert reference_run["total_steps"] == DEFAULT_TOTAL_STEPS
    for preset in reference_run["presets"].values():
        assert 1 <= preset["n_max"] <= reference_run["total_steps"]
    assert reference_run["reference"]["eval"]["preset"] in PRESETS


@pytest.mark.slow
def test_reference_run_matches_the_record(tmp_path, reference_run, update_reference):
    ref = reference_run["reference"]
    for name in ("train", "bench"):
        data = ref[f"render_{name}"]
        run(f"render --scenes {data['scenes']} --seed {data['seed']} --tile {data['tile']} --out {tmp_path}/{name}")
    epochs, seed = ref["train"]["epochs"], ref["train"]["seed"]
    run(f"train --data {tmp_path}/train --epochs {epochs} --seed {seed} --out {tmp_path}/model.bin")
    evaluation = ref["eval"]
    run(
        f"eval --model {tmp_path}/model.bin --data {tmp_path}/bench --methods {evaluation['methods']} "
        f"--preset {evaluation['preset']} --seed {evaluation['seed']} --out {tmp_path}/report.json"
    )
    curve = pd.read_csv(tmp_path / "model.loss.csv")
    report = json.loads((tmp_path / "report.json").read_text())
    measured = {
        "initial_loss": float(curve["mean_loss"].iloc[0]),
        "final_loss": float(curve["mean_loss"].iloc[-1]),
        "aggregates": report["aggregates"],
        "win_rates": report["win_rates"],
    }

    assert measured["final_loss"] < ref["max_loss_ratio"] * measured["initial_loss"]
    for floor in ref["min_win_rates"]:
        (entry,) = [
            w
            for w in report["win_rates"]
            if (w["method"], w["opponent"], w["metric"]) == (floor["method"], floor["opponent"], floor["metric"])
        ]
        assert entry["win_rate"] >= floor["win_rate"]

    if update_reference:
        REFERENCE_RUN.write_text(json.dumps({**reference_run, "measured": measured}, indent=2) + "\n")
        return
    recorded = reference_run["measured"]
    if recorded is None:
        pytest.skip("no measured reference run recorded; run with --runslow --update-reference")
    assert measured["final_loss"] == pytest.approx(recorded["final_loss"], abs=ref["final_loss_tolerance"])
    assert measured["aggregates"] == recorded["aggregates"]
    assert measured["win_rates"] == recorded["win_rates"]
