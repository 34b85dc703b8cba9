import csv
import json

import pytest

from conftest import tiny_config
from ct_tools.datamodel import CorruptFileError, DatasetManifest, NumericError, PersistenceError, ValidationError
from main import EXIT_INTERNAL, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, RUN_FILE, classify, main


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config()), encoding="utf-8")
    return str(path)


@pytest.fixture
def simulated(config, tmp_path):
    out = tmp_path / "data"
    assert main(["simulate", "--config", config, "--out", str(out)]) == EXIT_OK
    return out / "manifest.json"


def test_classify_maps_errors_to_exit_codes():
    assert classify(ValidationError("x")) == ("validation", EXIT_VALIDATION)
    assert classify(CorruptFileError("x")) == ("corrupt-file", EXIT_IO)
    assert classify(PersistenceError("x")) == ("io", EXIT_IO)
    assert classify(FileNotFoundError("x")) == ("io", EXIT_IO)
    assert classify(NumericError("x")) == ("numeric", EXIT_NUMERIC)
    assert classify(ZeroDivisionError()) == ("numeric", EXIT_NUMERIC)
    assert classify(KeyError("x")) == ("internal", EXIT_INTERNAL)


def test_phantom_writes_manifest_and_run_record(config, tmp_path, capsys):
    out = tmp_path / "phantom"
    code = main(["phantom", "--config", config, "--out", str(out), "--seed", "7"])
    assert code == EXIT_OK
    assert json.loads(capsys.readouterr().out)["success"]
    manifest = DatasetManifest.load(out / "manifest.json")
    assert manifest.seed == 7
    assert manifest.open_entry("phantom", out).shape == (16, 16, 16)
    record = json.loads((out / RUN_FILE).read_text(encoding="utf-8"))
    assert record["command"] == "phantom"
    assert record["settings"]["run"]["seed"] == 7
    assert "--seed" in record["argv"]


def test_bad_overrides_exit_with_validation_code(config, tmp_path):
    out = str(tmp_path / "x")
    assert main(["phantom", "--config", config, "--out", out, "--set", "phantom.radius=3"]) == EXIT_VALIDATION
    assert main(["phantom", "--config", config, "--out", out, "--set", "phantom.size=abc"]) == EXIT_VALIDATION


def test_missing_inputs_exit_with_io_code(config, tmp_path):
    out = str(tmp_path / "x")
    assert main(["train", "--config", config, "--out", out, "--data", str(tmp_path / "none.json")]) == EXIT_IO
    assert main(["phantom", "--config", str(tmp_path / "none.json"), "--out", out]) == EXIT_IO


def test_simulate_lists_objects_and_geometry(simulated):
    manifest = DatasetManifest.load(simulated)
    assert manifest.extra["objects"] == ["train_0", "test"]
    assert manifest.extra["result"] == "test/r_hat"
    assert manifest.geometry == {"n_hq": 8, "factor": 2, "detector_rows": 16, "detector_cols": 16}
    assert "seed" not in manifest.degradation
    assert manifest.open_entry("test/p_lq", simulated.parent).shape == (4, 16, 16)


def test_unknown_object_is_a_validation_error(config, simulated, tmp_path):
    argv = ["gridsearch", "--config", config, "--out", str(tmp_path / "g"), "--data", str(simulated),
            "--object", "train_9"]
    assert main(argv) == EXIT_VALIDATION


def test_multistage_pipeline_end_to_end(config, simulated, tmp_path):
    common = ["--config", config]
    model, result = tmp_path / "model", tmp_path / "result"
    assert main(["train", *common, "--out", str(model), "--data", str(simulated)]) == EXIT_OK
    assert (model / "stage_r" / "model.bin").exists()

    assert main(["infer", *common, "--out", str(result), "--model", str(model), "--data", str(simulated)]) == EXIT_OK
    manifest = DatasetManifest.load(result / "manifest.json")
    assert manifest.extra["object"] == "test"
    assert (result / "previews" / "r_star.pgm").exists()

    scores = tmp_path / "scores"
    argv = ["evaluate", *common, "--out", str(scores), "--result", str(result / "manifest.json"),
            "--reference", str(simulated)]
    assert main(argv) == EXIT_OK
    summary = json.loads((scores / "summary.json").read_text(encoding="utf-8"))
    assert {"r_hat", "r_star"} <= set(summary)
    with open(scores / "metrics.csv", newline="", encoding="utf-8") as f:
        assert len(list(csv.reader(f))) == 17

    bench = tmp_path / "bench"
    assert main(["bench", *common, "--out", str(bench), "--model", str(model), "--data", str(simulated)]) == EXIT_OK
    assert (bench / "timings.csv").exists()


def test_postprocess_pipeline_end_to_end(config, simulated, tmp_path):
    common = ["--config", config]
    model, result = tmp_path / "post", tmp_path / "result"
    argv = ["train", *common, "--out", str(model), "--data", str(simulated), "--mode", "postprocess"]
    assert main(argv) == EXIT_OK
    doc = json.loads((model / "postprocess.json").read_text(encoding="utf-8"))
    assert doc["multistage_budget"] > 0
    assert main(["infer", *common, "--out", str(result), "--model", str(model), "--data", str(simulated)]) == EXIT_OK
    assert set(DatasetManifest.load(result / "manifest.json").names()) == {"r_hat", "r_star"}


def test_gridsearch_writes_scores_and_best(config, simulated, tmp_path):
    out = tmp_path / "grid"
    assert main(["gridsearch", "--config", config, "--out", str(out), "--data", str(simulated)]) == EXIT_OK
    best = json.loads((out / "best.json").read_text(encoding="utf-8"))
    assert best["level"] == 1 and best["wavelet"] == "haar"
    with open(out / "scores.csv", newline="", encoding="utf-8") as f:
        assert len(list(csv.DictReader(f))) == 1


@pytest.mark.slow
def test_compare_writes_table(config, tmp_path):
    out = tmp_path / "compare"
    assert main(["compare", "--config", config, "--out", str(out)]) == EXIT_OK
    with open(out / "compare.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert rows
    assert {row["setting"] for row in rows} == {"noise"}


def _output_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != RUN_FILE}


@pytest.mark.parametrize("command", ["phantom", "simulate"])
def test_equal_seeds_write_identical_files(config, tmp_path, command):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main([command, "--config", config, "--out", str(first), "--seed", "3"]) == EXIT_OK
    assert main([command, "--config", config, "--out", str(second), "--seed", "3"]) == EXIT_OK
    a, b = _output_bytes(first), _output_bytes(second)
    assert "manifest.json" in a
    assert a == b


def test_phantom_manifest_records_bubble_shortfall(config, tmp_path):
    out = tmp_path / "crowded"
    argv = ["phantom", "--config", config, "--out", str(out),
            "--set", "phantom.bubbles=400", "--set", "phantom.max_attempts=50"]
    assert main(argv) == EXIT_OK
    placement = DatasetManifest.load(out / "manifest.json").extra["placement"]
    assert placement["requested"] == 400
    assert placement["shortfall"] >= 350
    assert placement["placed"] + placement["shortfall"] == 400


def test_simulate_records_placement_per_generated_object(simulated):
    placement = DatasetManifest.load(simulated).extra["placement"]
    assert set(placement) == {"train_0", "test"}
    assert all(p["placed"] + p["shortfall"] == 5 for p in placement.values())


def test_unwritable_postprocess_record_is_an_io_error(config, simulated, tmp_path, capsys):
    model = tmp_path / "post"
    (model / "postprocess.json").mkdir(parents=True)
    argv = ["train", "--config", config, "--out", str(model), "--data", str(simulated), "--mode", "postprocess"]
    capsys.readouterr()
    assert main(argv) == EXIT_IO
    result = json.loads(capsys.readouterr().out)
    assert result["error"].startswith("io: cannot write")
    assert "postprocess.json" in result["error"]
