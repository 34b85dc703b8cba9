#!/usr/bin/env python
"""
TomoStage - multi-stage CT artifact reduction toolkit
Command-line entry point: phantom generation, scan simulation, training,
inference, evaluation, classical grid search, timing and comparison runs.
Copyright (c) 2024 SourceBox LLC
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

# Add project root directory to path to import the ct_tools package
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from ct_tools import __version__
from ct_tools.benchmark_tool import (
    ExperimentSetup,
    bench_inference,
    compare_methods,
    simulate_scan,
    write_bench,
    write_rows,
)
from ct_tools.classical_tool import grid_search, load_grid, write_score_table
from ct_tools.datamodel import (
    ROLE_HIGH_QUALITY,
    ROLE_INTERMEDIATE,
    ROLE_LOW_QUALITY,
    CorruptFileError,
    DatasetManifest,
    NumericError,
    PersistenceError,
    ValidationError,
    Volume,
)
from ct_tools.geometry_tool import reconstruct
from ct_tools.metrics_tool import evaluate_volume
from ct_tools.multistage_tool import (
    STAGES,
    TrainingObject,
    infer_multistage,
    infer_postprocess,
    load_multistage,
    matched_reference,
    postprocess_spec,
    save_artifacts,
    train_multistage,
    train_postprocess,
)
from ct_tools.phantom_tool import build_foam
from ct_tools.preview_tool import write_previews
from ct_tools.regressor.model import load_model, save_model
from settings import ExperimentSettings

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

MANIFEST_FILE = "manifest.json"
RUN_FILE = "run.json"
POSTPROCESS_FILE = "postprocess.json"
TEST_OBJECT = "test"


def classify(error: BaseException) -> tuple:
    """(category, exit code) of an exception."""
    if isinstance(error, ValidationError):
        return "validation", EXIT_VALIDATION
    if isinstance(error, CorruptFileError):
        return "corrupt-file", EXIT_IO
    if isinstance(error, (PersistenceError, OSError)):
        return "io", EXIT_IO
    if isinstance(error, (NumericError, FloatingPointError, ArithmeticError)):
        return "numeric", EXIT_NUMERIC
    return "internal", EXIT_INTERNAL


def write_json(path: Path, doc: Any) -> Path:
    """Pretty JSON with sorted keys; any OSError becomes a PersistenceError."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write {path}: {e}") from e
    return path


def write_run_record(out_dir: Path, command: str, argv: Sequence[str], settings: ExperimentSettings) -> Path:
    """run.json: argv and resolved configuration, enough to re-derive the command line."""
    record = {
        "tool": "tomostage",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "settings": settings.to_dict(),
    }
    return write_json(out_dir / RUN_FILE, record)


def _object_names(manifest: DatasetManifest) -> List[str]:
    names = manifest.extra.get("objects")
    if not names:
        raise ValidationError("data manifest lists no objects; was it written by 'simulate'?")
    return list(names)


def _load_object(manifest: DatasetManifest, base: Path, name: str) -> TrainingObject:
    if f"{name}/p_lq" not in manifest.entries:
        raise ValidationError(f"data manifest has no object {name!r}; available: {_object_names(manifest)}")
    return TrainingObject(
        p_lq=manifest.open_entry(f"{name}/p_lq", base),
        p_hq=manifest.open_entry(f"{name}/p_hq", base),
        r_hq=manifest.open_entry(f"{name}/r_hq", base),
    )


def _training_objects(data: Path) -> List[TrainingObject]:
    manifest = DatasetManifest.load(data)
    names = [n for n in _object_names(manifest) if n != TEST_OBJECT]
    if not names:
        raise ValidationError("data manifest holds no training objects")
    return [_load_object(manifest, data.parent, n) for n in names]


# Commands

def cmd_phantom(args: argparse.Namespace, settings: ExperimentSettings, out_dir: Path) -> Dict[str, Any]:
    spec = settings.foam_spec()
    volume, placement = build_foam(spec)
    manifest = DatasetManifest(seed=spec.seed, extra={"phantom": spec.to_dict(), "placement": placement,
                                                      "result": "phantom"})
    manifest.add_array("phantom", volume, out_dir / "phantom.raw", ROLE_HIGH_QUALITY, base=out_dir)
    manifest.save(out_dir / MANIFEST_FILE)
    return {"success": True, "message": f"Phantom {volume.shape} written to {out_dir}",
            "manifest": str(out_dir / MANIFEST_FILE)}


def cmd_simulate(args: argparse.Namespace, settings: ExperimentSettings, out_dir: Path) -> Dict[str, Any]:
    """n_train training objects plus one test object, each with HQ/LQ projections and reconstructions."""
    n_train = settings.get("dataset", "n_train")
    if not isinstance(n_train, int) or n_train < 0:
        raise ValidationError(f"dataset.n_train must be a non-negative integer, got {n_train!r}")
    n_hq, factor = settings.n_hq, settings.factor
    given: Optional[Volume] = None
    if args.phantom:
        phantom_manifest = DatasetManifest.load(args.phantom)
        given = phantom_manifest.open_entry("phantom", Path(args.phantom).parent)

    names = [f"train_{k}" for k in range(n_train)] + [TEST_OBJECT]
    manifest = DatasetManifest(seed=settings.seed)
    degrade = None
    placement: Dict[str, Any] = {}
    for k, name in enumerate(names):
        volume = given if (given is not None and name == TEST_OBJECT) else None
        foam = settings.foam_spec(seed_offset=k)
        degrade = settings.degrade_spec(seed_offset=k)
        scan = simulate_scan(foam, degrade, n_hq, factor, volume=volume)
        if scan.placement is not None:
            placement[name] = scan.placement
        base = out_dir / name
        manifest.add_array(f"{name}/p_hq", scan.p_hq, base / "p_hq.raw", ROLE_HIGH_QUALITY, base=out_dir)
        manifest.add_array(f"{name}/r_hq", scan.r_hq, base / "r_hq.raw", ROLE_HIGH_QUALITY, base=out_dir)
        manifest.add_array(f"{name}/p_lq", scan.p_lq, base / "p_lq.raw", ROLE_LOW_QUALITY, base=out_dir)
        manifest.add_array(f"{name}/r_hat", reconstruct(scan.p_lq), base / "r_hat.raw", ROLE_LOW_QUALITY,
                           base=out_dir)
        logger.info(f"Simulated object {name}")
    detector = manifest.entries[f"{TEST_OBJECT}/p_hq"].shape[1:]
    manifest.geometry = {"n_hq": n_hq, "factor": factor, "detector_rows": detector[0], "detector_cols": detector[1]}
    manifest.degradation = {k: v for k, v in degrade.to_dict().items() if k != "seed"}
    manifest.extra = {"objects": names, "placement": placement, "result": f"{TEST_OBJECT}/r_hat",
                      "reference": f"{TEST_OBJECT}/r_hq"}
    manifest.save(out_dir / MANIFEST_FILE)
    return {"success": True, "message": f"Simulated {len(names)} objects into {out_dir}",
            "manifest": str(out_dir / MANIFEST_FILE)}


def cmd_train(args: argparse.Namespace, settings: ExperimentSettings, out_dir: Path) -> Dict[str, Any]:
    data = Path(args.data)
    objects = _training_objects(data)
    specs = settings.stage_specs()
    if args.mode == "multistage":
        model = train_multistage(
            objects, settings.stage_configs(), out_dir, specs,
            simulated_reference=bool(settings.get("dataset", "simulated_reference")),
            start_stage=args.start_stage,
        )
        return {"success": True, "message": f"Multi-stage model written to {out_dir}",
                "parameters": model.parameter_count()}

    budget = sum(s.parameter_count() for s in specs.values())
    spec = postprocess_spec(budget, specs["r"].hidden_layers, settings.post_width)
    r_hat = [reconstruct(o.p_lq) for o in objects]
    model = train_postprocess(r_hat, [o.r_hq for o in objects], settings.train_config("post"), spec)
    save_model(model, out_dir / "model.bin")
    doc = {"version": 1, "parameters": model.parameter_count(), "multistage_budget": budget}
    write_json(out_dir / POSTPROCESS_FILE, doc)
    return {"success": True, "message": f"Post-processing model written to {out_dir}",
            "parameters": model.parameter_count()}


def cmd_infer(args: argparse.Namespace, settings: ExperimentSettings, out_dir: Path) -> Dict[str, Any]:
    model_dir = Path(args.model)
    data = Path(args.data)
    previews = settings.get("infer", "previews") or []

    started = time.perf_counter()
    manifest = DatasetManifest.load(data)
    p_hat = manifest.open_entry(f"{args.object}/p_lq", data.parent)

    if (model_dir / POSTPROCESS_FILE).exists():
        model = load_model(model_dir / "model.bin")
        r_hat = reconstruct(p_hat)
        r_star = infer_postprocess(model, r_hat)
        result = DatasetManifest(extra={"result": "r_star", "source": str(data), "object": args.object})
        result.add_array("r_hat", r_hat, out_dir / "r_hat.raw", ROLE_INTERMEDIATE, base=out_dir)
        result.add_array("r_star", r_star, out_dir / "r_star.raw", ROLE_INTERMEDIATE, base=out_dir)
        result.save(out_dir / MANIFEST_FILE)
        if previews:
            write_previews({"r_hat": r_hat, "r_star": r_star}, out_dir / "previews", previews)
        return {"success": True, "message": f"Post-processed reconstruction written to {out_dir}"}

    model = load_multistage(model_dir)
    artifacts = infer_multistage(model, p_hat, load_seconds=time.perf_counter() - started)
    result = save_artifacts(artifacts, out_dir)
    result.extra.update({"source": str(data), "object": args.object})
    result.save(out_dir / MANIFEST_FILE)
    if previews:
        write_previews(
            {"p_star": artifacts.p_star, "s_star": artifacts.s_star, "r_star": artifacts.r_star},
            out_dir / "previews", previews,
        )
    return {"success": True, "message": f"Multi-stage artifacts written to {out_dir}",
            "timings": artifacts.timings}


def cmd_evaluate(args: argparse.Namespace, settings: ExperimentSettings, out_dir: Path) -> Dict[str, Any]:
    """Score the result entry and every other volume of the result manifest against the reference."""
    result_path, reference_path = Path(args.result), Path(args.reference)
    result = DatasetManifest.load(result_path)
    reference_manifest = DatasetManifest.load(reference_path)
    result_entry = args.result_entry or result.extra.get("result")
    reference_entry = args.reference_entry or reference_manifest.extra.get("reference")
    if not result_entry or not reference_entry:
        raise ValidationError("cannot tell which entries to compare; pass --result-entry and --reference-entry")
    reference = reference_manifest.open_entry(reference_entry, reference_path.parent)

    report = evaluate_volume(result.open_entry(result_entry, result_path.parent), reference, result_entry)
    report.to_csv(out_dir / "metrics.csv")
    report.to_json(out_dir / "metrics.json")

    summaries = {}
    for name, entry in result.entries.items():
        if entry.kind == "volume" and tuple(entry.shape) == reference.shape:
            summaries[name] = evaluate_volume(result.open_entry(name, result_path.parent), reference, name).summary()
    write_json(out_dir / "summary.json", summaries)
    return {"success": True, "message": f"PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}",
            "summary": report.summary()}


def cmd_gridsearch(args: argparse.Namespace, settings: ExperimentSettings, out_dir: Path) -> Dict[str, Any]:
    grid = load_grid(args.grid) if args.grid else settings.classical_grid()
    data = Path(args.data)
    manifest = DatasetManifest.load(data)
    obj = _load_object(manifest, data.parent, args.object)
    workers = settings.get("classical", "workers")
    best, table = grid_search(grid, obj.p_lq, matched_reference(obj), workers=workers)
    write_score_table(table, out_dir / "scores.csv")
    write_json(out_dir / "best.json", best.to_dict())
    return {"success": True, "message": f"Best of {len(table)} settings: {best.to_dict()}", "best": best.to_dict()}


def cmd_bench(args: argparse.Namespace, settings: ExperimentSettings, out_dir: Path) -> Dict[str, Any]:
    data = Path(args.data)
    started = time.perf_counter()
    model = load_multistage(args.model)
    manifest = DatasetManifest.load(data)
    p_hat = manifest.open_entry(f"{args.object}/p_lq", data.parent)
    load_seconds = time.perf_counter() - started
    repeats = settings.get("bench", "repeats")
    report = bench_inference(model, p_hat, repeats=repeats, load_seconds=load_seconds)
    write_bench(report, out_dir)
    return {"success": True, "message": f"Total inference {report['mean']['total']:.2f}s", "timings": report["mean"]}


def cmd_compare(args: argparse.Namespace, settings: ExperimentSettings, out_dir: Path) -> Dict[str, Any]:
    specs = settings.stage_specs()
    setup = ExperimentSetup(
        foam=settings.foam_spec(),
        n_hq=settings.n_hq,
        factor=settings.factor,
        n_train=settings.get("dataset", "n_train"),
        stage_configs=settings.stage_configs(),
        stage_specs=specs,
        post_config=settings.train_config("post"),
        post_hidden_layers=specs["r"].hidden_layers,
        post_width=settings.post_width,
        classical_grid=settings.classical_grid(),
    )
    rows = compare_methods(setup, settings.compare_settings(), settings.compare_seeds(), out_dir / "work")
    write_rows(rows, out_dir / "compare.csv")
    return {"success": True, "message": f"Comparison table with {len(rows)} rows written to {out_dir}"}


COMMANDS: Dict[str, Callable[..., Dict[str, Any]]] = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "gridsearch": cmd_gridsearch,
    "bench": cmd_bench,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--out", help="Output directory (default: runs/<command>)")
    common.add_argument("--seed", type=int, help="Override run.seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one configuration field; repeatable")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    ap = argparse.ArgumentParser(prog="tomostage", description="Multi-stage CT artifact reduction toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", parents=[common], help="Generate a foam phantom")

    p = sub.add_parser("simulate", parents=[common], help="Simulate HQ and degraded LQ scans")
    p.add_argument("--phantom", help="Phantom manifest to use for the test object")

    p = sub.add_parser("train", parents=[common], help="Train a multi-stage or post-processing model")
    p.add_argument("--data", required=True, help="Data manifest written by 'simulate'")
    p.add_argument("--mode", choices=("multistage", "postprocess"), default="multistage")
    p.add_argument("--start-stage", choices=STAGES, default="p",
                   help="Retrain from this stage, loading earlier stages from --out")

    p = sub.add_parser("infer", parents=[common], help="Run a trained model on one object")
    p.add_argument("--model", required=True, help="Model directory")
    p.add_argument("--data", required=True, help="Data manifest")
    p.add_argument("--object", default=TEST_OBJECT)

    p = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM/MSE against a reference")
    p.add_argument("--result", required=True, help="Result manifest")
    p.add_argument("--reference", required=True, help="Reference manifest")
    p.add_argument("--result-entry")
    p.add_argument("--reference-entry")

    p = sub.add_parser("gridsearch", parents=[common], help="Grid search over classical parameters")
    p.add_argument("--data", required=True, help="Data manifest")
    p.add_argument("--grid", help="Grid file: JSON list of parameter objects or {\"preset\": name}")
    p.add_argument("--object", default="train_0")

    p = sub.add_parser("bench", parents=[common], help="Per-stage inference timing")
    p.add_argument("--model", required=True, help="Multi-stage model directory")
    p.add_argument("--data", required=True, help="Data manifest")
    p.add_argument("--object", default=TEST_OBJECT)

    sub.add_parser("compare", parents=[common], help="Compare all methods over artifact settings and seeds")
    return ap


def run_command(args: argparse.Namespace, argv: Sequence[str]) -> Dict[str, Any]:
    """Run one command and convert any failure into a result dict with an exit code."""
    try:
        settings = ExperimentSettings(args.config, args.overrides, args.seed)
        out_dir = Path(args.out) if args.out else Path("runs") / args.command
        out_dir.mkdir(parents=True, exist_ok=True)
        write_run_record(out_dir, args.command, argv, settings)
        result = COMMANDS[args.command](args, settings, out_dir)
        result["exit_code"] = EXIT_OK
        return result
    except Exception as e:
        category, code = classify(e)
        if code == EXIT_INTERNAL:
            logger.exception(f"Unexpected error in {args.command}")
        else:
            logger.error(f"{category}: {e}")
        return {"success": False, "error": f"{category}: {e}", "exit_code": code}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    result = run_command(args, argv)
    print(json.dumps(result, indent=2, default=str))
    return result["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
