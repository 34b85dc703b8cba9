#!/usr/bin/env python3
"""
Benchmark tool
Desk-scale experiment harness: simulated foam scans, the comparison of
corrupted / post-processing / multi-stage / classical+post-processing
reconstructions averaged over seeds, and per-stage inference timing with
host information.
"""

import csv
import json
import logging
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import psutil

from ct_tools.classical_tool import PRESETS, ClassicalParams, grid_search, run_chain
from ct_tools.datamodel import PersistenceError, ProjectionStack, ValidationError, Volume
from ct_tools.degrade_tool import DegradeSpec, degrade_projections
from ct_tools.geometry_tool import ParallelGeometry, forward_project, reconstruct, subsample_angles
from ct_tools.metrics_tool import evaluate_volume
from ct_tools.multistage_tool import (
    MultiStageModel,
    TrainingObject,
    infer_multistage,
    infer_postprocess,
    matched_reference,
    postprocess_spec,
    stage_outputs,
    train_multistage,
    train_postprocess,
)
from ct_tools.phantom_tool import FoamSpec, build_foam
from ct_tools.regressor.model import RegressorSpec
from ct_tools.regressor.train import TrainConfig

logger = logging.getLogger(__name__)

TIMING_STEPS = ("load", "stage_p", "upsample", "stage_s", "reconstruct", "stage_r")
# Seeds of different runs never share phantoms
SEED_STRIDE = 1000


@dataclass
class SimulatedScan:
    volume: Volume
    p_hq: ProjectionStack
    p_lq: ProjectionStack
    r_hq: Volume
    placement: Optional[Dict[str, int]] = None

    def training_object(self) -> TrainingObject:
        return TrainingObject(self.p_lq, self.p_hq, self.r_hq)


def simulate_scan(foam: FoamSpec, degrade: DegradeSpec, n_hq: int, factor: int,
                  volume: Optional[Volume] = None) -> SimulatedScan:
    """
    Foam phantom -> clean high-quality scan -> every factor-th angle -> degraded.

    A given volume replaces the generated phantom. The reference
    reconstruction is the masked FBP of the clean scan.
    """
    placement = None
    if volume is None:
        volume, placement = build_foam(foam)
    g = ParallelGeometry.equispaced(n_hq, volume.shape[2], volume.shape[0])
    p_hq = forward_project(volume, g)
    p_lq = degrade_projections(subsample_angles(p_hq, factor), degrade)
    return SimulatedScan(volume, p_hq, p_lq, reconstruct(p_hq), placement)


@dataclass
class ExperimentSetup:
    """Everything one comparison run needs besides the artifact setting and seed."""

    foam: FoamSpec = field(default_factory=FoamSpec)
    n_hq: int = 256
    factor: int = 4
    n_train: int = 2
    stage_configs: Dict[str, TrainConfig] = field(default_factory=dict)
    stage_specs: Dict[str, RegressorSpec] = field(default_factory=dict)
    post_config: TrainConfig = field(default_factory=TrainConfig)
    post_hidden_layers: int = 4
    post_width: Optional[int] = None
    classical_grid: List[ClassicalParams] = field(default_factory=lambda: list(PRESETS.values()))

    def validate(self) -> "ExperimentSetup":
        if self.n_train < 1:
            raise ValidationError(f"experiment.n_train must be >= 1, got {self.n_train}")
        if self.factor < 1 or self.n_hq % self.factor:
            raise ValidationError(f"experiment.factor {self.factor} must divide n_hq={self.n_hq}")
        if not self.classical_grid:
            raise ValidationError("experiment.classical_grid must not be empty")
        return self


def _scans(setup: ExperimentSetup, degrade: DegradeSpec, seed: int) -> List[SimulatedScan]:
    """n_train training scans followed by one test scan, each with its own phantom and noise seed."""
    scans = []
    for k in range(setup.n_train + 1):
        sub = seed * SEED_STRIDE + k
        scans.append(simulate_scan(
            replace(setup.foam, seed=setup.foam.seed + sub),
            replace(degrade, seed=degrade.seed + sub),
            setup.n_hq,
            setup.factor,
        ))
    return scans


def run_experiment(setup: ExperimentSetup, degrade: DegradeSpec, seed: int,
                   work_dir: Union[str, Path]) -> Dict[str, Dict[str, float]]:
    """
    Train and score every method on one artifact setting and seed.

    Returns mean PSNR/SSIM per method plus the per-stage ablation of the
    multi-stage result (keys "ablation:<stage>").
    """
    setup.validate()
    work_dir = Path(work_dir)
    scans = _scans(setup, degrade, seed)
    train_scans, test = scans[:-1], scans[-1]
    objects = [s.training_object() for s in train_scans]

    model = train_multistage(objects, setup.stage_configs, work_dir / "multistage", setup.stage_specs)
    artifacts = infer_multistage(model, test.p_lq)

    post_spec = postprocess_spec(model.parameter_count(), setup.post_hidden_layers, setup.post_width)
    r_hat_train = [reconstruct(s.p_lq) for s in train_scans]
    post = train_postprocess(r_hat_train, [s.r_hq for s in train_scans], setup.post_config, post_spec)

    # classical chain tuned on the first training scan against angle-matched clean projections
    best, _ = grid_search(setup.classical_grid, objects[0].p_lq, matched_reference(objects[0]))
    r_pl_train = [run_chain(s.p_lq, best) for s in train_scans]
    classical_post = train_postprocess(r_pl_train, [s.r_hq for s in train_scans], setup.post_config, post_spec)

    results = {
        "corrupt": evaluate_volume(artifacts.r_hat, test.r_hq, "corrupt"),
        "postprocess": evaluate_volume(infer_postprocess(post, artifacts.r_hat), test.r_hq, "postprocess"),
        "multistage": evaluate_volume(artifacts.r_star, test.r_hq, "multistage"),
        "classical+post": evaluate_volume(
            infer_postprocess(classical_post, run_chain(test.p_lq, best)), test.r_hq, "classical+post"
        ),
    }
    for stage, report in stage_outputs(artifacts, test.r_hq).items():
        results[f"ablation:{stage}"] = report
    summary = {k: {"psnr": r.mean_psnr, "ssim": r.mean_ssim} for k, r in results.items()}
    summary["parameters"] = {"multistage": model.parameter_count(), "postprocess": post.parameter_count()}
    return summary


def compare_methods(setup: ExperimentSetup, settings: Dict[str, DegradeSpec], seeds: Sequence[int],
                    work_dir: Union[str, Path]) -> List[Dict[str, Any]]:
    """
    Run every artifact setting over all seeds and average per method.

    Returns rows {setting, method, psnr, ssim, seeds, parameters}; parameters
    is filled for the two learned methods whose budgets are matched.
    """
    if not settings:
        raise ValidationError("compare needs at least one artifact setting")
    if not seeds:
        raise ValidationError("compare needs at least one seed")
    work_dir = Path(work_dir)
    rows = []
    for name, degrade in settings.items():
        runs = []
        for seed in seeds:
            logger.info(f"Comparison: setting {name!r}, seed {seed}")
            runs.append(run_experiment(setup, degrade.validate(), seed, work_dir / name / f"seed{seed}"))
        methods = [k for k in runs[0] if k != "parameters"]
        counts = runs[0]["parameters"]
        for method in methods:
            rows.append({
                "setting": name,
                "method": method,
                "psnr": float(np.mean([r[method]["psnr"] for r in runs])),
                "ssim": float(np.mean([r[method]["ssim"] for r in runs])),
                "seeds": len(seeds),
                "parameters": counts.get(method, ""),
            })
    return rows


def write_rows(rows: Sequence[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """CSV with the keys of the first row as header."""
    path = Path(path)
    if not rows:
        raise ValidationError("nothing to write")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise PersistenceError(f"cannot write {path}: {e}") from e
    return path


def host_info() -> Dict[str, Any]:
    """CPU, memory and OS of the machine the timings come from."""
    memory = psutil.virtual_memory()
    return {
        "cpu_count_logical": psutil.cpu_count(logical=True),
        "cpu_count_physical": psutil.cpu_count(logical=False),
        "memory_total_bytes": memory.total,
        "memory_available_bytes": memory.available,
        "system": platform.system(),
        "release": platform.release(),
        "python": platform.python_version(),
    }


def bench_inference(model: MultiStageModel, p_hat: ProjectionStack, repeats: int = 1,
                    load_seconds: float = 0.0) -> Dict[str, Any]:
    """
    Time repeated multi-stage inference.

    Returns per-run timings, the per-step mean, and how far the sum of the
    steps is from the measured total (relative).
    """
    if repeats < 1:
        raise ValidationError(f"bench.repeats must be >= 1, got {repeats}")
    runs = []
    for i in range(repeats):
        started = time.perf_counter()
        artifacts = infer_multistage(model, p_hat, load_seconds=load_seconds)
        wall = time.perf_counter() - started + load_seconds
        timings = dict(artifacts.timings)
        timings["wall_clock"] = wall
        runs.append(timings)
        logger.debug(f"bench run {i}: {timings}")
    mean = {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}
    step_sum = sum(mean[k] for k in TIMING_STEPS)
    return {
        "host": host_info(),
        "runs": runs,
        "mean": mean,
        "step_sum": step_sum,
        "step_sum_error": abs(step_sum - mean["wall_clock"]) / mean["wall_clock"] if mean["wall_clock"] > 0 else 0.0,
    }


def write_bench(report: Dict[str, Any], out_dir: Union[str, Path]) -> List[Path]:
    """timings.csv (step, seconds) plus bench.json with host details."""
    out_dir = Path(out_dir)
    rows = [{"step": k, "seconds": report["mean"][k]} for k in TIMING_STEPS]
    rows.append({"step": "total", "seconds": report["mean"]["total"]})
    rows.append({"step": "wall_clock", "seconds": report["mean"]["wall_clock"]})
    csv_path = write_rows(rows, out_dir / "timings.csv")
    json_path = out_dir / "bench.json"
    try:
        json_path.write_text(json.dumps(report, indent=2), encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write {json_path}: {e}") from e
    return [csv_path, json_path]
