#!/usr/bin/env python3
"""
Multi-stage artifact reduction tool
Three regressors applied in the projection, sinogram and reconstruction
domains, trained one after the other, plus the single-regressor
post-processing baseline on reconstructed slices.

Channel order: the stage-s input is (upsampled T(p*), upsampled T(p_hat))
and the stage-r input is (R(s*), R(T(p*)), R(T(p_hat))). The residual path
adds channel 0, so untrained stages reproduce the plain upsampled
reconstruction of p_hat.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from ct_tools.datamodel import (
    ROLE_INTERMEDIATE,
    CorruptFileError,
    DatasetManifest,
    PersistenceError,
    ProjectionStack,
    SinogramStack,
    ValidationError,
    Volume,
)
from ct_tools.geometry_tool import (
    ParallelGeometry,
    circular_mask,
    forward_project,
    rearrange,
    reconstruct,
    reconstruct_sinograms,
    upsample_sinogram,
)
from ct_tools.metrics_tool import MetricReport, evaluate_volume
from ct_tools.regressor.model import (
    RegressorModel,
    RegressorSpec,
    init_model,
    load_model,
    match_width,
    predict_stack,
    save_model,
)
from ct_tools.regressor.train import TrainConfig, train

logger = logging.getLogger(__name__)

STAGES = ("p", "s", "r")
STAGE_CHANNELS = {"p": 1, "s": 2, "r": 3}
MODEL_FILE = "model.bin"
MULTISTAGE_FILE = "multistage.json"
TRAINING_TIMES_FILE = "training_times.json"
TIMINGS_FILE = "timings.json"
INTERMEDIATE_DIR = "intermediates"
MULTISTAGE_VERSION = 1
ANGLE_TOL = 1e-9


@dataclass
class TrainingObject:
    """
    One training object: low-quality projections, the high-quality scan and
    its reconstruction. p_reference optionally gives high-quality projections
    on the low-quality angles; otherwise they are selected from p_hq.
    """

    p_lq: ProjectionStack
    p_hq: ProjectionStack
    r_hq: Volume
    p_reference: Optional[ProjectionStack] = None


@dataclass
class MultiStageModel:
    stage_p: RegressorModel
    stage_s: RegressorModel
    stage_r: RegressorModel
    lq_geometry: ParallelGeometry
    hq_geometry: ParallelGeometry
    simulated_reference: bool = False

    @property
    def upsample_rows(self) -> int:
        return self.hq_geometry.n_theta

    def stage(self, name: str) -> RegressorModel:
        return {"p": self.stage_p, "s": self.stage_s, "r": self.stage_r}[name]

    def parameter_count(self) -> int:
        return sum(self.stage(k).parameter_count() for k in STAGES)

    def validate(self) -> "MultiStageModel":
        for name in STAGES:
            channels = self.stage(name).spec.in_channels
            if channels != STAGE_CHANNELS[name]:
                raise ValidationError(f"stage {name} needs {STAGE_CHANNELS[name]} input channels, got {channels}")
        if (self.lq_geometry.detector_cols, self.lq_geometry.detector_rows) != (
                self.hq_geometry.detector_cols, self.hq_geometry.detector_rows):
            raise ValidationError("low- and high-quality geometries use different detectors")
        if not self.simulated_reference and angle_indices(self.lq_geometry.angles, self.hq_geometry.angles) is None:
            raise ValidationError("low-quality angles are not a subset of the high-quality angles")
        return self


@dataclass
class StageArtifacts:
    """Every intermediate of one multi-stage inference and its timings in seconds."""

    p_star: ProjectionStack
    s_hat_up: SinogramStack
    s_p_up: SinogramStack
    s_star: SinogramStack
    r_hat: Volume
    r_p: Volume
    r_s: Volume
    r_star: Volume
    timings: Dict[str, float] = field(default_factory=dict)

    def stage_inputs(self) -> List[Volume]:
        """The three reconstructions fed to stage r, in channel order."""
        return [self.r_s, self.r_p, self.r_hat]


def angle_indices(lq_angles: Sequence[float], hq_angles: Sequence[float]) -> Optional[np.ndarray]:
    """Index of each low-quality angle in the high-quality set, or None if one is missing."""
    hq = np.asarray(hq_angles, dtype=np.float64)
    found = []
    for a in lq_angles:
        hits = np.flatnonzero(np.abs(hq - a) <= ANGLE_TOL)
        if hits.size == 0:
            return None
        found.append(int(hits[0]))
    return np.asarray(found)


def geometry_of(p: ProjectionStack) -> ParallelGeometry:
    return ParallelGeometry(tuple(float(a) for a in p.angles), p.shape[2], p.shape[1])


def matched_reference(obj: TrainingObject, simulated_reference: bool = False) -> ProjectionStack:
    """High-quality projections on the low-quality angles."""
    if obj.p_reference is not None:
        if obj.p_reference.shape != obj.p_lq.shape:
            raise ValidationError(f"p_reference {obj.p_reference.shape} does not match p_lq {obj.p_lq.shape}")
        return obj.p_reference
    idx = angle_indices(obj.p_lq.angles, obj.p_hq.angles)
    if idx is not None:
        return ProjectionStack(obj.p_hq.data[idx], obj.p_lq.angles)
    if not simulated_reference:
        raise ValidationError(
            "low-quality angles are not a subset of the high-quality angles; "
            "enable simulated_reference to project the high-quality reconstruction instead"
        )
    return forward_project(obj.r_hq, geometry_of(obj.p_lq))


def _check_objects(objects: Sequence[TrainingObject]) -> None:
    if not objects:
        raise ValidationError("train_multistage needs at least one training object")
    first = objects[0]
    for i, obj in enumerate(objects):
        if obj.p_lq.shape[1:] != obj.p_hq.shape[1:]:
            raise ValidationError(f"object {i}: low- and high-quality detectors differ")
        if obj.r_hq.shape != (obj.p_hq.shape[1], obj.p_hq.shape[2], obj.p_hq.shape[2]):
            raise ValidationError(f"object {i}: reference volume {obj.r_hq.shape} does not match projections")
        if obj.p_lq.shape != first.p_lq.shape or obj.p_hq.shape != first.p_hq.shape:
            raise ValidationError(f"object {i}: shapes differ from object 0")
        if not (np.array_equal(obj.p_lq.angles, first.p_lq.angles) and np.array_equal(obj.p_hq.angles, first.p_hq.angles)):
            raise ValidationError(f"object {i}: angle sets differ from object 0")


def _stage_spec(specs: Optional[Dict[str, RegressorSpec]], name: str) -> RegressorSpec:
    spec = (specs or {}).get(name, RegressorSpec(in_channels=STAGE_CHANNELS[name]))
    if spec.in_channels != STAGE_CHANNELS[name]:
        raise ValidationError(f"stage {name} spec must have in_channels={STAGE_CHANNELS[name]}")
    return spec.validate()


def _fit_stage(name: str, spec: RegressorSpec, pairs, config: TrainConfig) -> RegressorModel:
    logger.info(f"Stage {name}: training on {len(pairs)} image pairs")
    model, _ = train(init_model(spec, seed=config.seed), pairs, config)
    return model


def _apply_stage_p(model: RegressorModel, p_hat: ProjectionStack) -> ProjectionStack:
    return ProjectionStack(predict_stack(model, [p_hat.data]), p_hat.angles)


def _upsampled(p: ProjectionStack, rows: int) -> SinogramStack:
    return upsample_sinogram(rearrange(p), rows)


def _apply_stage_s(model: RegressorModel, s_p_up: SinogramStack, s_hat_up: SinogramStack) -> SinogramStack:
    return SinogramStack(predict_stack(model, [s_p_up.data, s_hat_up.data]), s_p_up.angles)


def _apply_stage_r(model: RegressorModel, inputs: Sequence[Volume]) -> Volume:
    return circular_mask(Volume(predict_stack(model, [v.data for v in inputs])))


class _IntermediateStore:
    """
    Persists per-object intermediates between stages through a manifest.

    Objects put during this run are served back at full float64 precision,
    so later stages train on exactly what inference computes. Entries only
    found on disk (a resumed run) come back as their float32 payload.
    """

    def __init__(self, root: Path):
        self.root = root
        self.manifest_path = root / "manifest.json"
        self._held: Dict[str, Any] = {}
        if self.manifest_path.exists():
            self.manifest = DatasetManifest.load(self.manifest_path)
        else:
            self.manifest = DatasetManifest()

    def put(self, name: str, obj: Any) -> None:
        self.manifest.add_array(name, obj, self.root / f"{name}.raw", ROLE_INTERMEDIATE, base=self.root)
        self.manifest.save(self.manifest_path)
        self._held[name] = obj

    def get(self, name: str) -> Any:
        if name in self._held:
            return self._held[name]
        return self.manifest.open_entry(name, self.root)


def train_multistage(objects: Sequence[TrainingObject], configs: Dict[str, TrainConfig],
                     model_dir: Union[str, Path], specs: Optional[Dict[str, RegressorSpec]] = None,
                     simulated_reference: bool = False, start_stage: str = "p") -> MultiStageModel:
    """
    Train f_p, f_s and f_r strictly in sequence.

    Each stage is saved under model_dir before the next begins and its
    outputs on the training objects are persisted as intermediates. With
    start_stage "s" or "r" the earlier stages and their intermediates are
    loaded from model_dir instead of retrained.
    """
    if start_stage not in STAGES:
        raise ValidationError(f"start_stage must be one of {STAGES}, got {start_stage!r}")
    for name in STAGES:
        if name not in configs:
            raise ValidationError(f"missing train config for stage {name}")
    _check_objects(objects)
    model_dir = Path(model_dir)
    store = _IntermediateStore(model_dir / INTERMEDIATE_DIR)
    lq_geometry = geometry_of(objects[0].p_lq)
    hq_geometry = geometry_of(objects[0].p_hq)
    rows = hq_geometry.n_theta
    if angle_indices(lq_geometry.angles, hq_geometry.angles) is None and not simulated_reference:
        raise ValidationError("low-quality angles are not a subset of the high-quality angles")
    times: Dict[str, float] = _load_training_times(model_dir)

    # stage p
    if start_stage == "p":
        started = time.perf_counter()
        pairs = []
        for obj in objects:
            ref = matched_reference(obj, simulated_reference)
            pairs.extend((obj.p_lq.data[a][None], ref.data[a][None]) for a in range(obj.p_lq.n_theta))
        stage_p = _fit_stage("p", _stage_spec(specs, "p"), pairs, configs["p"])
        save_model(stage_p, model_dir / "stage_p" / MODEL_FILE)
        for i, obj in enumerate(objects):
            store.put(f"object{i}_p_star", _apply_stage_p(stage_p, obj.p_lq))
        times["p"] = time.perf_counter() - started
    else:
        stage_p = load_model(model_dir / "stage_p" / MODEL_FILE)

    # stage s
    if start_stage in ("p", "s"):
        started = time.perf_counter()
        pairs = []
        for i, obj in enumerate(objects):
            s_p_up = _upsampled(store.get(f"object{i}_p_star"), rows)
            s_hat_up = _upsampled(obj.p_lq, rows)
            s_hq = rearrange(obj.p_hq)
            pairs.extend(
                (np.stack([s_p_up.data[m], s_hat_up.data[m]]), s_hq.data[m][None]) for m in range(s_hq.shape[0])
            )
        stage_s = _fit_stage("s", _stage_spec(specs, "s"), pairs, configs["s"])
        save_model(stage_s, model_dir / "stage_s" / MODEL_FILE)
        for i, obj in enumerate(objects):
            s_p_up = _upsampled(store.get(f"object{i}_p_star"), rows)
            store.put(f"object{i}_s_star", _apply_stage_s(stage_s, s_p_up, _upsampled(obj.p_lq, rows)))
        times["s"] = time.perf_counter() - started
    else:
        stage_s = load_model(model_dir / "stage_s" / MODEL_FILE)

    # stage r
    started = time.perf_counter()
    pairs = []
    for i, obj in enumerate(objects):
        inputs = [
            reconstruct_sinograms(store.get(f"object{i}_s_star")),
            reconstruct(store.get(f"object{i}_p_star")),
            reconstruct(obj.p_lq),
        ]
        pairs.extend(
            (np.stack([v.data[z] for v in inputs]), obj.r_hq.data[z][None]) for z in range(obj.r_hq.shape[0])
        )
    stage_r = _fit_stage("r", _stage_spec(specs, "r"), pairs, configs["r"])
    save_model(stage_r, model_dir / "stage_r" / MODEL_FILE)
    times["r"] = time.perf_counter() - started

    model = MultiStageModel(stage_p, stage_s, stage_r, lq_geometry, hq_geometry, simulated_reference).validate()
    _write_descriptor(model, model_dir)
    _write_training_times(times, model_dir)
    logger.info(f"Multi-stage model ({model.parameter_count()} parameters) saved to {model_dir}")
    return model


def infer_multistage(model: MultiStageModel, p_hat: ProjectionStack, load_seconds: float = 0.0) -> StageArtifacts:
    """Run all three stages on p_hat and keep every intermediate with per-step timings."""
    started = time.perf_counter()
    g = model.lq_geometry
    if p_hat.shape != (g.n_theta, g.detector_rows, g.detector_cols):
        raise ValidationError(
            f"input projections {p_hat.shape} do not match the model geometry "
            f"({g.n_theta}, {g.detector_rows}, {g.detector_cols})"
        )
    if not np.allclose(p_hat.angles, g.angle_array(), rtol=0, atol=ANGLE_TOL):
        raise ValidationError("input projection angles differ from the model's low-quality angles")
    rows = model.upsample_rows
    timings: Dict[str, float] = {"load": float(load_seconds)}

    mark = time.perf_counter()
    p_star = _apply_stage_p(model.stage_p, p_hat)
    timings["stage_p"] = time.perf_counter() - mark

    mark = time.perf_counter()
    s_hat_up = _upsampled(p_hat, rows)
    s_p_up = _upsampled(p_star, rows)
    timings["upsample"] = time.perf_counter() - mark

    mark = time.perf_counter()
    s_star = _apply_stage_s(model.stage_s, s_p_up, s_hat_up)
    timings["stage_s"] = time.perf_counter() - mark

    mark = time.perf_counter()
    r_hat = reconstruct(p_hat)
    r_p = reconstruct(p_star)
    r_s = reconstruct_sinograms(s_star)
    timings["reconstruct"] = time.perf_counter() - mark

    mark = time.perf_counter()
    r_star = _apply_stage_r(model.stage_r, [r_s, r_p, r_hat])
    timings["stage_r"] = time.perf_counter() - mark

    timings["total"] = time.perf_counter() - started + timings["load"]
    logger.info(f"Multi-stage inference on {p_hat.shape} finished in {timings['total']:.2f}s")
    return StageArtifacts(p_star, s_hat_up, s_p_up, s_star, r_hat, r_p, r_s, r_star, timings)


def stage_outputs(artifacts: StageArtifacts, reference: Volume) -> Dict[str, MetricReport]:
    """Metrics of the reconstruction after each stage, from the corrupted input to r*."""
    after_p = reconstruct_sinograms(artifacts.s_p_up)
    return {
        "corrupt": evaluate_volume(artifacts.r_hat, reference, "corrupt"),
        "stage_p": evaluate_volume(after_p, reference, "stage_p"),
        "stage_s": evaluate_volume(artifacts.r_s, reference, "stage_s"),
        "stage_r": evaluate_volume(artifacts.r_star, reference, "stage_r"),
    }


def postprocess_spec(multistage_total: int, hidden_layers: int = 4, width: Optional[int] = None) -> RegressorSpec:
    """One-channel spec whose parameter count is matched to multistage_total unless width is given."""
    if width is None:
        width = match_width(multistage_total, in_channels=1, hidden_layers=hidden_layers)
    spec = RegressorSpec(in_channels=1, hidden_layers=hidden_layers, width=width).validate()
    logger.info(
        f"Post-processing regressor: width {width}, {spec.parameter_count()} parameters "
        f"(multi-stage total {multistage_total})"
    )
    return spec


def train_postprocess(r_hat: Sequence[Volume], r_hq: Sequence[Volume], config: TrainConfig,
                      spec: RegressorSpec) -> RegressorModel:
    """Single regressor from corrupted reconstruction slices to reference slices."""
    if len(r_hat) != len(r_hq) or not r_hat:
        raise ValidationError(f"need matching non-empty volume lists, got {len(r_hat)} and {len(r_hq)}")
    if spec.in_channels != 1:
        raise ValidationError("post-processing regressor takes exactly one input channel")
    pairs = []
    for i, (x, t) in enumerate(zip(r_hat, r_hq)):
        if x.shape != t.shape:
            raise ValidationError(f"volume {i}: {x.shape} does not match reference {t.shape}")
        pairs.extend((x.data[z][None], t.data[z][None]) for z in range(x.shape[0]))
    return _fit_stage("post", spec, pairs, config)


def infer_postprocess(model: RegressorModel, r_hat: Volume) -> Volume:
    return circular_mask(Volume(predict_stack(model, [r_hat.data])))


def _write_descriptor(model: MultiStageModel, model_dir: Path) -> None:
    doc = {
        "version": MULTISTAGE_VERSION,
        "lq_geometry": model.lq_geometry.to_dict(),
        "hq_geometry": model.hq_geometry.to_dict(),
        "upsample_rows": model.upsample_rows,
        "simulated_reference": model.simulated_reference,
        "stages": {name: f"stage_{name}/{MODEL_FILE}" for name in STAGES},
        "parameters": {name: model.stage(name).parameter_count() for name in STAGES},
    }
    try:
        (model_dir / MULTISTAGE_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write {model_dir / MULTISTAGE_FILE}: {e}") from e


def _load_training_times(model_dir: Path) -> Dict[str, float]:
    path = model_dir / TRAINING_TIMES_FILE
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        logger.warning(f"Ignoring unreadable {path}")
        return {}


def _write_training_times(times: Dict[str, float], model_dir: Path) -> None:
    # wall-clock seconds vary run to run, so they live outside multistage.json
    try:
        (model_dir / TRAINING_TIMES_FILE).write_text(json.dumps(times, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write training times: {e}") from e


def save_multistage(model: MultiStageModel, model_dir: Union[str, Path]) -> Path:
    model.validate()
    model_dir = Path(model_dir)
    for name in STAGES:
        save_model(model.stage(name), model_dir / f"stage_{name}" / MODEL_FILE)
    _write_descriptor(model, model_dir)
    return model_dir


def load_multistage(model_dir: Union[str, Path]) -> MultiStageModel:
    model_dir = Path(model_dir)
    path = model_dir / MULTISTAGE_FILE
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise PersistenceError(f"no {MULTISTAGE_FILE} in {model_dir}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"unreadable {path}: {e}") from e
    if doc.get("version") != MULTISTAGE_VERSION:
        raise CorruptFileError(f"{path}: unsupported version {doc.get('version')!r}")
    stages = [load_model(model_dir / f"stage_{name}" / MODEL_FILE) for name in STAGES]
    model = MultiStageModel(
        *stages,
        lq_geometry=ParallelGeometry.from_dict(doc["lq_geometry"]),
        hq_geometry=ParallelGeometry.from_dict(doc["hq_geometry"]),
        simulated_reference=bool(doc.get("simulated_reference", False)),
    )
    if doc.get("upsample_rows") != model.upsample_rows:
        raise CorruptFileError(f"{path}: upsample_rows does not match the high-quality geometry")
    try:
        return model.validate()
    except ValidationError as e:
        raise CorruptFileError(f"{path}: {e}") from e


def save_artifacts(artifacts: StageArtifacts, out_dir: Union[str, Path]) -> DatasetManifest:
    """Persist every intermediate of one inference with a manifest and the timing table."""
    out_dir = Path(out_dir)
    manifest = DatasetManifest()
    for name in ("p_star", "s_hat_up", "s_p_up", "s_star", "r_hat", "r_p", "r_s"):
        manifest.add_array(name, getattr(artifacts, name), out_dir / f"{name}.raw", ROLE_INTERMEDIATE, base=out_dir)
    manifest.add_array("r_star", artifacts.r_star, out_dir / "r_star.raw", ROLE_INTERMEDIATE, base=out_dir)
    manifest.extra["result"] = "r_star"
    manifest.save(out_dir / "manifest.json")
    try:
        (out_dir / TIMINGS_FILE).write_text(json.dumps(artifacts.timings, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write timings: {e}") from e
    return manifest

