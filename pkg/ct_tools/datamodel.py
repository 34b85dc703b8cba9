#!/usr/bin/env python3
"""
Core data types for TomoStage
Projection / sinogram / volume stacks, the seeded random generator,
raw+JSON array persistence and dataset manifests.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
ARRAY_DTYPE = "<f4"
SIDECAR_SUFFIX = ".json"
PAYLOAD_SUFFIX = ".raw"

ROLE_LOW_QUALITY = "low-quality"
ROLE_HIGH_QUALITY = "high-quality"
ROLE_INTERMEDIATE = "intermediate"
ROLES = (ROLE_LOW_QUALITY, ROLE_HIGH_QUALITY, ROLE_INTERMEDIATE)


class TomoStageError(Exception):
    """Base class for every error raised by the toolkit."""

    category = "error"


class ValidationError(TomoStageError, ValueError):
    """Invalid input: wrong shape, out-of-range parameter, broken invariant."""

    category = "validation"


class PersistenceError(TomoStageError):
    """Reading or writing an artifact failed."""

    category = "io"


class CorruptFileError(PersistenceError):
    """A stored artifact exists but cannot be decoded."""

    category = "corrupt-file"


class NumericError(TomoStageError):
    """A computation produced non-finite values or failed to converge."""

    category = "numeric"


def _as_float_array(data: Any, name: str, ndim: int = 3) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must have {ndim} axes, got shape {arr.shape}")
    if any(s == 0 for s in arr.shape):
        raise ValidationError(f"{name} has an empty axis: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _as_angles(angles: Sequence[float], count: int, name: str) -> np.ndarray:
    ang = np.asarray(angles, dtype=np.float64).reshape(-1)
    if ang.size != count:
        raise ValidationError(f"{name}: {ang.size} angles for {count} rows")
    if not np.all(np.isfinite(ang)):
        raise ValidationError(f"{name}: angles must be finite")
    if ang.size and (ang[0] < 0.0 or ang[-1] >= math.pi):
        raise ValidationError(f"{name}: angles must lie within [0, pi)")
    if np.any(np.diff(ang) <= 0.0):
        raise ValidationError(f"{name}: angles must be strictly increasing")
    return ang


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class ProjectionStack:
    """Attenuation images indexed (angle, detector-row, detector-column)."""

    axes = ("angle", "row", "column")

    def __init__(self, data: Any, angles: Sequence[float]):
        arr = _as_float_array(data, "ProjectionStack.data")
        self.data = _freeze(arr.copy())
        self.angles = _freeze(_as_angles(angles, arr.shape[0], "ProjectionStack"))

    @property
    def n_theta(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"ProjectionStack(shape={self.data.shape})"


class SinogramStack:
    """The same data rearranged as (detector-row, angle, detector-column)."""

    axes = ("row", "angle", "column")

    def __init__(self, data: Any, angles: Sequence[float]):
        arr = _as_float_array(data, "SinogramStack.data")
        self.data = _freeze(arr.copy())
        self.angles = _freeze(_as_angles(angles, arr.shape[1], "SinogramStack"))

    @property
    def n_theta(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"SinogramStack(shape={self.data.shape})"


class Volume:
    """Reconstructed slices indexed (slice, y, x)."""

    axes = ("z", "y", "x")

    def __init__(self, data: Any, mask_applied: bool = False):
        arr = _as_float_array(data, "Volume.data")
        if mask_applied:
            outside = ~inscribed_circle(arr.shape[1], arr.shape[2])
            if np.any(arr[:, outside] != 0.0):
                raise ValidationError("Volume flagged mask_applied has nonzero voxels outside the circle")
        self.data = _freeze(arr.copy())
        self.mask_applied = bool(mask_applied)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Volume(shape={self.data.shape}, mask_applied={self.mask_applied})"


def inscribed_circle(ny: int, nx: int) -> np.ndarray:
    """Boolean (ny, nx) map of the pixels kept by the circular mask."""
    cy = (ny - 1) / 2.0
    cx = (nx - 1) / 2.0
    radius = min(ny, nx) / 2.0
    yy, xx = np.mgrid[0:ny, 0:nx]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2


class Rng:
    """
    Seeded random stream (numpy PCG64).

    Single-owner: parallel work must call spawn() for a sub-stream instead of
    sharing one instance.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        if not isinstance(seed, (int, np.integer)) or seed < 0 or seed >= 2 ** 64:
            raise ValidationError(f"seed must be an integer in [0, 2**64), got {seed!r}")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def spawn(self, *key: int) -> "Rng":
        """Independent child stream derived from (seed, spawn_key + key)."""
        return Rng(self.seed, self.spawn_key + tuple(key))

    @property
    def position(self) -> Dict[str, Any]:
        return self.generator.bit_generator.state

    def describe(self) -> Dict[str, Any]:
        return {"algorithm": self.algorithm, "seed": self.seed, "spawn_key": list(self.spawn_key)}


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    if not lo <= hi:
        raise ValidationError(f"rng_uniform requires lo <= hi, got {lo} > {hi}")
    if lo == hi:
        return float(lo)
    return float(rng.generator.uniform(lo, hi))


def rng_normal(rng: Rng, mu: float, sigma: float) -> float:
    if sigma < 0:
        raise ValidationError(f"rng_normal requires sigma >= 0, got {sigma}")
    if sigma == 0:
        return float(mu)
    return float(rng.generator.normal(mu, sigma))


def rng_poisson(rng: Rng, lam: float) -> int:
    if lam < 0 or not math.isfinite(lam):
        raise ValidationError(f"rng_poisson requires a finite lambda >= 0, got {lam}")
    if lam == 0:
        return 0
    return int(rng.generator.poisson(lam))


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + SIDECAR_SUFFIX)


def save_array(array: Any, path: Union[str, Path], angles: Optional[Sequence[float]] = None,
               axes: Optional[Sequence[str]] = None) -> Path:
    """
    Write a 3-axis array as raw little-endian float32 plus a JSON sidecar.

    Args:
        array: ndarray or one of ProjectionStack / SinogramStack / Volume.
        path: payload path; the sidecar is written next to it as <path>.json.
        angles: optional angle list stored in the sidecar.
        axes: optional axis names stored in the sidecar.

    Returns:
        The payload path.
    """
    extra: Dict[str, Any] = {}
    if isinstance(array, (ProjectionStack, SinogramStack)):
        angles = array.angles if angles is None else angles
        axes = array.axes if axes is None else axes
        array = array.data
    elif isinstance(array, Volume):
        axes = array.axes if axes is None else axes
        extra["mask_applied"] = array.mask_applied
        array = array.data

    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ValidationError(f"save_array expects 3 axes, got shape {arr.shape}")
    if any(s == 0 for s in arr.shape):
        raise ValidationError(f"save_array: empty axis in shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("save_array: array contains non-finite values")

    payload = np.ascontiguousarray(arr, dtype=ARRAY_DTYPE)
    header: Dict[str, Any] = {
        "shape": list(payload.shape),
        "dtype": "float32",
        "byte_order": "little",
        "axes": list(axes) if axes is not None else ["axis0", "axis1", "axis2"],
    }
    if angles is not None:
        header["angles"] = [float(a) for a in angles]
    header.update(extra)

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload.tobytes(order="C"))
        _sidecar_path(path).write_text(json.dumps(header, indent=2), encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write {path}: {e}") from e
    logger.debug(f"Saved array {payload.shape} to {path}")
    return path


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise CorruptFileError(f"sidecar missing for {path}")
    try:
        header = json.loads(sidecar.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"unreadable sidecar {sidecar}: {e}") from e
    shape = header.get("shape")
    if not isinstance(shape, list) or len(shape) != 3 or not all(isinstance(s, int) and s > 0 for s in shape):
        raise CorruptFileError(f"bad shape in sidecar {sidecar}: {shape!r}")
    if header.get("dtype") != "float32":
        raise CorruptFileError(f"unsupported dtype in sidecar {sidecar}: {header.get('dtype')!r}")
    return header


def load_array(path: Union[str, Path]) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Read an array written by save_array.

    Returns:
        (float32 array, sidecar metadata). Values are bit-identical to the
        saved float32 payload.
    """
    path = Path(path)
    header = read_header(path)
    expected = int(np.prod(header["shape"])) * 4
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise CorruptFileError(f"payload missing: {path}") from e
    except OSError as e:
        raise PersistenceError(f"cannot read {path}: {e}") from e
    if len(raw) != expected:
        raise CorruptFileError(f"{path}: payload has {len(raw)} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=ARRAY_DTYPE).reshape(header["shape"]).astype(np.float32)
    return arr, header


def load_projections(path: Union[str, Path]) -> ProjectionStack:
    arr, header = load_array(path)
    if "angles" not in header:
        raise CorruptFileError(f"{path}: projection sidecar carries no angles")
    return ProjectionStack(arr, header["angles"])


def load_sinograms(path: Union[str, Path]) -> SinogramStack:
    arr, header = load_array(path)
    if "angles" not in header:
        raise CorruptFileError(f"{path}: sinogram sidecar carries no angles")
    return SinogramStack(arr, header["angles"])


def load_volume(path: Union[str, Path]) -> Volume:
    arr, header = load_array(path)
    return Volume(arr, mask_applied=bool(header.get("mask_applied", False)))


@dataclass
class ManifestEntry:
    path: str
    role: str
    shape: List[int]
    kind: str = "array"


@dataclass
class DatasetManifest:
    """Index of the arrays produced by one command, with their provenance."""

    entries: Dict[str, ManifestEntry] = field(default_factory=dict)
    geometry: Dict[str, Any] = field(default_factory=dict)
    degradation: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def add(self, name: str, path: Union[str, Path], role: str, shape: Sequence[int], kind: str = "array") -> None:
        if role not in ROLES:
            raise ValidationError(f"manifest role must be one of {ROLES}, got {role!r}")
        self.entries[name] = ManifestEntry(str(path), role, [int(s) for s in shape], kind)

    def add_array(self, name: str, obj: Any, path: Union[str, Path], role: str,
                  base: Optional[Path] = None) -> Path:
        """Save obj and register it; with base, the stored path is relative to base."""
        saved = save_array(obj, path)
        data = obj.data if hasattr(obj, "data") else np.asarray(obj)
        kind = {ProjectionStack: "projections", SinogramStack: "sinograms", Volume: "volume"}.get(type(obj), "array")
        stored = saved.relative_to(base) if base is not None else saved
        self.add(name, stored, role, data.shape, kind)
        return saved

    def resolve(self, name: str, base: Optional[Path] = None) -> Path:
        if name not in self.entries:
            raise ValidationError(f"manifest has no entry {name!r}; available: {sorted(self.entries)}")
        p = Path(self.entries[name].path)
        if not p.is_absolute() and base is not None:
            p = base / p
        return p

    def open_entry(self, name: str, base: Optional[Path] = None) -> Any:
        """Load an entry as the domain type recorded in its kind."""
        p = self.resolve(name, base)
        kind = self.entries[name].kind
        if kind == "projections":
            return load_projections(p)
        if kind == "sinograms":
            return load_sinograms(p)
        if kind == "volume":
            return load_volume(p)
        return load_array(p)[0]

    def names(self, role: Optional[str] = None) -> List[str]:
        return [k for k, v in self.entries.items() if role is None or v.role == role]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "entries": {k: vars(v) for k, v in self.entries.items()},
            "geometry": self.geometry,
            "degradation": self.degradation,
            "seed": self.seed,
            "extra": self.extra,
        }

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        except OSError as e:
            raise PersistenceError(f"cannot write manifest {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path: Union[str, Path], verify: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise PersistenceError(f"manifest not found: {path}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise CorruptFileError(f"unreadable manifest {path}: {e}") from e
        if raw.get("version") != MANIFEST_VERSION:
            raise CorruptFileError(f"{path}: unsupported manifest version {raw.get('version')!r}")
        manifest = cls(
            entries={k: ManifestEntry(**v) for k, v in raw.get("entries", {}).items()},
            geometry=raw.get("geometry", {}),
            degradation=raw.get("degradation", {}),
            seed=raw.get("seed"),
            extra=raw.get("extra", {}),
        )
        if verify:
            manifest.verify(path.parent)
        return manifest

    def verify(self, base: Optional[Path] = None) -> None:
        """Check that every referenced array exists and matches its recorded shape."""
        for name, entry in self.entries.items():
            p = self.resolve(name, base)
            if not p.exists():
                raise CorruptFileError(f"manifest entry {name!r}: {p} does not exist")
            header = read_header(p)
            if header["shape"] != entry.shape:
                raise CorruptFileError(
                    f"manifest entry {name!r}: header shape {header['shape']} != manifest shape {entry.shape}"
                )
