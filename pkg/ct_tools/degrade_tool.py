#!/usr/bin/env python3
"""
Degradation tool
Additive artifact model for projection data: Poisson photon noise, fixed
detector-pixel offsets (rings), zingers, plus flat-field correction of raw
detector counts.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from ct_tools.datamodel import NumericError, ProjectionStack, Rng, ValidationError
from ct_tools.geometry_tool import equispaced_angles

logger = logging.getLogger(__name__)

# Pixels with attenuation above this count as covered by the object
OBJECT_THRESHOLD = 1e-9
MIN_TRANSMISSION = 1e-6
MAX_TRANSMISSION_CAP = 10.0

# Sub-stream keys, so each artifact draws from its own stream
NOISE_STREAM = 1
RING_STREAM = 2
ZINGER_STREAM = 3


@dataclass(frozen=True)
class DegradeSpec:
    """Strength of each simulated artifact."""

    I0: float = 100.0
    absorption_target: float = 0.5
    P_ring: float = 0.1
    sigma_ring: float = 0.005
    P_proj: float = 0.10
    P_zinger: float = 0.001
    v_zinger: float = 5.0
    noise: bool = True
    seed: int = 0

    def validate(self) -> "DegradeSpec":
        if not self.I0 > 0:
            raise ValidationError(f"degrade.I0 must be > 0, got {self.I0}")
        if not 0 < self.absorption_target < 1:
            raise ValidationError(f"degrade.absorption_target must be in (0, 1), got {self.absorption_target}")
        for name in ("P_ring", "P_proj", "P_zinger"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValidationError(f"degrade.{name} must be in [0, 1], got {value}")
        if self.sigma_ring < 0:
            raise ValidationError(f"degrade.sigma_ring must be >= 0, got {self.sigma_ring}")
        if not self.v_zinger > 0:
            raise ValidationError(f"degrade.v_zinger must be > 0, got {self.v_zinger}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RingPattern:
    """Fixed per-detector-pixel deviations d_ring and the mask of affected pixels."""

    deviations: np.ndarray
    mask: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.deviations.shape


def absorption_scale(p: np.ndarray, absorption_target: float) -> float:
    """
    Scale alpha such that the mean transmission exp(-alpha * p) over
    object-covered pixels equals 1 - absorption_target.
    """
    covered = p[p > OBJECT_THRESHOLD]
    if covered.size == 0:
        raise ValidationError("apply_poisson_noise: projections are all zero, absorption scale undefined")
    target = 1.0 - absorption_target

    def residual(alpha: float) -> float:
        return float(np.mean(np.exp(-alpha * covered))) - target

    hi = 1.0 / float(covered.mean())
    while residual(hi) > 0:
        hi *= 2.0
        if hi > 1e12:
            raise NumericError("absorption scale search diverged")
    return float(brentq(residual, 0.0, hi, xtol=1e-14, rtol=1e-12))


def apply_poisson_noise(p: ProjectionStack, I0: float, absorption_target: float, rng: Rng) -> ProjectionStack:
    """
    Convert to photon counts, draw Poisson counts, convert back.

    Counts c ~ Poisson(I0 * exp(-alpha * p)); output -ln(max(c, 1) / I0) / alpha
    keeps the input's attenuation units.
    """
    if not I0 > 0:
        raise ValidationError(f"I0 must be > 0, got {I0}")
    if not 0 < absorption_target < 1:
        raise ValidationError(f"absorption_target must be in (0, 1), got {absorption_target}")
    if np.any(p.data < 0):
        raise ValidationError("apply_poisson_noise expects non-negative attenuation")
    alpha = absorption_scale(p.data, absorption_target)
    expected = I0 * np.exp(-alpha * p.data)
    counts = rng.generator.poisson(expected)
    noisy = -np.log(np.maximum(counts, 1) / I0) / alpha
    logger.debug(f"Poisson noise: I0={I0}, alpha={alpha:.6g}")
    return ProjectionStack(noisy, p.angles)


def make_ring_pattern(M: int, N: int, P_ring: float, sigma_ring: float, rng: Rng) -> RingPattern:
    """Select round(P_ring*M*N) detector pixels without replacement and give each a N(0, sigma_ring^2) offset."""
    if M < 1 or N < 1:
        raise ValidationError(f"ring pattern needs a non-empty detector, got {M}x{N}")
    if not 0 <= P_ring <= 1:
        raise ValidationError(f"P_ring must be in [0, 1], got {P_ring}")
    if sigma_ring < 0:
        raise ValidationError(f"sigma_ring must be >= 0, got {sigma_ring}")
    count = int(round(P_ring * M * N))
    mask = np.zeros(M * N, dtype=bool)
    deviations = np.zeros(M * N, dtype=np.float64)
    if count:
        chosen = rng.generator.choice(M * N, size=count, replace=False)
        mask[chosen] = True
        if sigma_ring > 0:
            deviations[chosen] = rng.generator.normal(0.0, sigma_ring, size=count)
    return RingPattern(deviations.reshape(M, N), mask.reshape(M, N))


def apply_ring(p: ProjectionStack, pattern: RingPattern) -> ProjectionStack:
    """Add the same d_ring to every projection image."""
    if pattern.shape != p.shape[1:]:
        raise ValidationError(f"ring pattern {pattern.shape} does not match detector {p.shape[1:]}")
    return ProjectionStack(p.data + pattern.deviations[None, :, :], p.angles)


def apply_zinger(p: ProjectionStack, P_proj: float, P_zinger: float, v: float, rng: Rng) -> ProjectionStack:
    """
    Replace random pixels of random projections with the value v.

    round(P_proj*n_theta) projections are chosen; in each one
    round(P_zinger*M*N) distinct pixels are set to v.
    """
    for name, value in (("P_proj", P_proj), ("P_zinger", P_zinger)):
        if not 0 <= value <= 1:
            raise ValidationError(f"{name} must be in [0, 1], got {value}")
    if not v > 0:
        raise ValidationError(f"zinger value must be > 0, got {v}")
    n_theta, m, n = p.shape
    n_proj = int(round(P_proj * n_theta))
    n_pix = int(round(P_zinger * m * n))
    if n_proj == 0 or n_pix == 0:
        return ProjectionStack(p.data, p.angles)

    out = np.array(p.data, dtype=np.float64)
    projections = np.sort(rng.generator.choice(n_theta, size=n_proj, replace=False))
    for a in projections:
        pixels = rng.spawn(ZINGER_STREAM, int(a)).generator.choice(m * n, size=n_pix, replace=False)
        out[a].reshape(-1)[pixels] = v
    logger.debug(f"Zingers: {n_pix} pixels in each of {n_proj} projections")
    return ProjectionStack(out, p.angles)


def degrade_projections(p: ProjectionStack, spec: DegradeSpec, rng: Optional[Rng] = None) -> ProjectionStack:
    """Noise, then rings, then zingers, each on its own sub-stream of spec.seed."""
    spec.validate()
    rng = Rng(spec.seed) if rng is None else rng
    out = p
    if spec.noise:
        out = apply_poisson_noise(out, spec.I0, spec.absorption_target, rng.spawn(NOISE_STREAM))
    pattern = make_ring_pattern(p.shape[1], p.shape[2], spec.P_ring, spec.sigma_ring, rng.spawn(RING_STREAM))
    out = apply_ring(out, pattern)
    out = apply_zinger(out, spec.P_proj, spec.P_zinger, spec.v_zinger, rng.spawn(ZINGER_STREAM))
    logger.info(
        f"Degraded {p.shape} projections (I0={spec.I0 if spec.noise else 'off'}, "
        f"P_ring={spec.P_ring}, P_zinger={spec.P_zinger})"
    )
    return out


def _aggregate(fields: Sequence[np.ndarray], name: str, use_median: bool, index: int) -> np.ndarray:
    if len(fields) < 1:
        raise ValidationError(f"flat_field_correct needs at least one {name} field")
    stack = np.asarray([np.asarray(f, dtype=np.float64) for f in fields])
    if use_median:
        return np.median(stack, axis=0)
    if not 0 <= index < len(fields):
        raise ValidationError(f"{name} field_index {index} out of range for {len(fields)} fields")
    return stack[index]


def flat_field_correct(raw: np.ndarray, flats: Sequence[np.ndarray], darks: Sequence[np.ndarray],
                       use_median: bool = True, angles: Optional[Sequence[float]] = None,
                       field_index: int = 0) -> ProjectionStack:
    """
    Convert raw counts (n_theta, M, N) to attenuation -ln((raw - dark) / (flat - dark)).

    Flats and darks are combined by their pixelwise median, or the single
    field at field_index is used. Transmission is clamped to
    [MIN_TRANSMISSION, MAX_TRANSMISSION_CAP].
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise ValidationError(f"raw counts must be (n_theta, M, N), got shape {raw.shape}")
    flat = _aggregate(flats, "flat", use_median, field_index)
    dark = _aggregate(darks, "dark", use_median, field_index)
    if flat.shape != raw.shape[1:] or dark.shape != raw.shape[1:]:
        raise ValidationError(f"flat {flat.shape} / dark {dark.shape} do not match detector {raw.shape[1:]}")
    span = flat - dark
    if np.any(span <= 0):
        raise ValidationError("flat field must exceed dark field at every pixel")
    numerator = raw - dark[None]
    transmission = np.where(numerator > 0, numerator / span[None], MIN_TRANSMISSION)
    transmission = np.clip(transmission, MIN_TRANSMISSION, MAX_TRANSMISSION_CAP)
    if angles is None:
        angles = equispaced_angles(raw.shape[0])
    return ProjectionStack(-np.log(transmission), angles)


def simulate_raw_counts(p: ProjectionStack, I0: float, rng: Rng, n_flats: int = 10, n_darks: int = 10,
                        dark_level: float = 0.0) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
    """
    Simulate a detector acquisition of p: raw counts Poisson(I0 * exp(-p) + dark)
    plus separate noisy flat and dark frames, so that flat_field_correct
    recovers p up to noise.
    """
    if not I0 > 0:
        raise ValidationError(f"I0 must be > 0, got {I0}")
    if dark_level < 0:
        raise ValidationError(f"dark_level must be >= 0, got {dark_level}")
    if n_flats < 1 or n_darks < 1:
        raise ValidationError(f"need at least one flat and one dark, got {n_flats} / {n_darks}")
    gen = rng.generator
    detector = p.shape[1:]
    raw = gen.poisson(I0 * np.exp(-p.data) + dark_level).astype(np.float64)
    flats = [gen.poisson(np.full(detector, I0 + dark_level)).astype(np.float64) for _ in range(n_flats)]
    darks = [gen.poisson(np.full(detector, dark_level)).astype(np.float64) for _ in range(n_darks)]
    logger.debug(f"Simulated raw counts {raw.shape} with {n_flats} flats and {n_darks} darks")
    return raw, flats, darks
