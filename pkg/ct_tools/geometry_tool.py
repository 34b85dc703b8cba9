#!/usr/bin/env python3
"""
Parallel-beam geometry tool
Rearrangement between projection and sinogram layouts, a slice-driven
ray-sum forward projector, per-slice filtered backprojection, angle subsampling,
sinogram upsampling along the angle axis and the circular slice mask.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from ct_tools.datamodel import (
    ProjectionStack,
    SinogramStack,
    ValidationError,
    Volume,
    inscribed_circle,
)

logger = logging.getLogger(__name__)

# Sinograms filtered per chunk of detector rows to bound FFT memory
FILTER_CHUNK_ROWS = 16
# Filtered rows are resampled this many times finer before backprojection
BACKPROJECT_OVERSAMPLE = 4


def equispaced_angles(n_theta: int) -> np.ndarray:
    """n_theta angles equally distributed over [0, pi)."""
    if n_theta < 1:
        raise ValidationError(f"n_theta must be >= 1, got {n_theta}")
    return np.arange(n_theta, dtype=np.float64) * (math.pi / n_theta)


@dataclass(frozen=True)
class ParallelGeometry:
    """Parallel-beam scan: angles plus an M x N detector with unit pixel pitch."""

    angles: Tuple[float, ...]
    detector_cols: int
    detector_rows: int

    def __post_init__(self):
        if self.detector_cols < 1 or self.detector_rows < 1:
            raise ValidationError(
                f"detector must be at least 1x1, got rows={self.detector_rows} cols={self.detector_cols}"
            )
        if len(self.angles) < 1:
            raise ValidationError("geometry needs at least one angle")
        ang = np.asarray(self.angles)
        if ang[0] < 0 or ang[-1] >= math.pi or np.any(np.diff(ang) <= 0):
            raise ValidationError("geometry angles must be strictly increasing within [0, pi)")

    @classmethod
    def equispaced(cls, n_theta: int, detector_cols: int, detector_rows: Optional[int] = None) -> "ParallelGeometry":
        rows = detector_cols if detector_rows is None else detector_rows
        return cls(tuple(float(a) for a in equispaced_angles(n_theta)), int(detector_cols), int(rows))

    @property
    def n_theta(self) -> int:
        return len(self.angles)

    def angle_array(self) -> np.ndarray:
        return np.asarray(self.angles, dtype=np.float64)

    def is_equispaced(self) -> bool:
        return bool(np.allclose(self.angle_array(), equispaced_angles(self.n_theta), rtol=0, atol=1e-9))

    def with_angles(self, angles: Sequence[float]) -> "ParallelGeometry":
        return ParallelGeometry(tuple(float(a) for a in angles), self.detector_cols, self.detector_rows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_theta": self.n_theta,
            "angles": list(self.angles),
            "detector_cols": self.detector_cols,
            "detector_rows": self.detector_rows,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ParallelGeometry":
        try:
            return cls(tuple(float(a) for a in raw["angles"]), int(raw["detector_cols"]), int(raw["detector_rows"]))
        except KeyError as e:
            raise ValidationError(f"geometry description lacks field {e.args[0]!r}") from e


def rearrange(p: ProjectionStack) -> SinogramStack:
    """(angle, row, column) -> (row, angle, column)."""
    return SinogramStack(np.transpose(p.data, (1, 0, 2)), p.angles)


def rearrange_inverse(s: SinogramStack) -> ProjectionStack:
    """(row, angle, column) -> (angle, row, column)."""
    return ProjectionStack(np.transpose(s.data, (1, 0, 2)), s.angles)


def _ray_matrix(theta: float, n: int) -> sparse.csr_matrix:
    """
    Sparse (n detector bins) x (n*n pixels) ray-sum operator for one angle.

    Slice-driven: the ray of detector bin t, (x-c)cos + (y-c)sin = t, is
    sampled once per pixel row, or once per pixel column when it runs
    closer to the x axis. Each sample interpolates linearly between the two
    neighbouring pixels of that row/column and is weighted by the path
    length per step, so a vertical ray is an exact column sum.
    """
    c = (n - 1) / 2.0
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    t = np.arange(n, dtype=np.float64) - c
    step = np.arange(n, dtype=np.float64) - c
    by_rows = abs(cos_t) >= abs(sin_t)
    if by_rows:
        pos = c + (t[:, None] - step[None, :] * sin_t) / cos_t
        length = 1.0 / abs(cos_t)
    else:
        pos = c + (t[:, None] - step[None, :] * cos_t) / sin_t
        length = 1.0 / abs(sin_t)
    bins = np.broadcast_to(np.arange(n)[:, None], pos.shape)
    steps = np.broadcast_to(np.arange(n)[None, :], pos.shape)

    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo

    rows, cols, vals = [], [], []
    for d, w in ((0, 1.0 - frac), (1, frac)):
        at = lo + d
        ok = (at >= 0) & (at < n) & (w > 0)
        rows.append(bins[ok])
        cols.append(steps[ok] * n + at[ok] if by_rows else at[ok] * n + steps[ok])
        vals.append(length * w[ok])
    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n * n)
    ).tocsr()


def _backprojection_matrix(theta: float, n: int, oversample: int = 1) -> sparse.csr_matrix:
    """
    Sparse (n*n pixels) x (n*oversample fine bins) linear-interpolation operator for one angle.

    Fine bin i sits at detector position i / oversample.
    """
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    pos = ((xx - c) * math.cos(theta) + (yy - c) * math.sin(theta) + c).ravel() * oversample
    t0 = np.floor(pos).astype(np.int64)
    w1 = pos - t0
    pixel = np.arange(n * n)
    width = n * oversample

    rows, cols, vals = [], [], []
    for dt, w in ((0, 1.0 - w1), (1, w1)):
        ti = t0 + dt
        ok = (ti >= 0) & (ti < width) & (w > 0)
        rows.append(pixel[ok])
        cols.append(ti[ok])
        vals.append(w[ok])
    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, width)
    ).tocsr()


def forward_project(v: Volume, g: ParallelGeometry) -> ProjectionStack:
    """
    Discrete parallel-beam line integrals of every slice.

    Args:
        v: volume with square (N, N) slices, N == g.detector_cols.
        g: geometry; detector row m images slice z = m.

    Returns:
        ProjectionStack shaped (n_theta, Z, N) on g's angles.
    """
    z, ny, nx = v.shape
    n = g.detector_cols
    if ny != nx:
        raise ValidationError(f"forward_project needs square slices, got {ny}x{nx}")
    if nx != n:
        raise ValidationError(f"volume width {nx} != detector_cols {n}")
    if z != g.detector_rows:
        raise ValidationError(f"volume has {z} slices but geometry has {g.detector_rows} detector rows")

    flat = v.data.reshape(z, n * n).T
    out = np.empty((g.n_theta, z, n), dtype=np.float64)
    for a, theta in enumerate(g.angles):
        out[a] = (_ray_matrix(theta, n) @ flat).T
    logger.debug(f"Forward projected {v.shape} over {g.n_theta} angles")
    return ProjectionStack(out, g.angles)


def ramp_filter(n: int) -> np.ndarray:
    """
    Ram-Lak frequency response for rows of n detector bins.

    Returns the rfft-domain response of length P//2 + 1, where P is the next
    power of two >= 2n.
    """
    size = int(2 ** math.ceil(math.log2(2 * n)))
    k = np.concatenate((np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)))
    kernel = np.zeros(size)
    kernel[0] = 0.25
    kernel[1::2] = -1.0 / (math.pi * k) ** 2
    return np.real(np.fft.fft(kernel))[: size // 2 + 1]


def filter_sinograms(data: np.ndarray, oversample: int = 1) -> np.ndarray:
    """
    Ramp-filter every detector row (last axis) of an array such as (M, n_theta, N).

    With oversample > 1 the filtered rows come back band-limited
    interpolated onto oversample * N points, point i at detector position
    i / oversample; every oversample-th point equals the plain filtered value.
    """
    if oversample < 1:
        raise ValidationError(f"oversample must be >= 1, got {oversample}")
    n = data.shape[-1]
    response = ramp_filter(n)
    size = 2 * (response.size - 1)
    fine = size * oversample
    out = np.empty(data.shape[:-1] + (n * oversample,), dtype=np.float64)
    for start in range(0, data.shape[0], FILTER_CHUNK_ROWS):
        chunk = data[start:start + FILTER_CHUNK_ROWS]
        spectrum = np.fft.rfft(chunk, n=size, axis=-1) * response
        if oversample > 1:
            padded = np.zeros(spectrum.shape[:-1] + (fine // 2 + 1,), dtype=spectrum.dtype)
            padded[..., : size // 2 + 1] = spectrum
            # the coarse Nyquist bin is split between +/- frequencies of the finer grid
            padded[..., size // 2] *= 0.5
            spectrum = padded
        rows = np.fft.irfft(spectrum, n=fine, axis=-1)[..., : n * oversample]
        out[start:start + FILTER_CHUNK_ROWS] = rows * oversample
    return out


def fbp(s: SinogramStack, g: ParallelGeometry) -> Volume:
    """
    Filtered backprojection of each of the M sinograms.

    Rows are ramp-filtered, resampled BACKPROJECT_OVERSAMPLE times finer,
    backprojected with linear detector interpolation and scaled by
    pi / n_theta. Output is unmasked.
    """
    m, n_theta, n = s.shape
    if n_theta < 2:
        raise ValidationError(f"fbp needs at least 2 angles, got {n_theta}")
    if n < 8:
        raise ValidationError(f"fbp needs at least 8 detector columns, got {n}")
    if n != g.detector_cols or n_theta != g.n_theta:
        raise ValidationError(
            f"sinogram {s.shape} does not match geometry (n_theta={g.n_theta}, cols={g.detector_cols})"
        )
    if not np.allclose(s.angles, g.angle_array(), rtol=0, atol=1e-9):
        raise ValidationError("sinogram angles differ from geometry angles")

    recon = np.zeros((n * n, m), dtype=np.float64)
    for a, theta in enumerate(g.angles):
        filtered = filter_sinograms(s.data[:, a, :], BACKPROJECT_OVERSAMPLE)
        recon += _backprojection_matrix(theta, n, BACKPROJECT_OVERSAMPLE) @ filtered.T
    recon *= math.pi / n_theta
    logger.debug(f"FBP reconstructed {m} slices from {n_theta} angles")
    return Volume(recon.T.reshape(m, n, n))


def subsample_angles(p: ProjectionStack, factor: int) -> ProjectionStack:
    """Keep every factor-th projection starting at index 0."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValidationError(f"subsample factor must be a positive integer, got {factor!r}")
    if p.n_theta % factor:
        raise ValidationError(f"subsample factor {factor} does not divide n_theta={p.n_theta}")
    return ProjectionStack(p.data[::factor], p.angles[::factor])


def upsample_sinogram(s: SinogramStack, target_rows: int) -> SinogramStack:
    """
    Linear interpolation along the angle axis onto target_rows equispaced angles.

    Both grids are equispaced over [0, pi). Target angles past the last
    source angle interpolate towards the first source row mirrored along
    the detector axis, since a parallel-beam view at theta + pi is the
    view at theta flipped.
    """
    n_theta = s.n_theta
    if target_rows < n_theta:
        raise ValidationError(f"target_rows={target_rows} is smaller than n_theta={n_theta}")
    if not np.allclose(s.angles, equispaced_angles(n_theta), rtol=0, atol=1e-9):
        raise ValidationError("upsample_sinogram needs equispaced source angles over [0, pi)")
    if target_rows == n_theta:
        return SinogramStack(s.data, s.angles)

    src = s.data
    wrapped = np.concatenate([src, src[:, :1, ::-1]], axis=1)
    pos = np.arange(target_rows, dtype=np.float64) * n_theta / target_rows
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    a = wrapped[:, lo, :]
    b = wrapped[:, lo + 1, :]
    out = a + frac[None, :, None] * (b - a)
    return SinogramStack(out, equispaced_angles(target_rows))


def circular_mask(v: Volume) -> Volume:
    """Zero the voxels outside the inscribed circle of every slice."""
    _, ny, nx = v.shape
    if ny != nx:
        raise ValidationError(f"circular_mask needs square slices, got {ny}x{nx}")
    keep = inscribed_circle(ny, nx)
    return Volume(np.where(keep[None, :, :], v.data, 0.0), mask_applied=True)


def reconstruct(p: ProjectionStack, g: Optional[ParallelGeometry] = None) -> Volume:
    """mask(fbp(rearrange(p))) on p's own angles."""
    if g is None:
        g = ParallelGeometry(tuple(float(a) for a in p.angles), p.shape[2], p.shape[1])
    return circular_mask(fbp(rearrange(p), g))


def reconstruct_sinograms(s: SinogramStack) -> Volume:
    """mask(fbp(s)) on s's own angles."""
    g = ParallelGeometry(tuple(float(a) for a in s.angles), s.shape[2], s.shape[0])
    return circular_mask(fbp(s, g))
