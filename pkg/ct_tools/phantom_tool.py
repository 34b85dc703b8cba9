#!/usr/bin/env python3
"""
Foam phantom tool
Desk-scale cylinder foam: a solid cylinder along the slice axis with
non-overlapping spherical bubbles placed by rejection sampling.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Tuple

import numpy as np

from ct_tools.datamodel import Rng, ValidationError, Volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoamSpec:
    """Parameters of one foam phantom; Z = Y = X = size."""

    size: int = 128
    bubbles: int = 300
    r_min: float = 2.0
    r_max: float = 8.0
    cylinder_fraction: float = 0.95
    max_attempts: int = 100000
    seed: int = 0

    def validate(self) -> "FoamSpec":
        if self.size < 8:
            raise ValidationError(f"phantom.size must be >= 8, got {self.size}")
        if self.bubbles < 0:
            raise ValidationError(f"phantom.bubbles must be >= 0, got {self.bubbles}")
        if not 0 < self.r_min <= self.r_max < self.size / 4:
            raise ValidationError(
                f"phantom radii must satisfy 0 < r_min <= r_max < size/4, got [{self.r_min}, {self.r_max}]"
            )
        if not 0 < self.cylinder_fraction <= 1:
            raise ValidationError(f"phantom.cylinder_fraction must be in (0, 1], got {self.cylinder_fraction}")
        if self.max_attempts < 1:
            raise ValidationError(f"phantom.max_attempts must be >= 1, got {self.max_attempts}")
        return self

    @property
    def cylinder_radius(self) -> float:
        return self.cylinder_fraction * self.size / 2.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def place_bubbles(spec: FoamSpec) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Rejection-sample non-overlapping bubbles inside the cylinder.

    Returns:
        (centers (k, 3) as z, y, x voxel coordinates, radii (k,), shortfall)
        where shortfall = spec.bubbles - k.
    """
    spec.validate()
    rng = Rng(spec.seed).generator
    n = spec.size
    c = (n - 1) / 2.0
    cyl = spec.cylinder_radius
    log_lo, log_hi = math.log(spec.r_min), math.log(spec.r_max)

    centers = np.empty((spec.bubbles, 3), dtype=np.float64)
    radii = np.empty(spec.bubbles, dtype=np.float64)
    count = 0
    attempts = 0
    while count < spec.bubbles and attempts < spec.max_attempts:
        attempts += 1
        r = math.exp(rng.uniform(log_lo, log_hi))
        if r >= cyl:
            continue
        # uniform in the disk of radius cyl - r so the sphere stays inside
        rho = (cyl - r) * math.sqrt(rng.uniform(0.0, 1.0))
        phi = rng.uniform(0.0, 2.0 * math.pi)
        zc = rng.uniform(r, n - 1 - r)
        cand = np.array([zc, c + rho * math.sin(phi), c + rho * math.cos(phi)])
        if count:
            dist = np.sqrt(np.sum((centers[:count] - cand) ** 2, axis=1))
            if np.any(dist <= radii[:count] + r):
                continue
        centers[count] = cand
        radii[count] = r
        count += 1

    shortfall = spec.bubbles - count
    if shortfall:
        logger.warning(f"Placed {count} of {spec.bubbles} bubbles after {attempts} attempts")
    return centers[:count].copy(), radii[:count].copy(), shortfall


def rasterize_foam(spec: FoamSpec, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Binary (size, size, size) array: 1 inside the cylinder, 0 outside and inside bubbles."""
    n = spec.size
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n]
    disk = (yy - c) ** 2 + (xx - c) ** 2 <= spec.cylinder_radius ** 2
    vol = np.repeat(disk[None, :, :], n, axis=0).astype(np.float64)

    for (zc, yc, xc), r in zip(centers, radii):
        z0, z1 = max(0, int(math.floor(zc - r))), min(n, int(math.ceil(zc + r)) + 1)
        y0, y1 = max(0, int(math.floor(yc - r))), min(n, int(math.ceil(yc + r)) + 1)
        x0, x1 = max(0, int(math.floor(xc - r))), min(n, int(math.ceil(xc + r)) + 1)
        zz, by, bx = np.ogrid[z0:z1, y0:y1, x0:x1]
        inside = (zz - zc) ** 2 + (by - yc) ** 2 + (bx - xc) ** 2 <= r * r
        vol[z0:z1, y0:y1, x0:x1][inside] = 0.0
    return vol


def build_foam(spec: FoamSpec) -> Tuple[Volume, Dict[str, int]]:
    """
    Generate the binary foam volume for spec plus a placement report
    {"requested", "placed", "shortfall"}; deterministic under spec.seed.
    """
    centers, radii, shortfall = place_bubbles(spec)
    vol = rasterize_foam(spec, centers, radii)
    logger.info(f"Generated foam phantom {vol.shape} with {len(radii)} bubbles (shortfall {shortfall})")
    report = {"requested": spec.bubbles, "placed": int(len(radii)), "shortfall": int(shortfall)}
    return Volume(vol), report


def generate_foam(spec: FoamSpec) -> Volume:
    """Volume-only form of build_foam."""
    return build_foam(spec)[0]


if __name__ == "__main__":
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    phantom = generate_foam(FoamSpec(size=64, bubbles=60, r_min=2, r_max=6, seed=7))
    print(phantom, "fill fraction", float(phantom.data.mean()))
