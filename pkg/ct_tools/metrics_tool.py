#!/usr/bin/env python3
"""
Metrics tool
MSE, PSNR and SSIM of reconstructions against a high-quality reference.
PSNR and SSIM constants use the value range of the whole reference volume.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from scipy import ndimage

from ct_tools.datamodel import PersistenceError, ValidationError, Volume

logger = logging.getLogger(__name__)

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CSV_COLUMNS = ("slice", "psnr", "ssim", "mse")
CSV_SCHEMA_VERSION = 1


def _pair(x: Any, ref: Any) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValidationError(f"shape mismatch: {x.shape} vs reference {ref.shape}")
    return x, ref


def value_range(ref: Any) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    return float(ref.max() - ref.min())


def mse(x: Any, ref: Any) -> float:
    x, ref = _pair(x, ref)
    return float(np.mean((x - ref) ** 2))


def psnr(x: Any, ref: Any, data_range: Optional[float] = None) -> float:
    """
    10 log10(range^2 / MSE) in dB.

    data_range defaults to the range of ref; pass the reference volume's range
    when scoring single slices. Identical inputs give math.inf.
    """
    x, ref = _pair(x, ref)
    rng = value_range(ref) if data_range is None else float(data_range)
    if not rng > 0:
        raise ValidationError("psnr: reference range is zero")
    err = float(np.mean((x - ref) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(rng * rng / err)


def ssim(x: Any, ref: Any, data_range: Optional[float] = None, window: int = SSIM_WINDOW,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """
    Mean SSIM over all valid positions of a window x window uniform window.

    Local statistics are population moments; C1 = (k1 R)^2, C2 = (k2 R)^2
    with R the reference range unless data_range is given.
    """
    x, ref = _pair(x, ref)
    if x.ndim != 2:
        raise ValidationError(f"ssim expects 2-D images, got shape {x.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise ValidationError(f"ssim: image {x.shape} smaller than the {window}x{window} window")
    rng = value_range(ref) if data_range is None else float(data_range)
    if not rng > 0:
        raise ValidationError("ssim: reference range is zero")
    c1 = (k1 * rng) ** 2
    c2 = (k2 * rng) ** 2

    def local_mean(img: np.ndarray) -> np.ndarray:
        return ndimage.uniform_filter(img, size=window, mode="reflect")

    mu_x = local_mean(x)
    mu_y = local_mean(ref)
    var_x = local_mean(x * x) - mu_x * mu_x
    var_y = local_mean(ref * ref) - mu_y * mu_y
    cov = local_mean(x * ref) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    half = window // 2
    valid = (slice(half, x.shape[0] - half), slice(half, x.shape[1] - half))
    return float(np.mean(num[valid] / den[valid]))


@dataclass
class MetricReport:
    """Per-slice PSNR/SSIM/MSE of a volume plus their averages."""

    psnr: List[float]
    ssim: List[float]
    mse: List[float]
    data_range: float
    label: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    def summary(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "slices": len(self.psnr),
            "data_range": self.data_range,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "mean_mse": self.mean_mse,
            **self.extra,
        }

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(CSV_COLUMNS)
                for k, (p, s, m) in enumerate(zip(self.psnr, self.ssim, self.mse)):
                    writer.writerow([k, repr(p), repr(s), repr(m)])
        except OSError as e:
            raise PersistenceError(f"cannot write metric table {path}: {e}") from e
        return path

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        doc = {"version": CSV_SCHEMA_VERSION, **self.summary()}
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
        except OSError as e:
            raise PersistenceError(f"cannot write metric summary {path}: {e}") from e
        return path


def evaluate_volume(result: Volume, reference: Volume, label: str = "") -> MetricReport:
    """Score every slice of result against reference using the reference volume's range."""
    if result.shape != reference.shape:
        raise ValidationError(f"result {result.shape} and reference {reference.shape} differ in shape")
    rng = value_range(reference.data)
    if not rng > 0:
        raise ValidationError("evaluate: reference volume is constant, range is zero")
    psnrs, ssims, mses = [], [], []
    for x, ref in zip(result.data, reference.data):
        psnrs.append(psnr(x, ref, data_range=rng))
        ssims.append(ssim(x, ref, data_range=rng))
        mses.append(mse(x, ref))
    report = MetricReport(psnrs, ssims, mses, rng, label)
    logger.info(
        f"Metrics{' ' + label if label else ''}: PSNR {report.mean_psnr:.3f} dB, "
        f"SSIM {report.mean_ssim:.4f}, MSE {report.mean_mse:.6g}"
    )
    return report
