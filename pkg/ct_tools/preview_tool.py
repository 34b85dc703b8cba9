#!/usr/bin/env python3
"""
Preview tool
8-bit PGM/PNG snapshots of projections, sinograms and slices for quick
visual checks. The min/max window is stored next to each image; previews
are never read back for metrics.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
from PIL import Image

from ct_tools.datamodel import PersistenceError, ValidationError

logger = logging.getLogger(__name__)

PREVIEW_FORMATS = ("pgm", "png")


def to_uint8(image: Any) -> tuple:
    """Window image to its own [min, max] and quantise; returns (uint8 image, (lo, hi))."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"preview needs a 2-D image, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(img)
    return scaled.astype(np.uint8), (lo, hi)


def save_preview(image: Any, path: Union[str, Path], label: str = "") -> Path:
    """Write image as 8-bit grayscale; the format follows the file suffix."""
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    if fmt not in PREVIEW_FORMATS:
        raise ValidationError(f"preview format must be one of {PREVIEW_FORMATS}, got {path.suffix!r}")
    pixels, (lo, hi) = to_uint8(image)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path, format="PPM" if fmt == "pgm" else "PNG")
        path.with_name(path.name + ".json").write_text(
            json.dumps({"window": [lo, hi], "label": label, "shape": list(pixels.shape)}, indent=2),
            encoding="utf-8",
        )
    except OSError as e:
        raise PersistenceError(f"cannot write preview {path}: {e}") from e
    logger.debug(f"Preview {label or path.name} saved to {path} (window {lo:.4g}..{hi:.4g})")
    return path


def write_previews(images: Dict[str, Any], out_dir: Union[str, Path],
                   formats: Sequence[str] = ("pgm",)) -> List[Path]:
    """Save the middle 2-D image of every named 3-axis stack in each requested format."""
    out_dir = Path(out_dir)
    written = []
    for name, stack in images.items():
        data = stack.data if hasattr(stack, "data") else np.asarray(stack)
        middle = data[data.shape[0] // 2]
        for fmt in formats:
            written.append(save_preview(middle, out_dir / f"{name}.{fmt}", label=name))
    logger.info(f"Wrote {len(written)} previews to {out_dir}")
    return written
