"""
Image-to-image regressor: a plain stack of same-size convolutions with
rectifiers on the hidden layers and an optional residual connection to
input channel 0. Includes versioned checkpoints.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from ct_tools.datamodel import CorruptFileError, PersistenceError, Rng, ValidationError
from ct_tools.regressor.layers import ConvCache, conv2d_backward, conv2d_forward, relu_backward, relu_forward

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TSRG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class RegressorSpec:
    """Architecture of one regressor."""

    in_channels: int = 1
    hidden_layers: int = 4
    width: int = 16
    kernel: int = 3
    residual: bool = True

    def validate(self) -> "RegressorSpec":
        if not 1 <= self.in_channels <= 3:
            raise ValidationError(f"regressor.in_channels must be 1-3, got {self.in_channels}")
        if self.hidden_layers < 1:
            raise ValidationError(f"regressor.hidden_layers must be >= 1, got {self.hidden_layers}")
        if self.width < 1:
            raise ValidationError(f"regressor.width must be >= 1, got {self.width}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError(f"regressor.kernel must be odd, got {self.kernel}")
        return self

    def layer_shapes(self) -> List[Tuple[int, int, int, int]]:
        channels = [self.in_channels] + [self.width] * self.hidden_layers + [1]
        return [(c_out, c_in, self.kernel, self.kernel) for c_in, c_out in zip(channels[:-1], channels[1:])]

    def parameter_count(self) -> int:
        """Closed form: sum over layers of C_out * C_in * k^2 + C_out."""
        k2 = self.kernel ** 2
        c, w, h = self.in_channels, self.width, self.hidden_layers
        return (c * w * k2 + w) + (h - 1) * (w * w * k2 + w) + (w * k2 + 1)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def match_width(target_params: int, in_channels: int = 1, hidden_layers: int = 4, kernel: int = 3) -> int:
    """Width whose parameter count is closest to target_params (first such width on ties)."""
    if target_params < 1:
        raise ValidationError(f"target parameter count must be positive, got {target_params}")
    best_width, best_gap = 1, math.inf
    width = 1
    while True:
        count = RegressorSpec(in_channels, hidden_layers, width, kernel).parameter_count()
        gap = abs(count - target_params)
        if gap < best_gap:
            best_width, best_gap = width, gap
        if count > target_params:
            break
        width += 1
    return best_width


@dataclass
class RegressorModel:
    """Weights, normalisation statistics and training history of one regressor."""

    spec: RegressorSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    history: Dict[str, Any] = field(default_factory=lambda: {"epochs": []})

    def copy(self) -> "RegressorModel":
        return RegressorModel(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.mean.copy(),
            self.std.copy(),
            json.loads(json.dumps(self.history)),
        )

    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights) + sum(b.size for b in self.biases))

    def validate(self) -> "RegressorModel":
        shapes = self.spec.layer_shapes()
        if [w.shape for w in self.weights] != shapes:
            raise ValidationError(f"weight shapes {[w.shape for w in self.weights]} do not match spec {shapes}")
        if [b.shape for b in self.biases] != [(s[0],) for s in shapes]:
            raise ValidationError("bias shapes do not match spec")
        for arr in self.weights + self.biases:
            if not np.all(np.isfinite(arr)):
                raise ValidationError("model weights contain non-finite values")
        if self.mean.shape != (self.spec.in_channels,) or self.std.shape != (self.spec.in_channels,):
            raise ValidationError("normalisation statistics do not match in_channels")
        if not np.all(self.std > 0):
            raise ValidationError("normalisation std must be > 0")
        return self


def init_model(spec: RegressorSpec, seed: int = 0) -> RegressorModel:
    """
    Kaiming-scaled normal weights on hidden layers, zero final layer.

    With residual on, the fresh model is the exact identity on channel 0.
    """
    spec.validate()
    gen = Rng(seed).generator
    shapes = spec.layer_shapes()
    weights, biases = [], []
    for index, shape in enumerate(shapes):
        c_out, c_in, k, _ = shape
        if index == len(shapes) - 1:
            weights.append(np.zeros(shape))
        else:
            weights.append(gen.normal(0.0, math.sqrt(2.0 / (c_in * k * k)), size=shape))
        biases.append(np.zeros(c_out))
    return RegressorModel(
        spec, weights, biases,
        mean=np.zeros(spec.in_channels), std=np.ones(spec.in_channels),
    )


def normalize_input(model: RegressorModel, image: np.ndarray) -> np.ndarray:
    return (image - model.mean[:, None, None]) / model.std[:, None, None]


def network_forward(model: RegressorModel, x: np.ndarray, keep: bool = False
                    ) -> Tuple[np.ndarray, List[Tuple[ConvCache, Optional[np.ndarray]]]]:
    """Run the conv stack on a normalised (C, H, W) input; returns (1, H, W) and caches."""
    caches = []
    h = x
    last = len(model.weights) - 1
    for index, (w, b) in enumerate(zip(model.weights, model.biases)):
        h, cache = conv2d_forward(h, w, b)
        if index < last:
            h = relu_forward(h)
            caches.append((cache, h) if keep else (None, None))
        else:
            caches.append((cache, None) if keep else (None, None))
    return h, caches


def network_backward(model: RegressorModel, grad_out: np.ndarray,
                     caches: List[Tuple[ConvCache, Optional[np.ndarray]]]
                     ) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
    """Gradients of every weight and bias plus the input gradient."""
    grads_w: List[np.ndarray] = [None] * len(model.weights)  # type: ignore
    grads_b: List[np.ndarray] = [None] * len(model.biases)  # type: ignore
    g = grad_out
    for index in range(len(model.weights) - 1, -1, -1):
        cache, activated = caches[index]
        if activated is not None:
            g = relu_backward(g, activated)
        gw, gb, g = conv2d_backward(g, cache)
        grads_w[index] = gw
        grads_b[index] = gb
    return grads_w, grads_b, g


def denormalize_output(model: RegressorModel, image: np.ndarray, net_out: np.ndarray) -> np.ndarray:
    if model.spec.residual:
        return image[:1] + net_out * model.std[0]
    return net_out * model.std[0] + model.mean[0]


def normalized_target(model: RegressorModel, image: np.ndarray, target: np.ndarray) -> np.ndarray:
    """The network-output value that denormalize_output maps onto target."""
    if model.spec.residual:
        return (target - image[:1]) / model.std[0]
    return (target - model.mean[0]) / model.std[0]


def predict(model: RegressorModel, image: np.ndarray) -> np.ndarray:
    """Apply the regressor to a (C, H, W) input; returns (1, H, W)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != model.spec.in_channels:
        raise ValidationError(
            f"predict expects ({model.spec.in_channels}, H, W) input, got shape {image.shape}"
        )
    net_out, _ = network_forward(model, normalize_input(model, image))
    return denormalize_output(model, image, net_out)


def predict_stack(model: RegressorModel, channels: List[np.ndarray]) -> np.ndarray:
    """
    Apply the regressor image by image to stacks of shape (K, H, W).

    channels holds one (K, H, W) stack per input channel; returns (K, H, W).
    """
    if len(channels) != model.spec.in_channels:
        raise ValidationError(f"model expects {model.spec.in_channels} channel stacks, got {len(channels)}")
    shape = channels[0].shape
    if any(c.shape != shape for c in channels):
        raise ValidationError(f"channel stacks differ in shape: {[c.shape for c in channels]}")
    out = np.empty(shape, dtype=np.float64)
    for k in range(shape[0]):
        out[k] = predict(model, np.stack([c[k] for c in channels]))[0]
    return out


def save_model(model: RegressorModel, path: Union[str, Path]) -> Path:
    """
    Write a checkpoint: magic, version, JSON header, then float64 LE payload
    (mean, std, then weight and bias of each layer).
    """
    model.validate()
    header = json.dumps(
        {"spec": model.spec.to_dict(), "history": model.history, "layers": [list(s) for s in model.spec.layer_shapes()]},
        sort_keys=True,
    ).encode("utf-8")
    arrays = [model.mean, model.std]
    for w, b in zip(model.weights, model.biases):
        arrays.extend([w, b])
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise PersistenceError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Saved regressor checkpoint ({model.parameter_count()} parameters) to {path}")
    return path


def load_model(path: Union[str, Path]) -> RegressorModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise PersistenceError(f"checkpoint not found: {path}") from e
    except OSError as e:
        raise PersistenceError(f"cannot read checkpoint {path}: {e}") from e

    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptFileError(f"{path}: not a regressor checkpoint")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CorruptFileError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
        spec = RegressorSpec(**header["spec"]).validate()
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
        raise CorruptFileError(f"{path}: bad checkpoint header: {e}") from e
    if [tuple(s) for s in header.get("layers", [])] != spec.layer_shapes():
        raise CorruptFileError(f"{path}: layer table does not match spec")

    sizes = [spec.in_channels, spec.in_channels]
    for s in spec.layer_shapes():
        sizes.extend([int(np.prod(s)), s[0]])
    payload = blob[12 + header_len:]
    if len(payload) != 8 * sum(sizes):
        raise CorruptFileError(f"{path}: payload has {len(payload)} bytes, expected {8 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    parts, offset = [], 0
    for n in sizes:
        parts.append(flat[offset:offset + n].copy())
        offset += n

    shapes = spec.layer_shapes()
    weights = [parts[2 + 2 * i].reshape(shapes[i]) for i in range(len(shapes))]
    biases = [parts[3 + 2 * i] for i in range(len(shapes))]
    model = RegressorModel(spec, weights, biases, parts[0], parts[1], header.get("history", {"epochs": []}))
    try:
        return model.validate()
    except ValidationError as e:
        raise CorruptFileError(f"{path}: {e}") from e
