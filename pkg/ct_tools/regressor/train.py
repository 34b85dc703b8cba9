"""
Training loop for the image-to-image regressor: Adam on mean squared
error, one full image per step, dihedral augmentation, best-validation
weights with patience and wall-clock stopping.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ct_tools.datamodel import NumericError, Rng, ValidationError
from ct_tools.regressor.model import (
    RegressorModel,
    denormalize_output,
    network_backward,
    network_forward,
    normalize_input,
    normalized_target,
)

logger = logging.getLogger(__name__)

Pair = Tuple[np.ndarray, np.ndarray]

# The eight symmetries of the square
AUGMENT_MODES = (
    "identity",
    "hflip",
    "vflip",
    "rot90",
    "rot180",
    "rot270",
    "transpose",
    "antitranspose",
)
ROTATING_MODES = frozenset({"rot90", "rot270", "transpose", "antitranspose"})

STOP_EPOCHS = "epochs"
STOP_PATIENCE = "patience"
STOP_TIME = "wall-clock"


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol for one regressor."""

    epochs: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    time_budget: float = 600.0
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    validation_fraction: float = 0.2
    samples_per_epoch: Optional[int] = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ValidationError(f"train.epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValidationError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError(f"train.beta1/beta2 must be in [0, 1), got {self.beta1}/{self.beta2}")
        if not self.eps > 0:
            raise ValidationError(f"train.eps must be > 0, got {self.eps}")
        if self.patience < 1:
            raise ValidationError(f"train.patience must be >= 1, got {self.patience}")
        if not self.time_budget > 0:
            raise ValidationError(f"train.time_budget must be > 0, got {self.time_budget}")
        if not 0 < self.validation_fraction < 1:
            raise ValidationError(f"train.validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            raise ValidationError(f"train.samples_per_epoch must be >= 1, got {self.samples_per_epoch}")
        return self

    def allowed_modes(self) -> List[str]:
        """Dihedral modes reachable from the enabled toggles."""
        modes = ["identity"]
        if self.hflip:
            modes.append("hflip")
        if self.vflip:
            modes.append("vflip")
        if self.hflip and self.vflip:
            modes.append("rot180")
        if self.rotate:
            modes.extend(["rot90", "rot180", "rot270"])
            if self.hflip or self.vflip:
                modes.extend(["transpose", "antitranspose"])
        return [m for m in AUGMENT_MODES if m in modes]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _transform(image: np.ndarray, mode: str) -> np.ndarray:
    if mode == "identity":
        out = image
    elif mode == "hflip":
        out = image[..., ::-1]
    elif mode == "vflip":
        out = image[..., ::-1, :]
    elif mode == "rot90":
        out = np.rot90(image, 1, axes=(-2, -1))
    elif mode == "rot180":
        out = np.rot90(image, 2, axes=(-2, -1))
    elif mode == "rot270":
        out = np.rot90(image, 3, axes=(-2, -1))
    elif mode == "transpose":
        out = np.swapaxes(image, -2, -1)
    elif mode == "antitranspose":
        out = np.swapaxes(image, -2, -1)[..., ::-1, ::-1]
    else:
        raise ValidationError(f"unknown augmentation mode {mode!r}; expected one of {AUGMENT_MODES}")
    return np.ascontiguousarray(out)


def augment(pair: Pair, mode: str) -> Pair:
    """Apply the same dihedral transform to every input channel and to the target."""
    x, t = pair
    if mode in ROTATING_MODES and x.shape[-2] != x.shape[-1]:
        raise ValidationError(f"augmentation {mode!r} needs square images, got {x.shape[-2:]}")
    return _transform(x, mode), _transform(t, mode)


class Adam:
    """Adam with bias correction over a list of parameter arrays, updated in place."""

    def __init__(self, params: List[np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def normalization_stats(inputs: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over all training inputs; a zero std becomes 1."""
    stacked = np.stack([np.asarray(x, dtype=np.float64) for x in inputs])
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return mean, std


def validation_loss(model: RegressorModel, pairs: Sequence[Pair]) -> float:
    """Mean squared error in the denormalised domain, averaged over pairs."""
    losses = []
    for x, t in pairs:
        out, _ = network_forward(model, normalize_input(model, x))
        losses.append(float(np.mean((denormalize_output(model, x, out) - t) ** 2)))
    return float(np.mean(losses))


def _check_pairs(model: RegressorModel, pairs: Sequence[Pair]) -> List[Pair]:
    checked = []
    for i, (x, t) in enumerate(pairs):
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != model.spec.in_channels:
            raise ValidationError(f"pair {i}: input must be ({model.spec.in_channels}, H, W), got {x.shape}")
        if t.shape != (1,) + x.shape[1:]:
            raise ValidationError(f"pair {i}: target must be (1, H, W) matching input, got {t.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
            raise ValidationError(f"pair {i}: non-finite values")
        checked.append((x, t))
    return checked


def split_pairs(n: int, fraction: float, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
    """Shuffled (train, validation) index split with at least one index on each side."""
    n_val = max(1, int(round(fraction * n)))
    if n - n_val < 1:
        raise ValidationError(f"training split is empty: {n} pairs with validation fraction {fraction}")
    order = rng.generator.permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train(model: RegressorModel, pairs: Sequence[Pair], config: TrainConfig
          ) -> Tuple[RegressorModel, Dict[str, Any]]:
    """
    Fit model on (input, target) pairs.

    The input model is left untouched. Returns the best-validation copy and
    its history: per-epoch train/validation loss, best epoch and stop reason.
    """
    config.validate()
    if len(pairs) < 2:
        raise ValidationError(f"train needs at least 2 pairs, got {len(pairs)}")
    pairs = _check_pairs(model, pairs)
    rng = Rng(config.seed)
    train_idx, val_idx = split_pairs(len(pairs), config.validation_fraction, rng.spawn(1))
    train_pairs = [pairs[i] for i in train_idx]
    val_pairs = [pairs[i] for i in val_idx]

    modes = config.allowed_modes()
    if any(m in ROTATING_MODES for m in modes) and train_pairs[0][0].shape[1] != train_pairs[0][0].shape[2]:
        raise ValidationError(f"rotation augmentation needs square images, got {train_pairs[0][0].shape[1:]}")

    work = model.copy()
    work.mean, work.std = normalization_stats([x for x, _ in train_pairs])
    params = work.weights + work.biases
    optimizer = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    shuffle = rng.spawn(2).generator

    best = work.copy()
    best_loss = math.inf
    best_epoch = 0
    stale = 0
    epochs: List[Dict[str, Any]] = []
    stop_reason = STOP_EPOCHS
    started = time.monotonic()
    logger.info(
        f"Training {work.parameter_count()}-parameter regressor on {len(train_pairs)} pairs "
        f"({len(val_pairs)} validation)"
    )

    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(train_pairs))
        if config.samples_per_epoch is not None:
            order = order[: config.samples_per_epoch]
        losses = []
        for i in order:
            mode = modes[int(shuffle.integers(len(modes)))]
            x, t = augment(train_pairs[i], mode)
            out, caches = network_forward(work, normalize_input(work, x), keep=True)
            diff = out - normalized_target(work, x, t)
            losses.append(float(np.mean(diff ** 2)))
            grads_w, grads_b, _ = network_backward(work, 2.0 * diff / diff.size, caches)
            optimizer.step(grads_w + grads_b)

        train_loss = float(np.mean(losses)) if losses else math.nan
        val_loss = validation_loss(work, val_pairs)
        if not math.isfinite(val_loss):
            raise NumericError(f"validation loss became non-finite at epoch {epoch}")
        epochs.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        logger.debug(f"epoch {epoch}: train {train_loss:.6g}, validation {val_loss:.6g}")

        if val_loss < best_loss:
            best_loss, best_epoch, stale = val_loss, epoch, 0
            best = work.copy()
        else:
            stale += 1
            if stale >= config.patience:
                stop_reason = STOP_PATIENCE
                break
        if time.monotonic() - started > config.time_budget:
            stop_reason = STOP_TIME
            logger.warning(f"Training stopped by the {config.time_budget}s wall-clock budget at epoch {epoch}")
            break

    if best_epoch == 0:
        best_loss = validation_loss(best, val_pairs)
    history = {
        "epochs": epochs,
        "best_epoch": best_epoch,
        "best_val_loss": best_loss,
        "stop_reason": stop_reason,
        "train_indices": [int(i) for i in train_idx],
        "val_indices": [int(i) for i in val_idx],
    }
    best.history = history
    logger.info(f"Training finished after {len(epochs)} epochs ({stop_reason}); best epoch {best_epoch}")
    return best, history
