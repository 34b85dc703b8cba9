"""
Same-size 2-D convolution with reflect padding, forward and backward.
"""

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ct_tools.datamodel import ValidationError


class ConvCache:
    """Inputs kept by conv2d_forward for the backward pass."""

    __slots__ = ("windows", "weights", "input_shape")

    def __init__(self, windows: np.ndarray, weights: np.ndarray, input_shape: Tuple[int, int, int]):
        self.windows = windows
        self.weights = weights
        self.input_shape = input_shape


def _check_shapes(image: np.ndarray, weights: np.ndarray, biases: np.ndarray) -> int:
    if image.ndim != 3:
        raise ValidationError(f"conv2d expects a (C, H, W) image, got shape {image.shape}")
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3] or weights.shape[2] % 2 == 0:
        raise ValidationError(f"conv2d weights must be (C_out, C_in, k, k) with odd k, got {weights.shape}")
    if weights.shape[1] != image.shape[0]:
        raise ValidationError(f"conv2d: weights expect {weights.shape[1]} channels, image has {image.shape[0]}")
    if biases.shape != (weights.shape[0],):
        raise ValidationError(f"conv2d: bias shape {biases.shape} != ({weights.shape[0]},)")
    pad = weights.shape[2] // 2
    if image.shape[1] <= pad or image.shape[2] <= pad:
        raise ValidationError(f"conv2d: image {image.shape[1:]} too small for reflect padding of {pad}")
    return pad


def conv2d_forward(image: np.ndarray, weights: np.ndarray, biases: np.ndarray) -> Tuple[np.ndarray, ConvCache]:
    """
    Cross-correlate image (C, H, W) with weights (C', C, k, k) plus bias.

    Returns:
        (output (C', H, W), cache for conv2d_backward)
    """
    pad = _check_shapes(image, weights, biases)
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    windows = sliding_window_view(padded, weights.shape[2:], axis=(1, 2))  # (C, H, W, k, k)
    out = np.tensordot(weights, windows, axes=([1, 2, 3], [0, 3, 4]))  # (C', H, W)
    out += biases[:, None, None]
    return out, ConvCache(windows, weights, image.shape)


def conv2d_backward(grad_out: np.ndarray, cache: ConvCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact gradients of conv2d_forward.

    Returns:
        (grad_weights (C', C, k, k), grad_bias (C',), grad_input (C, H, W))
    """
    weights = cache.weights
    c_in, h, w = cache.input_shape
    k = weights.shape[2]
    pad = k // 2
    if grad_out.shape != (weights.shape[0], h, w):
        raise ValidationError(f"conv2d_backward: grad_out {grad_out.shape} != {(weights.shape[0], h, w)}")

    grad_weights = np.tensordot(grad_out, cache.windows, axes=([1, 2], [1, 2]))  # (C', C, k, k)
    grad_bias = grad_out.sum(axis=(1, 2))

    grad_padded = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            grad_padded[:, i:i + h, j:j + w] += np.tensordot(weights[:, :, i, j], grad_out, axes=([0], [0]))

    # fold the reflected border back onto the pixels it mirrors
    for q in range(1, pad + 1):
        grad_padded[:, :, pad + q] += grad_padded[:, :, pad - q]
        grad_padded[:, :, pad + w - 1 - q] += grad_padded[:, :, pad + w - 1 + q]
    grad_padded = grad_padded[:, :, pad:pad + w]
    for q in range(1, pad + 1):
        grad_padded[:, pad + q, :] += grad_padded[:, pad - q, :]
        grad_padded[:, pad + h - 1 - q, :] += grad_padded[:, pad + h - 1 + q, :]
    grad_input = grad_padded[:, pad:pad + h, :]
    return grad_weights, grad_bias, np.ascontiguousarray(grad_input)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, activated: np.ndarray) -> np.ndarray:
    return grad_out * (activated > 0.0)
