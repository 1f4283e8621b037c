"""Dense float64 array ops with hand-written backward passes.

Tensors are plain numpy ndarrays (row-major, 64-bit). Every operation the
recurrent cells are built from comes as a forward/backward pair so the
whole stack can be verified against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand extents do not line up."""


class BatchSizeError(ValueError):
    """Train-mode batch norm needs at least two rows to estimate variance."""


def as_tensor(values) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(values, dtype=np.float64)


def check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# matmul


def matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Matrix product a @ w for 2-d operands."""
    if a.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {w.shape}")
    if a.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {w.shape}")
    return a @ w


def matmul_backward(grad: np.ndarray, a: np.ndarray, w: np.ndarray):
    """Gradients of ``a @ w`` with respect to both operands."""
    return grad @ w.T, a.T @ grad


# ---------------------------------------------------------------------------
# activations

# Tightest float64 bounds strictly inside (0, 1); saturated sigmoids clip
# here so the open-interval gate contract survives rounding.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function; output strictly inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))  # exponent never positive, so no overflow
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Backward through sigmoid, given its output."""
    return grad * out * (1.0 - out)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the trailing axis; slices sum to 1."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Backward through softmax, given its output."""
    dot = (grad * out).sum(axis=-1, keepdims=True)
    return out * (grad - dot)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNState:
    """Per-channel batch-norm parameters, running statistics and mode.

    In ``train`` mode the transform normalizes with the statistics of the
    current batch and folds them into the running estimates with weight
    ``momentum``; in ``eval`` mode it is a fixed affine map using the
    running statistics and mutates nothing.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self) -> None:
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        shapes = {
            self.gamma.shape,
            self.beta.shape,
            self.running_mean.shape,
            self.running_var.shape,
        }
        if len(shapes) != 1:
            raise ShapeError(f"batch-norm state extents differ: {shapes}")
        if np.any(self.running_var < 0.0):
            raise ValueError("running_var must be nonnegative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def bn_state(
    channels: int,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
    mode: str = "train",
) -> BNState:
    """Fresh state: gamma 1, beta 0, running mean 0, running var 1."""
    return BNState(
        gamma=np.ones(channels),
        beta=np.zeros(channels),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        momentum=momentum,
        epsilon=epsilon,
        mode=mode,
    )


@dataclass
class BNCache:
    """Per-call intermediates needed by batch_norm_backward."""

    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


def batch_norm(x: np.ndarray, state: BNState) -> np.ndarray:
    """Normalize per channel over the batch axis, then scale and shift."""
    y, _ = batch_norm_forward(x, state)
    return y


def batch_norm_forward(x: np.ndarray, state: BNState):
    """Batch norm returning the output and a cache for the backward pass.

    Train mode uses the biased variance of the current batch and updates
    the running statistics in place; eval mode reads the running
    statistics and is a pure function.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects a 2-d input, got {x.shape}")
    if x.shape[1] != state.channels:
        raise ShapeError(
            f"batch_norm channel extent {x.shape[1]} does not match state ({state.channels})"
        )
    if state.mode == "train":
        if x.shape[0] < 2:
            raise BatchSizeError(
                f"train-mode batch_norm needs a batch of at least 2, got {x.shape[0]}"
            )
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mean
        state.running_var *= 1.0 - m
        state.running_var += m * var
    elif state.mode == "eval":
        mean = state.running_mean
        var = state.running_var
    else:
        raise ValueError(f"unknown batch_norm mode {state.mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean) * inv_std
    y = state.gamma * x_hat + state.beta
    return y, BNCache(x_hat=x_hat, inv_std=inv_std, gamma=state.gamma.copy(), mode=state.mode)


def batch_norm_backward(grad: np.ndarray, cache: BNCache):
    """Gradients of batch norm with respect to input, gamma and beta.

    Train mode differentiates through the batch statistics themselves;
    eval mode reduces to a per-channel affine map.
    """
    dgamma = (grad * cache.x_hat).sum(axis=0)
    dbeta = grad.sum(axis=0)
    dx_hat = grad * cache.gamma
    if cache.mode == "eval":
        dx = dx_hat * cache.inv_std
    else:
        mean_d = dx_hat.mean(axis=0)
        mean_dx = (dx_hat * cache.x_hat).mean(axis=0)
        dx = (dx_hat - mean_d - cache.x_hat * mean_dx) * cache.inv_std
    return dx, dgamma, dbeta
