"""ReLU, fully-connected, global average pooling and an ordered matmul."""

from __future__ import annotations

import numpy as np

from ..tensor import ShapeError


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(dout: np.ndarray, z: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is 0
    return dout * (z > 0)


def ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` accumulated one inner index at a time, ascending.

    BLAS reorders its reductions depending on the inner length, so a
    contraction over fewer channels can round differently.  Summing in
    a fixed order makes dropping an all-zero inner index exact.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[1]):
        out += a[:, i : i + 1] * b[i : i + 1, :]
    return out


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight.T + bias`` for x of shape (N, C_in), weight (C_out, C_in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects (N, {weight.shape[1]}) input, got {x.shape}")
    return ordered_matmul(x, weight.T) + bias


def linear_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns ``(dx, dweight, dbias)``."""
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"pooling expects rank-4 features, got {x.shape}")
    n, c, h, w = x.shape
    # per-plane reduction, independent of how many channels sit alongside
    return x.reshape(n, c, h * w).sum(axis=-1) / (h * w)


def global_avg_pool_backward(dout: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = input_shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], input_shape).copy()
