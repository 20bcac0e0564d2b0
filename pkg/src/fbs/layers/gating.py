"""Channel saliency prediction and k-winners-take-all selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..tensor import ShapeError
from .basic import ordered_matmul


class Reducer(str, Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"
    VAR = "var"


def subsample_ss(x: np.ndarray, reducer: Reducer | str = Reducer.L1) -> np.ndarray:
    """Reduce each (H, W) plane to one scalar, divided by H*W.

    The 1/(H*W) factor applies to every reducer, including the max and
    variance.  For non-negative input and L1 this is global average pooling.
    """
    reducer = Reducer(reducer)
    if x.ndim != 4:
        raise ShapeError(f"subsampler expects rank-4 features, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    if reducer is Reducer.L1:
        s = np.abs(flat).sum(axis=-1)
    elif reducer is Reducer.L2:
        s = np.sqrt((flat * flat).sum(axis=-1))
    elif reducer is Reducer.LINF:
        s = np.abs(flat).max(axis=-1)
    else:
        s = flat.var(axis=-1)
    return s / (h * w)


def subsample_ss_backward(dout: np.ndarray, x: np.ndarray, reducer: Reducer | str) -> np.ndarray:
    reducer = Reducer(reducer)
    n, c, h, w = x.shape
    hw = h * w
    flat = x.reshape(n, c, hw)
    d = dout[:, :, None] / hw
    if reducer is Reducer.L1:
        g = d * np.sign(flat)
    elif reducer is Reducer.L2:
        norm = np.sqrt((flat * flat).sum(axis=-1, keepdims=True))
        safe = np.where(norm > 0, norm, 1.0)
        g = np.where(norm > 0, d * flat / safe, 0.0)
    elif reducer is Reducer.LINF:
        # subgradient: first position attaining the max magnitude
        arg = np.abs(flat).argmax(axis=-1)
        g = np.zeros_like(flat)
        picked = np.take_along_axis(flat, arg[..., None], axis=-1)
        np.put_along_axis(g, arg[..., None], d * np.sign(picked), axis=-1)
    else:
        g = d * 2.0 * (flat - flat.mean(axis=-1, keepdims=True)) / hw
    return g.reshape(x.shape)


@dataclass
class SaliencyParams:
    phi: np.ndarray  # (C_out, C_in)
    rho: np.ndarray  # (C_out,)
    reducer: Reducer = Reducer.L1

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.reducer = Reducer(self.reducer)
        if self.phi.ndim != 2 or self.rho.shape != (self.phi.shape[0],):
            raise ShapeError(f"phi {self.phi.shape} and rho {self.rho.shape} disagree")
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.rho))):
            raise ValueError("saliency parameters must be finite")


def saliency_preactivation(ssx: np.ndarray, p: SaliencyParams) -> np.ndarray:
    if ssx.ndim != 2 or ssx.shape[1] != p.phi.shape[1]:
        raise ShapeError(f"saliency predictor expects (N, {p.phi.shape[1]}), got {ssx.shape}")
    return ordered_matmul(ssx, p.phi.T) + p.rho


def saliency_g(ssx: np.ndarray, p: SaliencyParams) -> np.ndarray:
    """``relu(ssx @ phi.T + rho)``; shape (N, C_out), non-negative."""
    return np.maximum(saliency_preactivation(ssx, p), 0.0)


def saliency_g_backward(dg: np.ndarray, ssx: np.ndarray, pre: np.ndarray, p: SaliencyParams):
    """Returns ``(d_ssx, d_phi, d_rho)``; ``pre`` is the cached pre-activation."""
    da = dg * (pre > 0)
    return da @ p.phi, da.T @ ssx, da.sum(axis=0)


def kept_count(density: float, channels: int) -> int:
    """``ceil(d * C)``, immune to binary rounding such as 0.7 * 10 = 7.000000000000001."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    return max(1, math.ceil(round(density * channels, 9)))


def wta_indices(z: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` largest magnitudes along the last axis.

    Ties at equal magnitude go to the lower index.
    """
    n = z.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    order = np.argsort(-np.abs(z), axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def wta_mask(z: np.ndarray, k: int) -> np.ndarray:
    keep = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(keep, wta_indices(z, k), True, axis=-1)
    return keep


def wta(z: np.ndarray, k: int) -> np.ndarray:
    """Zero all but the ``k`` largest-magnitude entries of each row."""
    z = np.asarray(z, dtype=np.float64)
    return np.where(wta_mask(z, k), z, 0.0)


def wta_backward(dout: np.ndarray, keep: np.ndarray) -> np.ndarray:
    return np.where(keep, dout, 0.0)
