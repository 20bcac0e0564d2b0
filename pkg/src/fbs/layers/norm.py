"""Per-channel batch normalization with running statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..tensor import ShapeError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.9


@dataclass
class BnParams:
    """Scale ``gamma`` (plain layers only), offset ``beta`` and running stats.

    ``momentum`` is the weight kept on the old running value:
    ``running = momentum * running + (1 - momentum) * batch``.
    """

    beta: np.ndarray
    gamma: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.gamma is not None:
            self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.running_var is not None and np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def fresh(cls, channels: int, use_gamma: bool, **kw) -> "BnParams":
        return cls(
            beta=np.zeros(channels),
            gamma=np.ones(channels) if use_gamma else None,
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.beta.shape[0]


@dataclass
class BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    training: bool
    use_gamma: bool


def _bcast(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None]


def batch_norm(
    z: np.ndarray,
    p: BnParams,
    training: bool,
    use_gamma: bool,
    update: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, BnCache]:
    """Normalize each channel of ``z`` then apply ``gamma`` (optional) and ``beta``.

    In training mode the batch mean and biased variance over (N, H, W)
    are used and the running statistics are updated in place, restricted
    to channels flagged in the boolean vector ``update`` when given.
    """
    if z.ndim != 4 or z.shape[1] != p.channels:
        raise ShapeError(f"batch_norm expects {p.channels} channels, got shape {z.shape}")
    if use_gamma and p.gamma is None:
        raise ValueError("use_gamma requested but the layer has no gamma")
    if training:
        mean = z.mean(axis=(0, 2, 3))
        var = z.var(axis=(0, 2, 3))
        if p.running_mean is None or p.running_var is None:
            p.running_mean = np.zeros(p.channels)
            p.running_var = np.ones(p.channels)
        m = p.momentum
        new_mean = m * p.running_mean + (1.0 - m) * mean
        new_var = m * p.running_var + (1.0 - m) * var
        if update is None:
            p.running_mean, p.running_var = new_mean, new_var
        else:
            p.running_mean = np.where(update, new_mean, p.running_mean)
            p.running_var = np.where(update, new_var, p.running_var)
    else:
        if p.running_mean is None or p.running_var is None:
            raise ValueError("inference-mode batch_norm with uninitialized running statistics")
        mean, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (z - _bcast(mean)) * _bcast(inv_std)
    out = xhat * _bcast(p.gamma) + _bcast(p.beta) if use_gamma else xhat + _bcast(p.beta)
    return out, BnCache(xhat=xhat, inv_std=inv_std, training=training, use_gamma=use_gamma)


def batch_norm_backward(dout: np.ndarray, cache: BnCache, p: BnParams) -> dict[str, np.ndarray]:
    """Returns ``{"z", "beta"}`` and ``"gamma"`` when the scale was used."""
    if cache is None:
        raise ValueError("batch_norm backward needs the cached forward context")
    grads = {"beta": dout.sum(axis=(0, 2, 3))}
    if cache.use_gamma:
        grads["gamma"] = (dout * cache.xhat).sum(axis=(0, 2, 3))
        dxhat = dout * _bcast(p.gamma)
    else:
        dxhat = dout
    if cache.training:
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        mean_d = dxhat.sum(axis=(0, 2, 3)) / m
        mean_dx = (dxhat * cache.xhat).sum(axis=(0, 2, 3)) / m
        grads["z"] = (dxhat - _bcast(mean_d) - cache.xhat * _bcast(mean_dx)) * _bcast(cache.inv_std)
    else:
        grads["z"] = dxhat * _bcast(cache.inv_std)
    return grads
