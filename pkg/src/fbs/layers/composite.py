"""Composite layers: the plain conv-BN-ReLU layer and the FBS layer.

Plain layer::

    y = relu(gamma * norm(conv(x, theta)) + beta)

FBS layer::

    g  = relu(ss(x) @ phi.T + rho)          channel saliencies
    pi = wta_k(g),  k = ceil(d * C_out)     keep the k most salient
    y  = relu(pi * (norm(conv(x, theta)) + beta))

Only channels kept by ``pi`` need to be convolved, and only channels of
``x`` that are active need to be read.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..tensor import ChannelMask, ShapeError
from .basic import relu, relu_backward
from .conv import ConvParams, conv2d_backward, conv2d_dense, conv2d_sparse
from .gating import (
    SaliencyParams,
    kept_count,
    saliency_g_backward,
    saliency_preactivation,
    subsample_ss,
    subsample_ss_backward,
    wta_backward,
    wta_mask,
)
from .norm import BnCache, BnParams, batch_norm, batch_norm_backward

# "sparse": per-sample channel skipping on the direct path (reference, exploits masks)
# "dense":  direct path on every channel, gate applied afterwards (oracle)
# "gemm":   BLAS path on every channel (fast, used for training)
FORWARD_METHODS = ("sparse", "dense", "gemm")


def _convolve(x, conv, method, in_mask, out_mask):
    if method == "sparse":
        return conv2d_sparse(x, in_mask, conv, out_mask)
    if method == "dense":
        return conv2d_dense(x, conv, "direct")
    if method == "gemm":
        return conv2d_dense(x, conv, "gemm")
    raise ValueError(f"unknown forward method {method!r}; expected one of {FORWARD_METHODS}")


@dataclass
class GateRecord:
    """Saliencies and surviving channels of one FBS layer for one batch."""

    saliency: np.ndarray  # (N, C_out), pre-wta
    active: ChannelMask
    k_kept: int


@dataclass
class PlainConvLayer:
    conv: ConvParams
    bn: BnParams
    activation: bool = True


@dataclass
class PlainCache:
    x: np.ndarray
    bn: BnCache
    pre: np.ndarray


def plain_forward(x, layer: PlainConvLayer, training: bool, method: str = "dense"):
    z = _convolve(x, layer.conv, method, None, None)
    u, bn_cache = batch_norm(z, layer.bn, training, use_gamma=True)
    y = relu(u) if layer.activation else u
    return y, PlainCache(x=x, bn=bn_cache, pre=u)


def plain_backward(dy, cache: PlainCache, layer: PlainConvLayer) -> dict[str, np.ndarray]:
    if cache is None:
        raise ValueError("plain layer backward needs the cached forward context")
    du = relu_backward(dy, cache.pre) if layer.activation else dy
    g = batch_norm_backward(du, cache.bn, layer.bn)
    dx, dtheta = conv2d_backward(g["z"], cache.x, layer.conv)
    return {"x": dx, "theta": dtheta, "gamma": g["gamma"], "beta": g["beta"]}


@dataclass
class FbsConvLayer:
    """Convolution weights, BN offset and statistics, and the saliency predictor.

    ``nominal_channels`` is the output width ``ceil(d * C)`` is computed
    from.  It equals ``C_out`` until channels are removed by compaction.
    """

    conv: ConvParams
    bn: BnParams
    saliency: SaliencyParams
    nominal_channels: int = field(default=0)

    def __post_init__(self):
        c_out, c_in = self.conv.out_channels, self.conv.in_channels
        if self.nominal_channels == 0:
            self.nominal_channels = c_out
        if self.bn.channels != c_out or self.bn.gamma is not None:
            raise ShapeError("FBS layer needs a gamma-free BN over the output channels")
        if self.saliency.phi.shape != (c_out, c_in):
            raise ShapeError(f"phi must be ({c_out}, {c_in}), got {self.saliency.phi.shape}")

    def k_for(self, density: float) -> int:
        k = kept_count(density, self.nominal_channels)
        if k > self.conv.out_channels:
            raise ValueError(
                f"density {density} keeps {k} channels but the layer only has {self.conv.out_channels}"
            )
        return k


@dataclass
class FbsCache:
    x: np.ndarray
    in_mask: Optional[ChannelMask]
    ssx: np.ndarray
    pre: np.ndarray
    keep: np.ndarray
    pi: np.ndarray
    u: np.ndarray
    v: np.ndarray
    bn: BnCache


def fbs_forward(
    x: np.ndarray,
    layer: FbsConvLayer,
    density: float,
    training: bool,
    in_mask: Optional[ChannelMask] = None,
    method: str = "sparse",
) -> tuple[np.ndarray, GateRecord, FbsCache]:
    if x.ndim != 4 or x.shape[1] != layer.conv.in_channels:
        raise ShapeError(f"FBS layer expects {layer.conv.in_channels} input channels, got {x.shape}")
    ssx = subsample_ss(x, layer.saliency.reducer)
    pre = saliency_preactivation(ssx, layer.saliency)
    g = np.maximum(pre, 0.0)
    k = layer.k_for(density)
    keep = wta_mask(g, k)
    pi = np.where(keep, g, 0.0)
    out_mask = ChannelMask(keep)

    computed = keep.any(axis=0)
    if method == "sparse" and training:
        # batch statistics need every sample of every channel anyone keeps
        conv_mask = ChannelMask(np.broadcast_to(computed, keep.shape))
    else:
        conv_mask = out_mask
    z = _convolve(x, layer.conv, method, in_mask, conv_mask)
    u, bn_cache = batch_norm(z, layer.bn, training, use_gamma=False, update=computed if training else None)
    v = pi[:, :, None, None] * u
    y = relu(v)
    record = GateRecord(saliency=g, active=out_mask, k_kept=k)
    cache = FbsCache(x=x, in_mask=in_mask, ssx=ssx, pre=pre, keep=keep, pi=pi, u=u, v=v, bn=bn_cache)
    return y, record, cache


def fbs_backward(
    dy: np.ndarray,
    cache: FbsCache,
    layer: FbsConvLayer,
    dg_extra: Optional[np.ndarray] = None,
) -> dict[str, np.ndarray]:
    """Gradients for ``x``, ``theta``, ``beta``, ``phi`` and ``rho``.

    ``dg_extra`` is added to the gradient reaching the pre-wta saliencies
    (the saliency regularizer enters here).
    """
    if cache is None:
        raise ValueError("FBS backward needs the cached forward context")
    dv = relu_backward(dy, cache.v)
    dpi = (dv * cache.u).sum(axis=(2, 3))
    du = dv * cache.pi[:, :, None, None]
    bn_grads = batch_norm_backward(du, cache.bn, layer.bn)
    dx_conv, dtheta = conv2d_backward(bn_grads["z"], cache.x, layer.conv)
    dg = wta_backward(dpi, cache.keep)
    if dg_extra is not None:
        dg = dg + dg_extra
    dssx, dphi, drho = saliency_g_backward(dg, cache.ssx, cache.pre, layer.saliency)
    dx = dx_conv + subsample_ss_backward(dssx, cache.x, layer.saliency.reducer)
    return {"x": dx, "theta": dtheta, "beta": bn_grads["beta"], "phi": dphi, "rho": drho}
