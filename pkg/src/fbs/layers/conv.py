"""Direct and channel-sparse 2-D convolution (cross-correlation).

Two numerically distinct forward paths exist:

* ``direct`` accumulates products in a fixed order -- input channel,
  kernel row, kernel column, all ascending -- one term at a time per
  output element.  Skipping a channel whose input is zero only removes
  ``+-0.0`` terms, so :func:`conv2d_sparse` matches it bitwise (up to the
  sign of zero).
* ``gemm`` contracts over input channels with BLAS for each kernel
  offset.  It is the fast path used for training and carries no bitwise
  guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import ChannelMask, MaskError, ShapeError, check_mask

METHODS = ("direct", "gemm")


@dataclass
class ConvParams:
    theta: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 4 or self.theta.shape[2] != self.theta.shape[3]:
            raise ShapeError(f"theta must be (C_out, C_in, k, k), got {self.theta.shape}")
        if self.theta.shape[2] < 1:
            raise ShapeError("kernel size must be >= 1")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.theta.shape[0]

    @property
    def in_channels(self) -> int:
        return self.theta.shape[1]

    @property
    def kernel(self) -> int:
        return self.theta.shape[2]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return conv_output_size(h, w, self.kernel, self.stride, self.padding)


def conv_output_size(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"non-positive output size {ho}x{wo} for input {h}x{w}, "
            f"k={kernel}, stride={stride}, padding={padding}"
        )
    return ho, wo


def _prepare(x: np.ndarray, p: ConvParams):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be rank 4, got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {x.shape[1]}")
    ho, wo = p.output_size(x.shape[2], x.shape[3])
    pad = p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    return xp, ho, wo


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Strided view of the padded input seen by kernel offset (i, j)."""
    return xp[..., i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def conv2d_dense(x: np.ndarray, p: ConvParams, method: str = "direct") -> np.ndarray:
    """Convolve every channel; output shape (N, C_out, H', W')."""
    xp, ho, wo = _prepare(x, p)
    n = x.shape[0]
    k, s = p.kernel, p.stride
    if method == "direct":
        out = np.zeros((n, p.out_channels, ho, wo))
        for c in range(p.in_channels):
            for i in range(k):
                for j in range(k):
                    out += _window(xp[:, c : c + 1], i, j, ho, wo, s) * p.theta[None, :, c, i, j, None, None]
        return out
    if method == "gemm":
        acc = np.zeros((p.out_channels, n, ho, wo))
        for i in range(k):
            for j in range(k):
                acc += np.tensordot(p.theta[:, :, i, j], _window(xp, i, j, ho, wo, s), axes=([1], [1]))
        return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    raise ValueError(f"unknown convolution method {method!r}; expected one of {METHODS}")


def conv2d_sparse(
    x: np.ndarray,
    in_mask: ChannelMask | None,
    p: ConvParams,
    out_mask: ChannelMask | None,
) -> np.ndarray:
    """Convolve only active input channels into active output channels.

    Per sample, the work is ``|in_mask| * |out_mask| * k^2 * H' * W'``
    multiply-accumulates.  Inactive output channels are exactly zero.
    The result equals ``apply_mask(conv2d_dense(apply_mask(x, in_mask), p), out_mask)``
    bitwise, modulo signed zero.
    """
    xp, ho, wo = _prepare(x, p)
    check_mask(x, in_mask)
    n = x.shape[0]
    if out_mask is not None and (out_mask.channel_count != p.out_channels or out_mask.batch != n):
        raise MaskError(
            f"output mask is {out_mask.batch}x{out_mask.channel_count}, "
            f"expected {n}x{p.out_channels}"
        )
    k, s = p.kernel, p.stride
    all_in = np.arange(p.in_channels)
    all_out = np.arange(p.out_channels)
    out = np.zeros((n, p.out_channels, ho, wo))
    for b in range(n):
        cin = all_in if in_mask is None else np.flatnonzero(in_mask.bits[b])
        cout = all_out if out_mask is None else np.flatnonzero(out_mask.bits[b])
        if cout.size == 0:
            continue
        theta = p.theta[cout]
        acc = np.zeros((cout.size, ho, wo))
        for c in cin:
            plane = xp[b, c]
            for i in range(k):
                for j in range(k):
                    acc += _window(plane, i, j, ho, wo, s) * theta[:, c, i, j, None, None]
        out[b, cout] = acc
    return out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(d_input, d_theta)`` of a dense convolution."""
    if x is None:
        raise ValueError("conv backward needs the cached forward input")
    xp, ho, wo = _prepare(x, p)
    if dout.shape != (x.shape[0], p.out_channels, ho, wo):
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match conv output")
    k, s, pad = p.kernel, p.stride, p.padding
    dxp = np.zeros_like(xp)
    dtheta = np.empty_like(p.theta)
    for i in range(k):
        for j in range(k):
            win = _window(xp, i, j, ho, wo, s)
            dtheta[:, :, i, j] = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
            # (C_in, N, H', W') -> (N, C_in, H', W')
            contrib = np.tensordot(p.theta[:, :, i, j], dout, axes=([0], [1])).transpose(1, 0, 2, 3)
            _window(dxp, i, j, ho, wo, s)[...] += contrib
    dx = dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp
    return np.ascontiguousarray(dx), dtheta
