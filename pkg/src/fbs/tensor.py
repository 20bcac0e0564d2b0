"""Dense fp64 feature containers and per-sample channel masks.

Features are plain C-contiguous ``numpy.float64`` arrays laid out as
(batch, channel, height, width); convolution weights as
(out_channels, in_channels, k, k).  Channel sparsity is carried next to
the array as a :class:`ChannelMask` rather than in a sparse format.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised for invalid or mismatched tensor shapes."""


class MaskError(ValueError):
    """Raised for malformed masks or mask/tensor channel mismatches."""


def zeros(shape: Sequence[int]) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("shape must have at least one extent")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return np.zeros(shape, dtype=DTYPE)


def as_features(x) -> np.ndarray:
    """Return ``x`` as a contiguous rank-4 float64 array, validating finiteness."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"features must be rank 4 (N, C, H, W), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain NaN or Inf")
    return x


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major flat offset of ``index``; for (N, C, H, W) this is ((n*C + c)*H + h)*W + w."""
    if len(shape) != len(index):
        raise ShapeError("index rank does not match shape rank")
    offset = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
        offset = offset * extent + i
    return offset


def unflatten_index(shape: Sequence[int], offset: int) -> tuple[int, ...]:
    size = int(np.prod(shape))
    if not 0 <= offset < size:
        raise IndexError(f"offset {offset} out of range for {size} elements")
    out = []
    for extent in reversed(shape):
        offset, i = divmod(offset, extent)
        out.append(i)
    return tuple(reversed(out))


def channel_slice(x: np.ndarray, n: int, c: int) -> np.ndarray:
    """Copy of the (n, c) feature plane."""
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 features, got shape {x.shape}")
    N, C = x.shape[:2]
    if not (0 <= n < N and 0 <= c < C):
        raise IndexError(f"plane ({n}, {c}) out of range for batch {N}, channels {C}")
    return x[n, c].copy()


@dataclass(frozen=True, eq=False)
class ChannelMask:
    """Per-sample set of active channels.

    ``bits`` is an (N, C) boolean matrix; row ``n`` marks the active
    channels of sample ``n``.  A full mask is equivalent to no mask.
    """

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise MaskError(f"mask bits must be (N, C), got shape {bits.shape}")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def full(cls, batch: int, channels: int) -> "ChannelMask":
        return cls(np.ones((batch, channels), dtype=bool))

    @classmethod
    def empty(cls, batch: int, channels: int) -> "ChannelMask":
        return cls(np.zeros((batch, channels), dtype=bool))

    @classmethod
    def from_active(cls, active: Sequence[Sequence[int]], channels: int) -> "ChannelMask":
        bits = np.zeros((len(active), channels), dtype=bool)
        for n, idx in enumerate(active):
            idx = [int(i) for i in idx]
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise MaskError(f"sample {n}: indices must be strictly increasing, got {idx}")
            if idx and (idx[0] < 0 or idx[-1] >= channels):
                raise MaskError(f"sample {n}: indices must lie in [0, {channels})")
            bits[n, idx] = True
        return cls(bits)

    @property
    def batch(self) -> int:
        return self.bits.shape[0]

    @property
    def channel_count(self) -> int:
        return self.bits.shape[1]

    @property
    def active(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in self.bits]

    def counts(self) -> np.ndarray:
        return self.bits.sum(axis=1)

    def is_full(self) -> bool:
        return bool(self.bits.all())

    def union_over_batch(self) -> np.ndarray:
        """Channels active in at least one sample."""
        return self.bits.any(axis=0)

    def select(self, channels: np.ndarray) -> "ChannelMask":
        """Mask restricted to the given (kept) channel indices, in order."""
        return ChannelMask(self.bits[:, channels])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self) -> str:
        return f"ChannelMask(batch={self.batch}, channels={self.channel_count}, counts={self.counts().tolist()})"


def check_mask(x: np.ndarray, m: ChannelMask | None) -> None:
    if m is None:
        return
    if m.channel_count != x.shape[1]:
        raise MaskError(f"mask has {m.channel_count} channels, tensor has {x.shape[1]}")
    if m.batch != x.shape[0]:
        raise MaskError(f"mask has batch {m.batch}, tensor has {x.shape[0]}")


def apply_mask(x: np.ndarray, m: ChannelMask | None) -> np.ndarray:
    """Zero every channel not active in ``m``; active channels are copied unchanged."""
    check_mask(x, m)
    out = np.array(x, dtype=DTYPE, copy=True)
    if m is None:
        return out
    shape = m.bits.shape + (1,) * (x.ndim - 2)
    out[~np.broadcast_to(m.bits.reshape(shape), x.shape)] = 0.0
    return out
