"""Network assembly, mask-threaded forward pass and backpropagation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np

from ..layers import (
    BnParams,
    ConvParams,
    FbsConvLayer,
    GateRecord,
    PlainConvLayer,
    SaliencyParams,
    fbs_backward,
    fbs_forward,
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
    plain_backward,
    plain_forward,
)
from ..tensor import ChannelMask, MaskError, ShapeError, as_features
from .spec import LayerSpec, NetworkSpec, residual_has_projection


def residual_merge(a: Optional[ChannelMask], b: Optional[ChannelMask]) -> Optional[ChannelMask]:
    """Mask of a residual sum: a channel is inactive only if inactive in both.

    ``None`` stands for a full mask and is absorbing.
    """
    if a is None or b is None:
        return None
    if a.bits.shape != b.bits.shape:
        raise MaskError(f"cannot merge masks of shape {a.bits.shape} and {b.bits.shape}")
    return ChannelMask(a.bits | b.bits)


@dataclass
class PoolLayer:
    pass


@dataclass
class LinearLayer:
    weight: np.ndarray  # (C_out, C_in)
    bias: np.ndarray


@dataclass
class ResidualBlock:
    """``x -> first -> second`` plus an identity or 1x1 projection shortcut, summed."""

    first: FbsConvLayer
    second: FbsConvLayer
    shortcut: Optional[PlainConvLayer] = None


Layer = Union[PlainConvLayer, FbsConvLayer, PoolLayer, LinearLayer, ResidualBlock]


@dataclass
class ForwardResult:
    logits: np.ndarray
    records: list[GateRecord]
    in_masks: list[Optional[ChannelMask]]  # input mask seen by each FBS layer, aligned with records
    caches: list[Any] = field(repr=False, default_factory=list)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _init_fbs(rng, c_in, c_out, kernel, stride, padding, reducer) -> FbsConvLayer:
    return FbsConvLayer(
        conv=ConvParams(_he(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel), stride, padding),
        bn=BnParams.fresh(c_out, use_gamma=False),
        saliency=SaliencyParams(phi=_he(rng, (c_out, c_in), c_in), rho=np.ones(c_out), reducer=reducer),
    )


def _init_plain(rng, c_in, c_out, kernel, stride, padding, activation=True) -> PlainConvLayer:
    return PlainConvLayer(
        conv=ConvParams(_he(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel), stride, padding),
        bn=BnParams.fresh(c_out, use_gamma=True),
        activation=activation,
    )


class Network:
    """Parameters and state of a network built from a :class:`NetworkSpec`.

    ``rng`` drives shuffling and augmentation during training and is
    saved with checkpoints; ``step`` counts optimizer steps.
    """

    def __init__(self, spec: NetworkSpec, layers: list[Layer], density: float = 1.0,
                 rng: Optional[np.random.Generator] = None, step: int = 0):
        self.spec = spec
        self.layers = layers
        self.density = density
        self.rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
        self.step = step

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int = 0) -> "Network":
        """He-initialized weights, ``rho = 1``, ``beta = 0``, ``gamma = 1``."""
        rng = np.random.Generator(np.random.PCG64(seed))
        layers: list[Layer] = []
        for layer, shape in zip(spec.layers, spec.shapes()):
            c_in = shape.input[0]
            if layer.kind == "fbs_conv":
                layers.append(_init_fbs(rng, c_in, layer.channels, layer.kernel, layer.stride,
                                        layer.padding, layer.reducer))
            elif layer.kind == "conv":
                layers.append(_init_plain(rng, c_in, layer.channels, layer.kernel, layer.stride, layer.padding))
            elif layer.kind == "global_avg_pool":
                layers.append(PoolLayer())
            elif layer.kind == "fc":
                w = rng.standard_normal((layer.channels, c_in)) * np.sqrt(1.0 / c_in)
                layers.append(LinearLayer(weight=w, bias=np.zeros(layer.channels)))
            else:
                first = _init_fbs(rng, c_in, layer.channels, layer.kernel, layer.stride,
                                  layer.padding, layer.reducer)
                second = _init_fbs(rng, layer.channels, layer.channels, layer.kernel, 1,
                                   layer.padding, layer.reducer)
                shortcut = None
                if residual_has_projection(layer, c_in):
                    shortcut = _init_plain(rng, c_in, layer.channels, 1, layer.stride, 0, activation=False)
                layers.append(ResidualBlock(first, second, shortcut))
        # a separate stream for training so re-initialization does not shift it
        train_rng = np.random.Generator(np.random.PCG64(seed + 1))
        return cls(spec, layers, rng=train_rng)

    # ---------------------------------------------------------------- parameters

    def fbs_layers(self) -> list[FbsConvLayer]:
        out = []
        for layer in self.layers:
            if isinstance(layer, FbsConvLayer):
                out.append(layer)
            elif isinstance(layer, ResidualBlock):
                out += [layer.first, layer.second]
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the arrays are live references."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for prefix, sub in _sublayers(i, layer):
                if isinstance(sub, FbsConvLayer):
                    out[f"{prefix}.theta"] = sub.conv.theta
                    out[f"{prefix}.beta"] = sub.bn.beta
                    out[f"{prefix}.phi"] = sub.saliency.phi
                    out[f"{prefix}.rho"] = sub.saliency.rho
                elif isinstance(sub, PlainConvLayer):
                    out[f"{prefix}.theta"] = sub.conv.theta
                    out[f"{prefix}.gamma"] = sub.bn.gamma
                    out[f"{prefix}.beta"] = sub.bn.beta
                elif isinstance(sub, LinearLayer):
                    out[f"{prefix}.weight"] = sub.weight
                    out[f"{prefix}.bias"] = sub.bias
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """BN running statistics by name."""
        out = {}
        for i, layer in enumerate(self.layers):
            for prefix, sub in _sublayers(i, layer):
                if isinstance(sub, (FbsConvLayer, PlainConvLayer)):
                    out[f"{prefix}.running_mean"] = sub.bn.running_mean
                    out[f"{prefix}.running_var"] = sub.bn.running_var
        return out

    def load_state(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        if set(own) != set(params):
            raise KeyError(f"parameter names differ: {sorted(set(own) ^ set(params))}")
        for name, arr in own.items():
            if arr.shape != params[name].shape:
                raise ShapeError(f"{name}: expected {arr.shape}, got {params[name].shape}")
            arr[...] = params[name]
        for i, layer in enumerate(self.layers):
            for prefix, sub in _sublayers(i, layer):
                if isinstance(sub, (FbsConvLayer, PlainConvLayer)):
                    sub.bn.running_mean = np.array(buffers[f"{prefix}.running_mean"], dtype=np.float64)
                    sub.bn.running_var = np.array(buffers[f"{prefix}.running_var"], dtype=np.float64)

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.parameters().values()))

    def copy(self) -> "Network":
        import copy

        return copy.deepcopy(self)

    # ---------------------------------------------------------------- forward

    def forward(self, x: np.ndarray, density: Optional[float] = None, training: bool = False,
                method: str = "sparse") -> ForwardResult:
        """Evaluate the network, threading each layer's output mask into the next.

        ``method`` selects the convolution path: ``sparse`` skips inactive
        input/output channels per sample, ``dense`` computes everything on
        the same fixed-order path and gates afterwards, ``gemm`` is the
        fast BLAS path used for training.
        """
        d = self.density if density is None else density
        x = as_features(x)
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeError(f"network expects input (N, {self.spec.input_shape}), got {x.shape}")
        mask: Optional[ChannelMask] = None
        records: list[GateRecord] = []
        in_masks: list[Optional[ChannelMask]] = []
        caches: list[Any] = []
        plain_method = "gemm" if method == "gemm" else "dense"
        h = x
        for layer in self.layers:
            if isinstance(layer, FbsConvLayer):
                in_masks.append(mask)
                h, rec, cache = fbs_forward(h, layer, d, training, mask, method)
                records.append(rec)
                mask = rec.active
            elif isinstance(layer, PlainConvLayer):
                h, cache = plain_forward(h, layer, training, plain_method)
                mask = None
            elif isinstance(layer, PoolLayer):
                cache = h.shape
                h = global_avg_pool(h)
            elif isinstance(layer, LinearLayer):
                cache = h
                h = linear(h, layer.weight, layer.bias)
                mask = None
            else:
                x_in, mask_in = h, mask
                in_masks.append(mask_in)
                a, rec_a, cache_a = fbs_forward(x_in, layer.first, d, training, mask_in, method)
                in_masks.append(rec_a.active)
                b, rec_b, cache_b = fbs_forward(a, layer.second, d, training, rec_a.active, method)
                records += [rec_a, rec_b]
                if layer.shortcut is None:
                    short, cache_s, mask_s = x_in, None, mask_in
                else:
                    short, cache_s = plain_forward(x_in, layer.shortcut, training, plain_method)
                    mask_s = None
                h = short + b
                mask = residual_merge(mask_s, rec_b.active)
                cache = (cache_a, cache_b, cache_s)
            caches.append(cache)
        return ForwardResult(logits=h, records=records, in_masks=in_masks, caches=caches)

    # ---------------------------------------------------------------- backward

    def backward(self, dlogits: np.ndarray, result: ForwardResult,
                 dg: Optional[list[Optional[np.ndarray]]] = None) -> dict[str, np.ndarray]:
        """Gradients of every parameter given d(loss)/d(logits).

        ``dg`` optionally holds, per gate record, an extra gradient with
        respect to the pre-wta saliencies (the saliency regularizer).
        """
        if not result.caches:
            raise ValueError("backward needs a forward result with caches")
        dg = dg if dg is not None else [None] * len(result.records)
        grads: dict[str, np.ndarray] = {}
        rec_idx = len(result.records)
        dh = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            layer, cache = self.layers[i], result.caches[i]
            if isinstance(layer, FbsConvLayer):
                rec_idx -= 1
                g = fbs_backward(dh, cache, layer, dg[rec_idx])
                _store(grads, f"{i}", g, ("theta", "beta", "phi", "rho"))
                dh = g["x"]
            elif isinstance(layer, PlainConvLayer):
                g = plain_backward(dh, cache, layer)
                _store(grads, f"{i}", g, ("theta", "gamma", "beta"))
                dh = g["x"]
            elif isinstance(layer, PoolLayer):
                dh = global_avg_pool_backward(dh, cache)
            elif isinstance(layer, LinearLayer):
                dx, dw, db = linear_backward(dh, cache, layer.weight)
                grads[f"{i}.weight"], grads[f"{i}.bias"] = dw, db
                dh = dx
            else:
                cache_a, cache_b, cache_s = cache
                rec_idx -= 2
                gb = fbs_backward(dh, cache_b, layer.second, dg[rec_idx + 1])
                _store(grads, f"{i}.b", gb, ("theta", "beta", "phi", "rho"))
                ga = fbs_backward(gb["x"], cache_a, layer.first, dg[rec_idx])
                _store(grads, f"{i}.a", ga, ("theta", "beta", "phi", "rho"))
                if layer.shortcut is None:
                    dshort = dh
                else:
                    gs = plain_backward(dh, cache_s, layer.shortcut)
                    _store(grads, f"{i}.short", gs, ("theta", "gamma", "beta"))
                    dshort = gs["x"]
                dh = ga["x"] + dshort
        grads["input"] = dh
        return grads


def _store(grads, prefix, g, names):
    for n in names:
        grads[f"{prefix}.{n}"] = g[n]


def _sublayers(i: int, layer: Layer):
    if isinstance(layer, ResidualBlock):
        yield f"{i}.a", layer.first
        yield f"{i}.b", layer.second
        if layer.shortcut is not None:
            yield f"{i}.short", layer.shortcut
    else:
        yield f"{i}", layer
