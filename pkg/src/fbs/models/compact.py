"""Removal of channels that the gate never selects."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..layers import FbsConvLayer, PlainConvLayer
from .network import LinearLayer, Network, PoolLayer, ResidualBlock
from .spec import NetworkSpec
from .usage import UsageStats


@dataclass
class CompactionReport:
    params_before: int
    params_after: int
    kept_channels: list[int]
    original_channels: list[int]

    @property
    def ratio(self) -> float:
        return self.params_before / self.params_after


def compact(net: Network, usage: UsageStats) -> tuple[Network, CompactionReport]:
    """Return a copy of ``net`` without channels whose selection count is zero.

    Output channels are removed from the producing FBS layer (theta,
    beta, BN statistics, phi, rho) and the matching input channels from
    the next consumer (conv theta, FBS phi, or fc weights behind the
    pooling layer).  ``ceil(d * C)`` keeps using the original width, so
    outputs on the usage set are unchanged bitwise.
    """
    if any(isinstance(l, ResidualBlock) for l in net.layers):
        raise ValueError("compaction supports sequential networks only")
    fbs_positions = [i for i, l in enumerate(net.layers) if isinstance(l, FbsConvLayer)]
    if len(usage.layers) != len(fbs_positions):
        raise ValueError(f"usage covers {len(usage.layers)} FBS layers, network has {len(fbs_positions)}")

    out = net.copy()
    before = out.parameter_count()
    original = [out.layers[i].conv.out_channels for i in fbs_positions]
    for pos, stats in zip(fbs_positions, usage.layers):
        layer: FbsConvLayer = out.layers[pos]
        keep = np.flatnonzero(stats.selection_count > 0)
        k = layer.k_for(usage.density)
        if keep.size < k:
            raise ValueError(f"layer {pos}: only {keep.size} channels used but {k} must be kept")
        _shrink_outputs(layer, keep)
        _shrink_next_inputs(out, pos, keep)

    spec_layers = list(out.spec.layers)
    for pos in range(len(out.layers)):
        layer = out.layers[pos]
        if isinstance(layer, (FbsConvLayer, PlainConvLayer)):
            spec_layers[pos] = replace(spec_layers[pos], channels=layer.conv.out_channels)
    out.spec = NetworkSpec(tuple(spec_layers), out.spec.input_shape, out.spec.class_count,
                           name=out.spec.name + "_compact")
    report = CompactionReport(
        params_before=before,
        params_after=out.parameter_count(),
        kept_channels=[out.layers[i].conv.out_channels for i in fbs_positions],
        original_channels=original,
    )
    return out, report


def _shrink_outputs(layer: FbsConvLayer, keep: np.ndarray) -> None:
    layer.conv.theta = np.ascontiguousarray(layer.conv.theta[keep])
    layer.bn.beta = layer.bn.beta[keep].copy()
    layer.bn.running_mean = layer.bn.running_mean[keep].copy()
    layer.bn.running_var = layer.bn.running_var[keep].copy()
    layer.saliency.phi = np.ascontiguousarray(layer.saliency.phi[keep])
    layer.saliency.rho = layer.saliency.rho[keep].copy()


def _shrink_next_inputs(net: Network, pos: int, keep: np.ndarray) -> None:
    for nxt in net.layers[pos + 1 :]:
        if isinstance(nxt, PoolLayer):
            continue
        if isinstance(nxt, (FbsConvLayer, PlainConvLayer)):
            nxt.conv.theta = np.ascontiguousarray(nxt.conv.theta[:, keep])
            if isinstance(nxt, FbsConvLayer):
                nxt.saliency.phi = np.ascontiguousarray(nxt.saliency.phi[:, keep])
        elif isinstance(nxt, LinearLayer):
            nxt.weight = np.ascontiguousarray(nxt.weight[:, keep])
        return
