"""Multiply-accumulate and memory-access accounting.

One MAC is one multiply-accumulate; bias and normalization arithmetic
are not counted.  A convolution costs ``k^2 * C_in * C_out * H_out * W_out``
and a fully-connected layer ``C_in * C_out``.  Dynamic counts use the
per-sample number of active input and output channels from a forward
pass.  Memory accounting assumes 4-byte elements.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .layers import GateRecord
from .models.network import residual_merge
from .models.spec import NetworkSpec, residual_has_projection
from .tensor import ChannelMask

ELEMENT_BYTES = 4
CSV_COLUMNS = ("layer", "static_macs", "dynamic_macs", "overhead_macs", "weight_bytes", "act_bytes", "speedup")


@dataclass
class LayerCost:
    name: str
    kind: str  # conv | fbs_conv | shortcut | fc
    kernel: int
    in_channels: int
    out_channels: int
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    in_active: np.ndarray  # per-sample active input channels
    out_active: np.ndarray

    @property
    def static_macs(self) -> int:
        return self.kernel**2 * self.in_channels * self.out_channels * self.out_hw[0] * self.out_hw[1]

    def per_sample_macs(self) -> np.ndarray:
        return self.kernel**2 * self.in_active * self.out_active * self.out_hw[0] * self.out_hw[1]

    @property
    def dynamic_macs(self) -> float:
        return float(self.per_sample_macs().mean())

    @property
    def overhead_macs(self) -> int:
        """Saliency predictor matmul plus the subsampler, FBS layers only."""
        if self.kind != "fbs_conv":
            return 0
        return self.in_channels * self.out_channels + self.in_channels * self.in_hw[0] * self.in_hw[1]

    @property
    def weight_bytes(self) -> float:
        if self.kind == "fc":
            return 0.0
        return float((self.in_active * self.out_active).mean()) * self.kernel**2 * ELEMENT_BYTES

    @property
    def act_bytes(self) -> float:
        if self.kind == "fc":
            return 0.0
        reads = self.in_active * self.in_hw[0] * self.in_hw[1]
        writes = self.out_active * self.out_hw[0] * self.out_hw[1]
        return float((reads + writes).mean()) * ELEMENT_BYTES

    @property
    def speedup(self) -> float:
        dyn = self.dynamic_macs
        return self.static_macs / dyn if dyn else float("inf")


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def static_macs(self) -> int:
        return sum(l.static_macs for l in self.layers)

    @property
    def dynamic_macs(self) -> float:
        return sum(l.dynamic_macs for l in self.layers)

    @property
    def overhead_macs(self) -> int:
        return sum(l.overhead_macs for l in self.layers)

    @property
    def dynamic_total(self) -> float:
        """Dynamic MACs including the gating overhead."""
        return self.dynamic_macs + self.overhead_macs

    @property
    def weight_bytes(self) -> float:
        return sum(l.weight_bytes for l in self.layers)

    @property
    def act_bytes(self) -> float:
        return sum(l.act_bytes for l in self.layers)

    @property
    def speedup(self) -> float:
        return self.static_macs / self.dynamic_total

    def layer(self, name: str) -> LayerCost:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for l in self.layers:
            w.writerow([l.name, l.static_macs, repr(l.dynamic_macs), l.overhead_macs,
                        repr(l.weight_bytes), repr(l.act_bytes), repr(l.speedup)])
        w.writerow(["total", self.static_macs, repr(self.dynamic_total), self.overhead_macs,
                    repr(self.weight_bytes), repr(self.act_bytes), repr(self.speedup)])
        return buf.getvalue()


def _counts(mask: Optional[ChannelMask], channels: int, batch: int) -> np.ndarray:
    if mask is None:
        return np.full(batch, channels, dtype=np.int64)
    return mask.counts().astype(np.int64)


def layer_costs(spec: NetworkSpec, records: Optional[Sequence[GateRecord]] = None) -> CostReport:
    """Cost table for ``spec``; without records every channel counts as active."""
    records = list(records) if records is not None else None
    batch = records[0].active.batch if records else 1
    if records is not None and len(records) != spec.fbs_layer_count:
        raise ValueError(f"{len(records)} gate records for a spec with {spec.fbs_layer_count} FBS layers")
    rec_iter = iter(records or [])

    def gate(channels):
        if records is None:
            return None
        rec = next(rec_iter)
        if rec.active.channel_count != channels or rec.active.batch != batch:
            raise ValueError("gate record does not match the spec")
        return rec.active

    report = CostReport()
    mask: Optional[ChannelMask] = None
    conv_index = 0
    for i, (layer, shape) in enumerate(zip(spec.layers, spec.shapes())):
        c_in = shape.input[0]
        if layer.kind in ("conv", "fbs_conv"):
            out_mask = gate(layer.channels) if layer.kind == "fbs_conv" else None
            report.layers.append(LayerCost(
                f"conv{conv_index}", layer.kind, layer.kernel, c_in, layer.channels,
                shape.input[1:], shape.output[1:],
                _counts(mask, c_in, batch), _counts(out_mask, layer.channels, batch)))
            conv_index += 1
            mask = out_mask
        elif layer.kind == "residual_block":
            mid_hw = shape.output[1:]
            in_mask = mask
            m_a = gate(layer.channels)
            m_b = gate(layer.channels)
            for tag, cin, hw_in, mi, mo in (("a", c_in, shape.input[1:], in_mask, m_a),
                                             ("b", layer.channels, mid_hw, m_a, m_b)):
                report.layers.append(LayerCost(
                    f"block{i}.{tag}", "fbs_conv", layer.kernel, cin, layer.channels, hw_in, mid_hw,
                    _counts(mi, cin, batch), _counts(mo, layer.channels, batch)))
            if residual_has_projection(layer, c_in):
                report.layers.append(LayerCost(
                    f"block{i}.short", "shortcut", 1, c_in, layer.channels, shape.input[1:], mid_hw,
                    _counts(in_mask, c_in, batch), _counts(None, layer.channels, batch)))
                mask = None
            else:
                mask = residual_merge(in_mask, m_b)
        elif layer.kind == "fc":
            report.layers.append(LayerCost(
                "fc", "fc", 1, c_in, layer.channels, (1, 1), (1, 1),
                _counts(mask, c_in, batch), _counts(None, layer.channels, batch)))
            mask = None
    return report


def static_macs(spec: NetworkSpec) -> dict[str, int]:
    return {l.name: l.static_macs for l in layer_costs(spec).layers}


def dynamic_macs(spec: NetworkSpec, records: Sequence[GateRecord]) -> dict[str, float]:
    return {l.name: l.dynamic_macs for l in layer_costs(spec, records).layers}


def memory_accesses(spec: NetworkSpec, records: Optional[Sequence[GateRecord]] = None) -> dict[str, tuple[float, float]]:
    """Per conv layer ``(weight_bytes, activation_bytes)`` for single-image inference."""
    return {l.name: (l.weight_bytes, l.act_bytes) for l in layer_costs(spec, records).layers
            if l.kind != "fc"}


def uniform_records(spec: NetworkSpec, density: float, batch: int = 1) -> list[GateRecord]:
    """Synthetic gate records keeping the first ``ceil(d * C)`` channels of every FBS layer.

    Cost depends only on how many channels are active, so this gives the
    analytical cost of a uniform density without running the network.
    """
    from .layers import kept_count

    recs = []
    for layer in spec.layers:
        if not layer.is_fbs:
            continue
        for _ in range(2 if layer.kind == "residual_block" else 1):
            k = kept_count(density, layer.channels)
            bits = np.zeros((batch, layer.channels), dtype=bool)
            bits[:, :k] = True
            recs.append(GateRecord(np.zeros((batch, layer.channels)), ChannelMask(bits), k))
    return recs


def tradeoff_table(points: Sequence[tuple[float, float, float]]) -> str:
    """CSV of ``(density, macs, top1)`` rows, densest first."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("density", "macs", "top1"))
    for d, macs, top1 in sorted(points, key=lambda p: -p[0]):
        w.writerow([repr(float(d)), repr(float(macs)), repr(float(top1))])
    return buf.getvalue()
