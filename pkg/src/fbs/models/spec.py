"""Network descriptions, their text form, and shape inference.

Text form, one directive per line, ``#`` starts a comment::

    input 3 32 32
    classes 10
    fbs_conv 64 3 1 0 l1
    conv 64 3 1 1 -
    residual_block 32 3 2 1 l1
    global_avg_pool - - - - -
    fc 10 - - - -

Layer lines are ``kind channels kernel stride padding reducer`` with
``-`` for fields a kind does not use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..layers.conv import conv_output_size
from ..layers.gating import Reducer
from ..tensor import ShapeError

KINDS = ("conv", "fbs_conv", "fc", "global_avg_pool", "residual_block")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: Optional[int] = None
    reducer: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "fbs_conv", "residual_block"):
            for name in ("channels", "kernel", "stride", "padding"):
                if getattr(self, name) is None:
                    raise SpecError(f"{self.kind} needs {name}")
            if self.channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
                raise SpecError(f"invalid geometry in {self}")
        if self.kind in ("fbs_conv", "residual_block"):
            if self.reducer is None:
                raise SpecError(f"{self.kind} needs a reducer")
            Reducer(self.reducer)
            if self.channels < 2:
                raise SpecError(f"{self.kind} needs at least 2 output channels")
        if self.kind == "fc" and (self.channels is None or self.channels < 1):
            raise SpecError("fc needs an output width")

    @property
    def is_fbs(self) -> bool:
        return self.kind in ("fbs_conv", "residual_block")

    def to_line(self) -> str:
        vals = [self.channels, self.kernel, self.stride, self.padding, self.reducer]
        return " ".join([self.kind] + ["-" if v is None else str(v) for v in vals])

    @classmethod
    def from_line(cls, line: str) -> "LayerSpec":
        parts = line.split()
        if len(parts) != 6:
            raise SpecError(f"layer line needs 6 fields, got {len(parts)}: {line!r}")
        kind, *rest = parts

        def num(tok):
            if tok == "-":
                return None
            try:
                return int(tok)
            except ValueError:
                raise SpecError(f"expected an integer or '-', got {tok!r}") from None

        channels, kernel, stride, padding = (num(t) for t in rest[:4])
        reducer = None if rest[4] == "-" else rest[4]
        try:
            return cls(kind, channels, kernel, stride, padding, reducer)
        except ValueError as exc:
            raise SpecError(str(exc)) from None


@dataclass(frozen=True)
class ShapeInfo:
    """Input and output feature shapes of one layer; (C,) for rank-2 values."""

    input: tuple[int, ...]
    output: tuple[int, ...]


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (3, 32, 32)
    class_count: int = 10
    name: str = field(default="network", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.shapes()

    def shapes(self) -> list[ShapeInfo]:
        """Per-layer shapes; raises :class:`SpecError` if adjacent layers do not compose."""
        cur: tuple[int, ...] = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            try:
                nxt = _layer_output(layer, cur)
            except (ShapeError, SpecError) as exc:
                raise SpecError(f"layer {i} ({layer.kind}): {exc}") from None
            out.append(ShapeInfo(cur, nxt))
            cur = nxt
        if cur != (self.class_count,):
            raise SpecError(f"network output {cur} does not match class count {self.class_count}")
        return out

    def to_text(self) -> str:
        c, h, w = self.input_shape
        lines = [f"input {c} {h} {w}", f"classes {self.class_count}"]
        lines += [layer.to_line() for layer in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, name: str = "network") -> "NetworkSpec":
        input_shape = None
        classes = None
        layers = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head = line.split()[0]
            if head == "input":
                vals = line.split()[1:]
                if len(vals) != 3:
                    raise SpecError(f"input needs C H W: {raw!r}")
                input_shape = tuple(int(v) for v in vals)
            elif head == "classes":
                classes = int(line.split()[1])
            else:
                layers.append(LayerSpec.from_line(line))
        if input_shape is None or classes is None:
            raise SpecError("spec text needs 'input' and 'classes' lines")
        return cls(tuple(layers), input_shape, classes, name=name)

    @property
    def fbs_layer_count(self) -> int:
        return sum(2 if l.kind == "residual_block" else 1 for l in self.layers if l.is_fbs)


def residual_has_projection(layer: LayerSpec, in_channels: int) -> bool:
    return layer.stride != 1 or layer.channels != in_channels


def _layer_output(layer: LayerSpec, cur: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind in ("conv", "fbs_conv", "residual_block"):
        if len(cur) != 3:
            raise SpecError(f"convolution needs (C, H, W) input, got {cur}")
        h, w = conv_output_size(cur[1], cur[2], layer.kernel, layer.stride, layer.padding)
        if kind == "residual_block":
            h2, w2 = conv_output_size(h, w, layer.kernel, 1, layer.padding)
            if (h2, w2) != (h, w):
                raise SpecError("second block convolution must preserve spatial size")
            if residual_has_projection(layer, cur[0]):
                hs, ws = conv_output_size(cur[1], cur[2], 1, layer.stride, 0)
                if (hs, ws) != (h, w):
                    raise SpecError("shortcut projection and residual branch disagree on output size")
        return (layer.channels, h, w)
    if kind == "global_avg_pool":
        if len(cur) != 3:
            raise SpecError(f"pooling needs (C, H, W) input, got {cur}")
        return (cur[0],)
    if len(cur) != 1:
        raise SpecError(f"fc needs a pooled (C,) input, got {cur}")
    return (layer.channels,)


# stride/padding chosen to give the feature sizes noted per layer
_MCIFARNET = (
    # channels, stride, padding
    (64, 1, 0),   # conv0 30x30
    (64, 1, 1),   # conv1 30x30
    (128, 2, 1),  # conv2 15x15
    (128, 1, 1),  # conv3 15x15
    (128, 1, 1),  # conv4 15x15
    (192, 2, 1),  # conv5 8x8
    (192, 1, 1),  # conv6 8x8
    (192, 1, 1),  # conv7 8x8
)


def build_mcifarnet(
    fbs: bool = True,
    width_divisor: int = 1,
    reducer: str = "l1",
    class_count: int = 10,
) -> NetworkSpec:
    """The 8-layer CIFAR-10 classifier; ``width_divisor`` shrinks every conv width."""
    kind = "fbs_conv" if fbs else "conv"
    layers = [
        LayerSpec(kind, c // width_divisor, 3, s, p, reducer if fbs else None)
        for c, s, p in _MCIFARNET
    ]
    layers += [LayerSpec("global_avg_pool"), LayerSpec("fc", class_count)]
    name = "mcifarnet" if width_divisor == 1 else f"mcifarnet_div{width_divisor}"
    return NetworkSpec(tuple(layers), (3, 32, 32), class_count, name=name)
