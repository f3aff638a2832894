"""Shape inference, parameter counts and FLOPs accounting.

FLOPs follow the Darknet convention: a convolution costs
``2 * size**2 * c_in * filters * out_h * out_w`` (one multiply-accumulate
counts as two operations) and every other layer type is left out of the
headline figure.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

from .cfg import Convolutional, MaxPool, NetworkDef, Route, Shortcut, Upsample, Yolo
from .errors import ShapeError

WEIGHTS_HEADER_BYTES = 20


class Shape(NamedTuple):
    h: int
    w: int
    c: int


@dataclass
class ShapeInfo:
    input: Shape
    shapes: List[Shape]

    def input_of(self, index: int) -> Shape:
        """Shape of the tensor consumed by a single-input layer."""
        return self.input if index == 0 else self.shapes[index - 1]


def _input_shape(net: NetworkDef, input_hw):
    if input_hw is None:
        h, w = net.height, net.width
    elif isinstance(input_hw, int):
        h = w = input_hw
    else:
        h, w = input_hw
    return Shape(int(h), int(w), net.channels)


def conv_output_hw(h, w, size, stride, padding):
    return (h + 2 * padding - size) // stride + 1, (w + 2 * padding - size) // stride + 1


def maxpool_output_hw(h, w, size, stride, padding):
    return (h + padding - size) // stride + 1, (w + padding - size) // stride + 1


def infer_shapes(net: NetworkDef, input_hw=None) -> ShapeInfo:
    """Output shape of every layer for an ``(h, w)`` input (header size by default)."""
    inp = _input_shape(net, input_hw)
    shapes: List[Shape] = []

    def prev(i):
        return inp if i == 0 else shapes[i - 1]

    for i, layer in enumerate(net.layers):
        if isinstance(layer, Convolutional):
            p = prev(i)
            oh, ow = conv_output_hw(p.h, p.w, layer.size, layer.stride, layer.padding)
            out = Shape(oh, ow, layer.filters)
        elif isinstance(layer, MaxPool):
            p = prev(i)
            oh, ow = maxpool_output_hw(p.h, p.w, layer.size, layer.stride, layer.padding)
            out = Shape(oh, ow, p.c)
        elif isinstance(layer, Upsample):
            p = prev(i)
            out = Shape(p.h * layer.stride, p.w * layer.stride, p.c)
        elif isinstance(layer, Route):
            srcs = [shapes[s] for s in net.sources(i)]
            first = srcs[0]
            for s, shp in zip(net.sources(i), srcs):
                if (shp.h, shp.w) != (first.h, first.w):
                    raise ShapeError(
                        f"route at layer {i}: source layer {s} is {shp.h}x{shp.w}, "
                        f"expected {first.h}x{first.w}", layer=i)
            out = Shape(first.h, first.w, sum(s.c for s in srcs))
        elif isinstance(layer, Shortcut):
            a, b = net.sources(i)
            sa, sb = prev(i), shapes[b]
            if sa != sb:
                raise ShapeError(
                    f"shortcut at layer {i}: layer {a} has shape {tuple(sa)} but "
                    f"layer {b} has shape {tuple(sb)}", layer=i)
            out = sa
        elif isinstance(layer, Yolo):
            out = prev(i)
        else:
            raise TypeError(f"unknown layer type at {i}: {layer!r}")
        if min(out) < 1:
            raise ShapeError(f"layer {i} ({layer.kind}) has non-positive output {tuple(out)}", layer=i)
        shapes.append(out)
    return ShapeInfo(inp, shapes)


def input_channels(net: NetworkDef) -> List[int]:
    """Channels entering each layer (first source for multi-input layers)."""
    info = infer_shapes(net)
    return [info.input_of(i).c for i in range(len(net.layers))]


def layer_params(layer, c_in: int) -> int:
    if not isinstance(layer, Convolutional):
        return 0
    n = layer.size * layer.size * c_in * layer.filters
    return n + (4 if layer.batch_normalize else 1) * layer.filters


def count_params(net: NetworkDef) -> int:
    """Total trainable parameters (convolution kernels, BN parameters, biases)."""
    cins = input_channels(net)
    return sum(layer_params(l, c) for l, c in zip(net.layers, cins))


def count_flops(net: NetworkDef, input_hw=None) -> int:
    return cost_report(net, input_hw).total_flops


@dataclass
class LayerCost:
    index: int
    kind: str
    out_shape: Shape
    params: int
    flops: int


@dataclass
class CostReport:
    input: Shape
    layers: List[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def bflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def model_volume_bytes(self) -> int:
        return 4 * self.total_params + WEIGHTS_HEADER_BYTES

    def to_text(self) -> str:
        lines = [f"{'idx':>4} {'type':<14} {'output (h x w x c)':>20} {'params':>12} {'BFLOPs':>10}"]
        for l in self.layers:
            shp = f"{l.out_shape.h} x {l.out_shape.w} x {l.out_shape.c}"
            lines.append(f"{l.index:>4} {l.kind:<14} {shp:>20} {l.params:>12d} {l.flops / 1e9:>10.3f}")
        lines.append(f"input: {self.input.h} x {self.input.w} x {self.input.c}")
        lines.append(f"total params: {self.total_params} ({self.total_params / 1e6:.2f}M)")
        lines.append(f"total BFLOPS: {self.bflops:.3f}")
        lines.append(f"model volume: {self.model_volume_bytes} bytes "
                     f"({self.model_volume_bytes / 2**20:.1f}MB)")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "type", "out_h", "out_w", "out_c", "params", "flops"])
        for l in self.layers:
            w.writerow([l.index, l.kind, *l.out_shape, l.params, l.flops])
        w.writerow(["total", "", self.input.h, self.input.w, self.input.c,
                    self.total_params, self.total_flops])
        return buf.getvalue()


def cost_report(net: NetworkDef, input_hw=None) -> CostReport:
    info = infer_shapes(net, input_hw)
    report = CostReport(info.input)
    for i, layer in enumerate(net.layers):
        out = info.shapes[i]
        flops = params = 0
        if isinstance(layer, Convolutional):
            c_in = info.input_of(i).c
            params = layer_params(layer, c_in)
            flops = 2 * layer.size * layer.size * c_in * layer.filters * out.h * out.w
        report.layers.append(LayerCost(i, layer.kind, out, params, flops))
    return report
