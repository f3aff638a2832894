"""Deterministic CPU forward pass and YOLO output decoding.

Tensors are float32 arrays shaped ``(c, h, w)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .cfg import Convolutional, MaxPool, NetworkDef, Route, Shortcut, Upsample, Yolo
from .errors import DecodeError, InputFormatError, ShapeError
from .weights import ConvWeights, WeightStore, check_alignment

__all__ = ["BN_EPS", "LEAKY_SLOPE", "Detection", "NetworkOutput", "activate",
           "conv_bn_act_forward", "layer_forward", "yolo_decode", "run_network",
           "read_tensor", "write_tensor", "format_detections"]

BN_EPS = np.float32(1e-6)
LEAKY_SLOPE = np.float32(0.1)


def activate(x: np.ndarray, name: str) -> np.ndarray:
    if name == "leaky":
        return np.where(x > 0, x, LEAKY_SLOPE * x).astype(np.float32)
    if name == "linear":
        return x
    if name == "relu":
        return np.maximum(x, np.float32(0))
    if name == "logistic":
        return (1.0 / (1.0 + np.exp(-x))).astype(np.float32)
    raise ValueError(f"unsupported activation {name!r}")


def conv_bn_act_forward(x: np.ndarray, layer: Convolutional, weights: ConvWeights) -> np.ndarray:
    if x.shape[0] != weights.kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {weights.kernel.shape[1]}")
    y = kernels.conv2d(x, weights.kernel, layer.stride, layer.padding)
    if weights.batch_normalize:
        inv = np.float32(1) / np.sqrt(weights.var + BN_EPS)
        y = (y - weights.mean[:, None, None]) * inv[:, None, None]
        y = y * weights.gamma[:, None, None] + weights.bias[:, None, None]
    else:
        y = y + weights.bias[:, None, None]
    return activate(y.astype(np.float32, copy=False), layer.activation)


def layer_forward(layer, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Forward for parameter-free layers; ``inputs`` are the layer's sources in order."""
    if isinstance(layer, MaxPool):
        return kernels.maxpool2d(inputs[0], layer.size, layer.stride, layer.padding)
    if isinstance(layer, Upsample):
        return kernels.upsample2d(inputs[0], layer.stride)
    if isinstance(layer, Route):
        if len(inputs) == 1:
            return inputs[0]
        return np.concatenate(inputs, axis=0)
    if isinstance(layer, Shortcut):
        a, b = inputs
        if a.shape != b.shape:
            raise ShapeError(f"shortcut inputs differ: {a.shape} vs {b.shape}")
        return activate(a + b, layer.activation)
    if isinstance(layer, Yolo):
        return inputs[0]
    raise TypeError(f"layer_forward cannot run {layer!r}")


@dataclass
class Detection:
    x: float  # box centre, input-image pixels
    y: float
    w: float
    h: float
    objectness: float
    class_scores: np.ndarray
    class_id: int
    score: float

    def line(self) -> str:
        return f"{self.class_id} {self.score:.6f} {self.x:.3f} {self.y:.3f} {self.w:.3f} {self.h:.3f}"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x.astype(np.float64)))


def yolo_decode(feature: np.ndarray, anchors, classes: int, input_hw, threshold: float = 0.1,
                mask: Optional[Sequence[int]] = None) -> List[Detection]:
    """Turn a detection-head tensor into boxes.

    ``anchors`` are (w, h) pairs in input pixels; with ``mask`` given they are
    picked as ``anchors[m] for m in mask``. Boxes whose objectness does not
    exceed ``threshold`` are dropped.
    """
    if mask is not None:
        anchors = [anchors[m] for m in mask]
    na = len(anchors)
    c, gh, gw = feature.shape
    if na == 0 or c != na * (5 + classes):
        raise DecodeError(f"{c} channels cannot hold {na} anchors x (5 + {classes})")
    in_h, in_w = input_hw
    t = feature.reshape(na, 5 + classes, gh, gw).astype(np.float64)
    dets = []
    cols = np.arange(gw)[None, :]
    rows = np.arange(gh)[:, None]
    for a, (aw, ah) in enumerate(anchors):
        obj = _sigmoid(t[a, 4])
        keep = obj > threshold
        if not keep.any():
            continue
        bx = (_sigmoid(t[a, 0]) + cols) / gw * in_w
        by = (_sigmoid(t[a, 1]) + rows) / gh * in_h
        bw = aw * np.exp(t[a, 2])
        bh = ah * np.exp(t[a, 3])
        cls = _sigmoid(t[a, 5:])
        for i, j in zip(*np.nonzero(keep)):
            scores = cls[:, i, j]
            k = int(np.argmax(scores))
            dets.append(Detection(float(bx[i, j]), float(by[i, j]), float(bw[i, j]), float(bh[i, j]),
                                  float(obj[i, j]), scores, k, float(obj[i, j] * scores[k])))
    return dets


@dataclass
class NetworkOutput:
    outputs: List[np.ndarray]
    detections: List[Detection] = field(default_factory=list)

    def head_outputs(self, net: NetworkDef) -> List[np.ndarray]:
        return [self.outputs[i] for i in net.yolo_indices()]


def run_network(net: NetworkDef, store: WeightStore, x: np.ndarray, threshold: float = 0.1,
                decode: bool = True, check: bool = True) -> NetworkOutput:
    """Evaluate every layer in order; returns all layer outputs and merged detections."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] != net.channels:
        raise ShapeError(f"input shape {x.shape} does not match {net.channels} channels")
    if check:
        check_alignment(store, net)
    outputs: List[np.ndarray] = []
    dets: List[Detection] = []
    for i, layer in enumerate(net.layers):
        prev = x if i == 0 else outputs[i - 1]
        if isinstance(layer, Convolutional):
            out = conv_bn_act_forward(prev, layer, store.layers[i])
        elif isinstance(layer, (Route, Shortcut)):
            out = layer_forward(layer, [outputs[s] for s in net.sources(i)])
        else:
            out = layer_forward(layer, [prev])
        if isinstance(layer, Yolo) and decode:
            dets.extend(yolo_decode(out, layer.anchors, layer.classes, x.shape[1:], threshold,
                                    mask=layer.mask))
        outputs.append(out)
    return NetworkOutput(outputs, dets)


# ---------------------------------------------------------------- blob files


def _sidecar(path) -> Path:
    return Path(str(path) + ".shape")


def write_tensor(path, x: np.ndarray) -> None:
    """Raw little-endian float32 data plus a ``<path>.shape`` text file holding ``c h w``."""
    x = np.asarray(x, dtype="<f4")
    if x.ndim != 3:
        raise ValueError("tensor must be (c, h, w)")
    Path(path).write_bytes(x.tobytes())
    _sidecar(path).write_text(" ".join(str(d) for d in x.shape) + "\n")


def read_tensor(path, shape=None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if shape is None:
        side = _sidecar(path)
        if not side.exists():
            raise InputFormatError(f"missing shape sidecar {side}")
        try:
            shape = tuple(int(v) for v in side.read_text().replace(",", " ").split())
        except ValueError:
            raise InputFormatError(f"malformed shape sidecar {side}") from None
    if len(shape) != 3 or math.prod(shape) * 4 != len(raw):
        raise InputFormatError(f"blob of {len(raw)} bytes does not match shape {shape}")
    x = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if not np.all(np.isfinite(x)):
        raise InputFormatError("tensor contains non-finite values")
    return x


def format_detections(dets: Sequence[Detection]) -> str:
    return "".join(d.line() + "\n" for d in dets)
