"""Darknet binary weight files.

Layout (little-endian): three int32 version fields (major, minor, revision),
the ``seen`` counter as uint64 when ``major*10 + minor >= 2`` and uint32
otherwise, then float32 arrays for each convolutional layer in order:
biases (BN beta), and for BN layers gamma / running mean / running
variance, then the kernel ``[filters, c_in, size, size]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .cfg import Convolutional, NetworkDef
from .errors import AlignmentError, WeightsError, WeightsOverflowError, WeightsUnderflowError
from .graph import input_channels

__all__ = ["WeightsHeader", "ConvWeights", "WeightStore", "read_weights", "write_weights",
           "load_weights", "save_weights", "random_store", "expected_float_count"]

_F32 = np.dtype("<f4")


@dataclass
class WeightsHeader:
    major: int = 0
    minor: int = 2
    revision: int = 0
    seen: int = 0

    @property
    def wide_seen(self) -> bool:
        return self.major * 10 + self.minor >= 2


@dataclass(eq=False)
class ConvWeights:
    """Parameters of one convolutional layer, all float32.

    ``bias`` holds the BN shift (beta) for BN layers and the plain
    convolution bias otherwise.
    """
    kernel: np.ndarray
    bias: np.ndarray
    gamma: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None

    @property
    def batch_normalize(self) -> bool:
        return self.gamma is not None

    @property
    def beta(self) -> np.ndarray:
        return self.bias

    def arrays(self):
        """Arrays in file order."""
        if self.batch_normalize:
            return [self.bias, self.gamma, self.mean, self.var, self.kernel]
        return [self.bias, self.kernel]

    def copy(self) -> "ConvWeights":
        return ConvWeights(*(None if a is None else a.copy() for a in
                             (self.kernel, self.bias, self.gamma, self.mean, self.var)))

    def __eq__(self, other):
        if not isinstance(other, ConvWeights) or self.batch_normalize != other.batch_normalize:
            return NotImplemented if not isinstance(other, ConvWeights) else False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.arrays(), other.arrays()))


@dataclass(eq=False)
class WeightStore:
    header: WeightsHeader = field(default_factory=WeightsHeader)
    layers: Dict[int, ConvWeights] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, WeightStore):
            return NotImplemented
        return (self.header == other.header and self.layers.keys() == other.layers.keys()
                and all(self.layers[k] == other.layers[k] for k in self.layers))

    def copy(self) -> "WeightStore":
        return WeightStore(WeightsHeader(**vars(self.header)),
                           {k: v.copy() for k, v in self.layers.items()})

    def gammas(self):
        """Every BN gamma vector, keyed by layer index."""
        return {k: w.gamma for k, w in sorted(self.layers.items()) if w.batch_normalize}


def _conv_layers(net: NetworkDef):
    cins = input_channels(net)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Convolutional):
            yield i, layer, cins[i]


def expected_float_count(net: NetworkDef) -> int:
    total = 0
    for _, layer, c_in in _conv_layers(net):
        per = 4 if layer.batch_normalize else 1
        total += per * layer.filters + layer.filters * c_in * layer.size * layer.size
    return total


def check_alignment(store: WeightStore, net: NetworkDef) -> None:
    convs = {i: (layer, c) for i, layer, c in _conv_layers(net)}
    if set(store.layers) != set(convs):
        raise AlignmentError(
            f"weight store covers layers {sorted(store.layers)}, network has convs at {sorted(convs)}")
    for i, (layer, c_in) in convs.items():
        w = store.layers[i]
        f = layer.filters
        if w.batch_normalize != bool(layer.batch_normalize):
            raise AlignmentError(f"layer {i}: batch_normalize mismatch")
        want = (f, c_in, layer.size, layer.size)
        if w.kernel.shape != want:
            raise AlignmentError(f"layer {i}: kernel shape {w.kernel.shape}, expected {want}")
        for name in ("bias", "gamma", "mean", "var"):
            a = getattr(w, name)
            if a is not None and a.shape != (f,):
                raise AlignmentError(f"layer {i}: {name} has shape {a.shape}, expected ({f},)")


def read_weights(data: bytes, net: NetworkDef) -> WeightStore:
    """Decode a weight file for ``net``; every byte must be consumed."""
    data = memoryview(data)
    if len(data) < 12:
        raise WeightsUnderflowError(f"stream of {len(data)} bytes is shorter than the header")
    major, minor, revision = struct.unpack_from("<iii", data, 0)
    header = WeightsHeader(major, minor, revision)
    if header.wide_seen:
        if len(data) < 20:
            raise WeightsUnderflowError(f"stream of {len(data)} bytes is shorter than the header")
        (header.seen,) = struct.unpack_from("<Q", data, 12)
        offset = 20
    else:
        if len(data) < 16:
            raise WeightsUnderflowError(f"stream of {len(data)} bytes is shorter than the header")
        (header.seen,) = struct.unpack_from("<I", data, 12)
        offset = 16

    def take(n, i, what):
        nonlocal offset
        end = offset + 4 * n
        if end > len(data):
            raise WeightsUnderflowError(
                f"stream ends inside layer {i} ({what}): need {end} bytes, have {len(data)}")
        arr = np.frombuffer(data, dtype=_F32, count=n, offset=offset).astype(np.float32)
        offset = end
        return arr

    store = WeightStore(header)
    for i, layer, c_in in _conv_layers(net):
        f = layer.filters
        bias = take(f, i, "bias")
        gamma = mean = var = None
        if layer.batch_normalize:
            gamma = take(f, i, "gamma")
            mean = take(f, i, "mean")
            var = take(f, i, "variance")
            if np.any(var < 0):
                raise WeightsError(f"layer {i}: negative running variance")
        kernel = take(f * c_in * layer.size * layer.size, i, "kernel")
        store.layers[i] = ConvWeights(kernel.reshape(f, c_in, layer.size, layer.size),
                                      bias, gamma, mean, var)
    if offset != len(data):
        raise WeightsOverflowError(f"{len(data) - offset} trailing bytes after the last layer")
    return store


def write_weights(store: WeightStore, net: NetworkDef) -> bytes:
    """Encode ``store``; the header is always written as version 0.2.0 with a 64-bit ``seen``."""
    check_alignment(store, net)
    parts = [struct.pack("<iiiQ", 0, 2, 0, store.header.seen)]
    for i in sorted(store.layers):
        for arr in store.layers[i].arrays():
            parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(parts)


def load_weights(path, net: NetworkDef) -> WeightStore:
    with open(path, "rb") as fh:
        return read_weights(fh.read(), net)


def save_weights(store: WeightStore, net: NetworkDef, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_weights(store, net))


def random_store(net: NetworkDef, rng: np.random.Generator, scale: float = 0.1) -> WeightStore:
    """A store with random parameters aligned to ``net`` (for tests and benchmarks)."""
    store = WeightStore()
    for i, layer, c_in in _conv_layers(net):
        f, k = layer.filters, layer.size
        fan_in = c_in * k * k
        kernel = (rng.standard_normal((f, c_in, k, k)) / np.sqrt(fan_in)).astype(np.float32)
        bias = (rng.standard_normal(f) * scale).astype(np.float32)
        if layer.batch_normalize:
            gamma = rng.uniform(0.5, 1.5, f).astype(np.float32)
            mean = (rng.standard_normal(f) * scale).astype(np.float32)
            var = rng.uniform(0.5, 1.5, f).astype(np.float32)
            store.layers[i] = ConvWeights(kernel, bias, gamma, mean, var)
        else:
            store.layers[i] = ConvWeights(kernel, bias)
    return store
