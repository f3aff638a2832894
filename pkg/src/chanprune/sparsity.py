"""Sparsity training at toy scale.

A small stack of conv(+BN)+activation layers is trained on a regression
task with an L1 penalty ``alpha * sum(|gamma|)`` over every BN scale. The
penalty is optimised with its subgradient ``alpha * sign(gamma)`` (sign(0)
is 0). Training runs in float64; checkpoints are exported as a
``NetworkDef`` plus a float32 ``WeightStore``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .cfg import Convolutional, NetworkDef
from .errors import DivergenceError
from .weights import ConvWeights, WeightStore

__all__ = ["SparsityConfig", "ToyLayer", "ToyModel", "LossBreakdown", "SparsityTrainer",
           "GammaHistogram", "bn_train_forward", "bn_train_backward", "sparsity_penalty",
           "loss_and_gradients", "gradient_check", "gamma_histogram", "build_toy_model",
           "make_regression_data", "train_toy", "loss_curve_csv"]

TRAIN_EPS = 1e-6
RUNNING_MOMENTUM = 0.1
LEAKY = 0.1


@dataclass(frozen=True)
class SparsityConfig:
    alpha: float = 1e-4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 100
    seed: int = 0
    task_weight: float = 1.0
    batch_size: int = 8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


# ---------------------------------------------------------------- batch norm


def bn_train_forward(x: np.ndarray, gamma, beta, eps: float = TRAIN_EPS):
    """Batch-statistics normalisation of ``x`` shaped (batch, c, h, w).

    Returns ``(y, cache)``; the cache holds the batch mean and (biased)
    variance plus what the backward pass needs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError("bn_train_forward needs a non-empty (batch, c, h, w) array")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None, None]) * invstd[:, None, None]
    y = gamma[:, None, None] * xhat + beta[:, None, None]
    return y, {"mean": mean, "var": var, "xhat": xhat, "invstd": invstd, "gamma": gamma}


def bn_train_backward(dy: np.ndarray, cache):
    xhat, invstd, gamma = cache["xhat"], cache["invstd"], cache["gamma"]
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[:, None, None]
    dx = (invstd[:, None, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2, 3))[:, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[:, None, None])
    return dx, dgamma, dbeta


def sparsity_penalty(gammas, alpha: float):
    """``alpha * sum(|gamma|)`` and its subgradient ``alpha * sign(gamma)``.

    ``gammas`` may be one array or a sequence of arrays; the subgradient has
    the same structure.
    """
    if isinstance(gammas, np.ndarray):
        g = gammas.astype(np.float64)
        return float(alpha * np.abs(g).sum()), alpha * np.sign(g)
    parts = [np.asarray(g, dtype=np.float64) for g in gammas]
    value = float(alpha * sum(np.abs(g).sum() for g in parts))
    return value, [alpha * np.sign(g) for g in parts]


# ---------------------------------------------------------------- conv helpers


def _im2col(x, k, stride, pad):
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, oh, ow), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride]
    return cols.reshape(b, c * k * k, oh * ow), oh, ow


def _col2im(dcols, xshape, k, stride, pad, oh, ow):
    b, c, h, w = xshape
    dcols = dcols.reshape(b, c, k, k, oh, ow)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + stride * oh:stride, kx:kx + stride * ow:stride] += dcols[:, :, ky, kx]
    return dxp[:, :, pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------- model


@dataclass
class ToyLayer:
    kernel: np.ndarray  # (f, c, k, k)
    stride: int = 1
    bn: bool = True
    activation: str = "leaky"
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @property
    def filters(self):
        return self.kernel.shape[0]

    @property
    def size(self):
        return self.kernel.shape[2]

    @property
    def pad(self):
        return self.size // 2

    def params(self) -> Dict[str, np.ndarray]:
        if self.bn:
            return {"kernel": self.kernel, "gamma": self.gamma, "beta": self.beta}
        return {"kernel": self.kernel, "bias": self.bias}


@dataclass
class ToyModel:
    layers: List[ToyLayer]
    input_shape: Tuple[int, int, int]  # (c, h, w)

    def parameters(self):
        """``((layer_index, name), array)`` pairs; arrays are updated in place."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                yield (i, name), arr

    def gammas(self) -> List[np.ndarray]:
        return [l.gamma for l in self.layers if l.bn]

    def copy(self) -> "ToyModel":
        layers = []
        for l in self.layers:
            kw = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in vars(l).items()}
            layers.append(ToyLayer(**kw))
        return ToyModel(layers, self.input_shape)

    def forward(self, x, training=True):
        caches = []
        for layer in self.layers:
            cols, oh, ow = _im2col(x, layer.size, layer.stride, layer.pad)
            wm = layer.kernel.reshape(layer.filters, -1)
            z = np.einsum("fk,bkn->bfn", wm, cols).reshape(x.shape[0], layer.filters, oh, ow)
            bn_cache = None
            if layer.bn:
                if training:
                    z, bn_cache = bn_train_forward(z, layer.gamma, layer.beta)
                else:
                    inv = 1.0 / np.sqrt(layer.running_var + TRAIN_EPS)
                    z = (layer.gamma * inv)[:, None, None] * (z - layer.running_mean[:, None, None]) \
                        + layer.beta[:, None, None]
            else:
                z = z + layer.bias[:, None, None]
            out = np.where(z > 0, z, LEAKY * z) if layer.activation == "leaky" else z
            caches.append((x.shape, cols, oh, ow, bn_cache, z))
            x = out
        return x, caches

    def backward(self, dout, caches):
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            xshape, cols, oh, ow, bn_cache, z = caches[i]
            dz = dout * np.where(z > 0, 1.0, LEAKY) if layer.activation == "leaky" else dout
            if layer.bn:
                dz, grads[(i, "gamma")], grads[(i, "beta")] = bn_train_backward(dz, bn_cache)
            else:
                grads[(i, "bias")] = dz.sum(axis=(0, 2, 3))
            dzf = dz.reshape(dz.shape[0], layer.filters, -1)
            grads[(i, "kernel")] = np.einsum("bfn,bkn->fk", dzf, cols).reshape(layer.kernel.shape)
            if i > 0:
                dcols = np.einsum("fk,bfn->bkn", layer.kernel.reshape(layer.filters, -1), dzf)
                dout = _col2im(dcols, xshape, layer.size, layer.stride, layer.pad, oh, ow)
        return grads

    def to_network(self) -> Tuple[NetworkDef, WeightStore]:
        """Export as a Darknet definition plus float32 weights (running BN statistics)."""
        c, h, w = self.input_shape
        net = NetworkDef({"width": str(w), "height": str(h), "channels": str(c)}, [])
        store = WeightStore()
        f32 = lambda a: np.asarray(a, dtype=np.float32).copy()
        for i, l in enumerate(self.layers):
            net.layers.append(Convolutional(filters=l.filters, size=l.size, stride=l.stride,
                                            pad=1 if l.pad else 0, batch_normalize=int(l.bn),
                                            activation=l.activation))
            if l.bn:
                store.layers[i] = ConvWeights(f32(l.kernel), f32(l.beta), f32(l.gamma),
                                              f32(l.running_mean), f32(l.running_var))
            else:
                store.layers[i] = ConvWeights(f32(l.kernel), f32(l.bias))
        return net, store


def build_toy_model(rng: np.random.Generator, channels: Sequence[int] = (3, 8, 8, 4),
                    input_hw=(8, 8), size: int = 3, bn_head: bool = False,
                    gamma_range=(0.2, 1.2)) -> ToyModel:
    """Conv+BN+leaky layers followed by a linear regression head.

    ``channels`` lists the input channels then each layer's filters.
    """
    layers = []
    n = len(channels) - 1
    for j in range(n):
        c_in, f = channels[j], channels[j + 1]
        head = j == n - 1
        bn = bn_head or not head
        kernel = rng.standard_normal((f, c_in, size, size)) / math.sqrt(c_in * size * size)
        layer = ToyLayer(kernel, bn=bn, activation="linear" if head else "leaky")
        if bn:
            layer.gamma = rng.uniform(*gamma_range, f)
            layer.beta = rng.standard_normal(f) * 0.1
            layer.running_mean = np.zeros(f)
            layer.running_var = np.ones(f)
        else:
            layer.bias = np.zeros(f)
        layers.append(layer)
    return ToyModel(layers, (channels[0], *input_hw))


def make_regression_data(rng: np.random.Generator, model: ToyModel, n: int, noise: float = 0.0):
    """Inputs with targets produced by a randomly initialised teacher of the same shape."""
    c, h, w = model.input_shape
    chans = [c] + [l.filters for l in model.layers]
    teacher = build_toy_model(rng, chans, (h, w), model.layers[0].size)
    x = rng.standard_normal((n, c, h, w))
    y, _ = teacher.forward(x, training=True)
    if noise:
        y = y + noise * rng.standard_normal(y.shape)
    return x, y


# ---------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    task: float
    penalty: float
    total: float


def loss_and_gradients(model: ToyModel, x, y, alpha: float = 0.0, task_weight: float = 1.0):
    """Objective ``task_weight * 0.5 * mean((f(x) - y)^2) + alpha * sum|gamma|`` and its
    (sub)gradients keyed like :meth:`ToyModel.parameters`."""
    out, caches = model.forward(x, training=True)
    diff = out - y
    task = 0.5 * float(np.mean(diff * diff))
    penalty, sub = sparsity_penalty(model.gammas(), alpha)
    grads = model.backward(task_weight * diff / diff.size, caches)
    k = 0
    for i, layer in enumerate(model.layers):
        if layer.bn:
            grads[(i, "gamma")] = grads[(i, "gamma")] + sub[k]
            k += 1
    loss = LossBreakdown(task, penalty, task_weight * task + penalty)
    return loss, grads, caches


def _objective(model, x, y, alpha, task_weight):
    out, _ = model.forward(x, training=True)
    diff = out - y
    task = 0.5 * float(np.mean(diff * diff))
    penalty, _ = sparsity_penalty(model.gammas(), alpha)
    return task_weight * task + penalty


def gradient_check(model: ToyModel, x, y, alpha: float = 0.0, h: float = 1e-5,
                   task_weight: float = 1.0) -> float:
    """Max over every parameter of ``|analytic - numeric| / max(1, |numeric|)`` using
    central differences with step ``h * max(1, |p|)``.

    Raises ValueError when a BN scale sits within one step of the L1 kink.
    """
    model = model.copy()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if alpha > 0:
        for g in model.gammas():
            if np.any(np.abs(g) <= h * np.maximum(1.0, np.abs(g))):
                raise ValueError("a gamma lies within the finite-difference step of 0")
    _, grads, _ = loss_and_gradients(model, x, y, alpha, task_weight)
    worst = 0.0
    for key, arr in model.parameters():
        flat = arr.reshape(-1)
        g = grads[key].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            step = h * max(1.0, abs(orig))
            flat[j] = orig + step
            up = _objective(model, x, y, alpha, task_weight)
            flat[j] = orig - step
            down = _objective(model, x, y, alpha, task_weight)
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, abs(g[j] - numeric) / max(1.0, abs(numeric)))
    return worst


# ---------------------------------------------------------------- optimiser


class SparsityTrainer:
    """SGD with momentum; weight decay touches convolution kernels only."""

    def __init__(self, model: ToyModel, config: SparsityConfig):
        self.model = model
        self.config = config
        self.velocity = {key: np.zeros_like(arr) for key, arr in model.parameters()}
        self.steps = 0

    def train_step(self, x, y) -> LossBreakdown:
        cfg = self.config
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads, caches = loss_and_gradients(self.model, x, y, cfg.alpha, cfg.task_weight)
        if not math.isfinite(loss.total):
            raise DivergenceError(self.steps, loss.total)
        for key, arr in self.model.parameters():
            g = grads[key]
            if key[1] == "kernel" and cfg.weight_decay:
                g = g + cfg.weight_decay * arr
            v = self.velocity[key]
            v *= cfg.momentum
            v += g
            arr -= cfg.lr * v
        for layer, (_, _, _, _, bn_cache, _) in zip(self.model.layers, caches):
            if bn_cache is not None:
                layer.running_mean = (1 - RUNNING_MOMENTUM) * layer.running_mean \
                    + RUNNING_MOMENTUM * bn_cache["mean"]
                layer.running_var = (1 - RUNNING_MOMENTUM) * layer.running_var \
                    + RUNNING_MOMENTUM * bn_cache["var"]
        self.steps += 1
        return loss


# ---------------------------------------------------------------- histograms


@dataclass
class GammaHistogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int
    probe: float
    fraction_below: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        return buf.getvalue()


def _gather_gammas(source) -> np.ndarray:
    if isinstance(source, WeightStore):
        parts = list(source.gammas().values())
    elif isinstance(source, ToyModel):
        parts = source.gammas()
    elif isinstance(source, Mapping):
        parts = list(source.values())
    elif isinstance(source, np.ndarray):
        parts = [source]
    else:
        parts = list(source)
    if not parts:
        raise ValueError("no batch-normalized layers to histogram")
    return np.abs(np.concatenate([np.ravel(p) for p in parts]).astype(np.float64))


def gamma_histogram(source, bins: int = 20, probe: float = 0.01,
                    value_range: Optional[Tuple[float, float]] = None) -> GammaHistogram:
    """Histogram of |gamma| over every BN channel.

    ``source`` is a WeightStore, a ToyModel, or gamma arrays. The default
    range is ``[0, max|gamma|]``; values outside an explicit range are
    clipped into the end bins so the counts always cover every channel.
    """
    g = _gather_gammas(source)
    lo, hi = value_range if value_range is not None else (0.0, float(g.max()) or 1.0)
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(np.clip(g, lo, hi), bins=edges)
    return GammaHistogram(edges, counts, int(g.size), probe, float(np.mean(g < probe)))


# ---------------------------------------------------------------- driver


def train_toy(config: SparsityConfig, channels=(3, 8, 8, 4), input_hw=(8, 8), samples: int = 32,
              checkpoints: int = 4, bins: int = 20, probe: float = 0.01):
    """Train a fresh toy model and record the loss curve and gamma histograms.

    Returns ``(model, history, snapshots)``; ``history`` holds
    ``(step, LossBreakdown)`` and ``snapshots`` holds ``(step, GammaHistogram,
    NetworkDef, WeightStore)`` for ``checkpoints`` evenly spaced points
    (including the final one).
    """
    rng = np.random.default_rng(config.seed)
    model = build_toy_model(rng, channels, input_hw)
    x, y = make_regression_data(rng, model, samples)
    trainer = SparsityTrainer(model, config)
    per_epoch = max(1, math.ceil(samples / config.batch_size))
    total = config.epochs * per_epoch
    marks = {max(1, round(total * (k + 1) / checkpoints)) for k in range(checkpoints)} if total else set()
    hist_range = (0.0, float(max(g.max() for g in model.gammas())))
    history, snapshots = [], []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(samples)
        for s in range(per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            loss = trainer.train_step(x[idx], y[idx])
            step += 1
            history.append((step, loss))
            if step in marks:
                net, store = model.to_network()
                snapshots.append((step, gamma_histogram(model, bins, probe, hist_range), net, store))
    return model, history, snapshots


def loss_curve_csv(history: Iterable[Tuple[int, LossBreakdown]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "task_loss", "penalty", "total"])
    for step, l in history:
        w.writerow([step, repr(l.task), repr(l.penalty), repr(l.total)])
    return buf.getvalue()
