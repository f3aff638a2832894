"""Channel pruning driven by batch-norm scaling factors.

Pipeline: pool |gamma| over every BN convolution, take a global percentile
threshold and a per-layer safety threshold, mark channels strictly below
``min(global, local)`` for removal, make the marks consistent across
route/shortcut connections, then slice the network and its weights.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cfg import Convolutional, MaxPool, NetworkDef, Route, Shortcut, Upsample, Yolo
from .errors import PruneError
from .graph import cost_report, infer_shapes
from .weights import ConvWeights, WeightStore, check_alignment

log = logging.getLogger(__name__)

__all__ = ["PruneConfig", "PRESETS", "ChannelMaskSet", "PruneReport", "percentile_index",
           "collect_scaling_factors", "compute_global_threshold", "compute_local_thresholds",
           "build_masks", "propagate_masks", "apply_pruning", "prune", "iterative_prune"]

OWN = "own-threshold"
ROUTE = "route-concat"
MERGED = "shortcut-merged"
PASS = "passthrough"
ALL = "all-retain"


@dataclass(frozen=True)
class PruneConfig:
    ratio: float = 0.5
    local_percentile: float = 0.9
    iterations: int = 1

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise ValueError(f"ratio must be in [0, 1), got {self.ratio}")
        if not 0 <= self.local_percentile < 1:
            raise ValueError(f"local_percentile must be in [0, 1), got {self.local_percentile}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


# 50% is reached in two rounds: each round removes 1 - sqrt(0.5) of the survivors.
PRESETS = {
    "slim-50": PruneConfig(1 - math.sqrt(0.5), 0.9, 2),
    "slim-90": PruneConfig(0.9, 0.9, 1),
    "slim-95": PruneConfig(0.95, 0.9, 1),
}


def percentile_index(p: float, n: int) -> int:
    """``floor(p * n)`` on the decimal value of ``p``, snapping products within
    1e-9 of an integer (so 0.9 * 30 is 27 and (11 / 36) * 36 is 11)."""
    x = Fraction(repr(float(p))) * n
    r = round(x)
    if abs(x - r) <= Fraction(1, 10 ** 9):
        return int(r)
    return math.floor(x)


# ---------------------------------------------------------------- thresholds


def collect_scaling_factors(net: NetworkDef, store: WeightStore) -> Dict[int, np.ndarray]:
    """|gamma| for every BN convolution, keyed by layer index."""
    out = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Convolutional) and layer.batch_normalize:
            out[i] = np.abs(store.layers[i].gamma).astype(np.float64)
    return out


def compute_global_threshold(values, ratio: float) -> float:
    """Nearest-rank percentile: the element at 0-based index ``floor(ratio * N)``
    of the ascending sort. Channels strictly below it are pruned."""
    if ratio >= 1 or ratio < 0:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    pooled = np.sort(np.concatenate([np.ravel(v) for v in values]) if len(values) else np.array([]))
    if pooled.size == 0:
        raise ValueError("no scaling factors to threshold")
    return float(pooled[percentile_index(ratio, pooled.size)])


def compute_local_thresholds(factors: Dict[int, np.ndarray], percentile: float) -> Dict[int, float]:
    """Per-layer safety threshold: value at index ``floor(percentile * N_l)`` of the
    layer's ascending |gamma|. Strict-below pruning against it keeps at least
    ``ceil((1 - percentile) * N_l)`` channels."""
    out = {}
    for i, f in factors.items():
        if f.size == 0:
            raise PruneError(f"layer {i} has no channels")
        s = np.sort(f)
        out[i] = float(s[min(percentile_index(percentile, s.size), s.size - 1)])
    return out


# ---------------------------------------------------------------- masks


@dataclass
class ChannelMaskSet:
    masks: List[np.ndarray]
    provenance: List[str]

    def __len__(self):
        return len(self.masks)

    def retained(self, index: int) -> int:
        return int(self.masks[index].sum())

    def copy(self) -> "ChannelMaskSet":
        return ChannelMaskSet([m.copy() for m in self.masks], list(self.provenance))


def build_masks(net: NetworkDef, factors: Dict[int, np.ndarray], gamma_hat: float,
                local: Dict[int, float]) -> ChannelMaskSet:
    """Own-threshold masks for BN convs; every other layer gets an all-retain placeholder."""
    shapes = infer_shapes(net).shapes
    masks, prov = [], []
    for i, layer in enumerate(net.layers):
        if i in factors:
            thr = min(gamma_hat, local[i])
            m = ~(factors[i] < thr)
            if not m.any():
                raise PruneError(f"layer {i} would lose every channel (threshold {thr})")
            masks.append(m)
            prov.append(OWN)
        else:
            masks.append(np.ones(shapes[i].c, dtype=bool))
            prov.append(ALL)
    return ChannelMaskSet(masks, prov)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def roots(self):
        return np.array([self.find(a) for a in range(len(self.parent))], dtype=np.int64)


def propagate_masks(net: NetworkDef, masks: ChannelMaskSet) -> ChannelMaskSet:
    """Make masks consistent with the graph.

    Each convolution output channel is an atom; routes concatenate their
    sources' atoms, pools/upsample/yolo pass them through, and a shortcut
    identifies its two inputs channel by channel. An atom class is retained
    if any of its members is, which is the OR over every layer reachable
    through chains of shortcuts.
    """
    c_img = net.channels
    atoms: List[np.ndarray] = []
    n_atoms = c_img
    starts = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Convolutional):
            starts[i] = n_atoms
            n_atoms += layer.filters
    retain = np.zeros(n_atoms, dtype=bool)
    retain[:c_img] = True
    uf = _UnionFind(n_atoms)
    grouped = set()
    image = np.arange(c_img)

    for i, layer in enumerate(net.layers):
        prev = image if i == 0 else atoms[i - 1]
        if isinstance(layer, Convolutional):
            ids = np.arange(starts[i], starts[i] + layer.filters)
            own = masks.masks[i] if layer.batch_normalize else np.ones(layer.filters, dtype=bool)
            if own.shape != ids.shape:
                raise PruneError(f"layer {i}: mask length {own.size}, layer has {ids.size} channels")
            retain[ids] = own
        elif isinstance(layer, Route):
            ids = np.concatenate([atoms[s] for s in net.sources(i)])
        elif isinstance(layer, Shortcut):
            a, b = net.sources(i)
            ids_a, ids_b = atoms[a], atoms[b]
            if ids_a.size != ids_b.size:
                raise PruneError(f"shortcut {i} joins {ids_a.size} and {ids_b.size} channels")
            for u, v in zip(ids_a.tolist(), ids_b.tolist()):
                uf.union(u, v)
            grouped.update((i, a, b))
            ids = ids_a
        elif isinstance(layer, (MaxPool, Upsample, Yolo)):
            ids = prev
        else:
            raise TypeError(f"cannot propagate through {layer!r}")
        atoms.append(ids)

    roots = uf.roots()
    merged = np.zeros(n_atoms, dtype=bool)
    np.logical_or.at(merged, roots, retain)
    final = merged[roots]

    out, prov = [], []
    for i, layer in enumerate(net.layers):
        m = final[atoms[i]]
        if not m.any():
            raise PruneError(f"layer {i} retains no channels after propagation")
        out.append(m)
        if i in grouped:
            prov.append(MERGED)
        elif isinstance(layer, Convolutional):
            prov.append(OWN if layer.batch_normalize else ALL)
        elif isinstance(layer, Route):
            prov.append(ROUTE)
        else:
            prov.append(PASS)
    return ChannelMaskSet(out, prov)


# ---------------------------------------------------------------- slicing


@dataclass
class LayerPrune:
    index: int
    kind: str
    before: int
    after: int
    threshold: Optional[float] = None
    local: Optional[float] = None
    ties: int = 0
    provenance: str = ""


@dataclass
class PruneReport:
    layers: List[LayerPrune] = field(default_factory=list)
    gamma_hat: Optional[float] = None
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0
    input_hw: Tuple[int, int] = (0, 0)

    @property
    def volume_before(self) -> int:
        return 4 * self.params_before + 20

    @property
    def volume_after(self) -> int:
        return 4 * self.params_after + 20

    @staticmethod
    def _reduction(before, after):
        return 100.0 * (before - after) / before if before else 0.0

    @property
    def params_reduction(self) -> float:
        return self._reduction(self.params_before, self.params_after)

    @property
    def flops_reduction(self) -> float:
        return self._reduction(self.flops_before, self.flops_after)

    @property
    def volume_reduction(self) -> float:
        return self._reduction(self.volume_before, self.volume_after)

    @property
    def channels_before(self) -> int:
        return sum(l.before for l in self.layers)

    @property
    def channels_after(self) -> int:
        return sum(l.after for l in self.layers)

    def to_text(self) -> str:
        lines = []
        if self.gamma_hat is not None:
            lines.append(f"global threshold: {self.gamma_hat:.6g}")
        lines.append(f"{'idx':>4} {'before':>7} {'after':>7} {'local':>10} {'ties':>5}  provenance")
        for l in self.layers:
            loc = "" if l.local is None else f"{l.local:.4g}"
            lines.append(f"{l.index:>4} {l.before:>7} {l.after:>7} {loc:>10} {l.ties:>5}  {l.provenance}")
        h, w = self.input_hw
        lines.append(f"channels: {self.channels_before} -> {self.channels_after}")
        lines.append(f"params:   {self.params_before} -> {self.params_after} "
                     f"(-{self.params_reduction:.1f}%)")
        lines.append(f"BFLOPS@{h}x{w}: {self.flops_before / 1e9:.3f} -> {self.flops_after / 1e9:.3f} "
                     f"(-{self.flops_reduction:.1f}%)")
        lines.append(f"volume:   {self.volume_before} -> {self.volume_after} bytes "
                     f"(-{self.volume_reduction:.1f}%)")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "kind", "before", "after", "threshold", "local", "ties", "provenance"])
        for l in self.layers:
            w.writerow([l.index, l.kind, l.before, l.after,
                        "" if l.threshold is None else repr(l.threshold),
                        "" if l.local is None else repr(l.local), l.ties, l.provenance])
        w.writerow(["total", "", self.channels_before, self.channels_after,
                    "" if self.gamma_hat is None else repr(self.gamma_hat), "", "", ""])
        w.writerow(["params", "", self.params_before, self.params_after, "", "", "", ""])
        w.writerow(["flops", "", self.flops_before, self.flops_after, "", "", "", ""])
        return buf.getvalue()


def apply_pruning(net: NetworkDef, store: WeightStore, masks: ChannelMaskSet,
                  input_hw=None) -> Tuple[NetworkDef, WeightStore, PruneReport]:
    """Slice convolutions by their own (output) and predecessor (input) masks."""
    check_alignment(store, net)
    if len(masks) != len(net.layers):
        raise PruneError(f"{len(masks)} masks for {len(net.layers)} layers")
    new_net = net.copy()
    new_store = WeightStore(type(store.header)(**vars(store.header)))
    report = PruneReport()
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, Convolutional):
            continue
        w = store.layers[i]
        in_mask = np.ones(w.kernel.shape[1], dtype=bool) if i == 0 else masks.masks[i - 1]
        out_mask = masks.masks[i]
        if not layer.batch_normalize and not out_mask.all():
            raise PruneError(f"layer {i} has no BN and cannot lose output channels")
        if in_mask.size != w.kernel.shape[1] or out_mask.size != w.kernel.shape[0]:
            raise PruneError(f"layer {i}: masks ({out_mask.size}, {in_mask.size}) do not fit "
                             f"kernel {w.kernel.shape}")
        kernel = w.kernel[out_mask][:, in_mask]
        sl = lambda a: None if a is None else a[out_mask]
        new_store.layers[i] = ConvWeights(np.ascontiguousarray(kernel), sl(w.bias), sl(w.gamma),
                                          sl(w.mean), sl(w.var))
        new_net.layers[i].filters = int(out_mask.sum())
        report.layers.append(LayerPrune(i, layer.kind, layer.filters, int(out_mask.sum()),
                                        provenance=masks.provenance[i]))

    before = cost_report(net, input_hw)
    after = cost_report(new_net, input_hw)
    report.params_before, report.params_after = before.total_params, after.total_params
    report.flops_before, report.flops_after = before.total_flops, after.total_flops
    report.input_hw = (before.input.h, before.input.w)
    return new_net, new_store, report


def prune(net: NetworkDef, store: WeightStore, config: PruneConfig = PruneConfig(),
          input_hw=None) -> Tuple[NetworkDef, WeightStore, PruneReport]:
    """One round: thresholds, masks, propagation and slicing."""
    factors = collect_scaling_factors(net, store)
    if not factors:
        raise PruneError("network has no batch-normalized convolutions to prune")
    gamma_hat = compute_global_threshold(list(factors.values()), config.ratio)
    local = compute_local_thresholds(factors, config.local_percentile)
    masks = propagate_masks(net, build_masks(net, factors, gamma_hat, local))
    new_net, new_store, report = apply_pruning(net, store, masks, input_hw)
    report.gamma_hat = gamma_hat
    for entry in report.layers:
        if entry.index in factors:
            thr = min(gamma_hat, local[entry.index])
            entry.threshold = thr
            entry.local = local[entry.index]
            entry.ties = int(np.count_nonzero(factors[entry.index] == thr))
    return new_net, new_store, report


FinetuneHook = Callable[[NetworkDef, WeightStore, int], Optional[Tuple[NetworkDef, WeightStore]]]


def iterative_prune(net: NetworkDef, store: WeightStore, config: PruneConfig,
                    finetune_hook: Optional[FinetuneHook] = None, input_hw=None):
    """Alternate pruning rounds with a caller-supplied fine-tuning step.

    Each round applies ``config.ratio`` to the channels that survived the
    previous one. The hook receives ``(net, store, round_index)`` and may
    return a replacement ``(net, store)``; returning None keeps them. A
    round that breaks a mask invariant stops the loop and the completed
    rounds are returned.
    """
    reports: List[PruneReport] = []
    for r in range(config.iterations):
        try:
            new_net, new_store, report = prune(net, store, config, input_hw)
        except PruneError as exc:
            log.warning("pruning round %d aborted: %s", r, exc)
            break
        net, store = new_net, new_store
        reports.append(report)
        if finetune_hook is not None:
            tuned = finetune_hook(net, store, r)
            if tuned is not None:
                net, store = tuned
    return net, store, reports
