"""Darknet-style network configuration documents.

A document is a sequence of ``[section]`` headers, each followed by
``key=value`` lines. The first section is the ``[net]`` header; every later
section is one layer, numbered from 0 in document order.

Keys the toolkit does not interpret are kept as opaque strings in each
layer's ``extra`` mapping and written back unchanged.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import ClassVar, Dict, List, Optional, Tuple

from .errors import CfgParseError, CfgReferenceError, CfgStructureError

__all__ = [
    "Convolutional", "MaxPool", "Upsample", "Route", "Shortcut", "Yolo",
    "NetworkDef", "Diagnostic", "parse_cfg", "emit_cfg", "validate",
    "load_cfg", "save_cfg", "resolve_ref",
]


@dataclass
class Convolutional:
    kind: ClassVar[str] = "convolutional"
    filters: int
    size: int = 1
    stride: int = 1
    pad: int = 0
    batch_normalize: int = 0
    activation: str = "logistic"
    extra: Dict[str, str] = field(default_factory=dict)

    @property
    def padding(self) -> int:
        if self.pad:
            return self.size // 2
        return int(self.extra.get("padding", 0))


@dataclass
class MaxPool:
    kind: ClassVar[str] = "maxpool"
    size: int = 1
    stride: int = 1
    extra: Dict[str, str] = field(default_factory=dict)

    @property
    def padding(self) -> int:
        """Total padding (top + bottom); Darknet default is ``size - 1``."""
        return int(self.extra.get("padding", self.size - 1))


@dataclass
class Upsample:
    kind: ClassVar[str] = "upsample"
    stride: int = 2
    extra: Dict[str, str] = field(default_factory=dict)


@dataclass
class Route:
    kind: ClassVar[str] = "route"
    layers: List[int] = field(default_factory=list)
    extra: Dict[str, str] = field(default_factory=dict)


@dataclass
class Shortcut:
    kind: ClassVar[str] = "shortcut"
    from_: int = -1
    activation: str = "linear"
    extra: Dict[str, str] = field(default_factory=dict)


@dataclass
class Yolo:
    kind: ClassVar[str] = "yolo"
    mask: List[int] = field(default_factory=list)
    anchors: List[Tuple[float, float]] = field(default_factory=list)
    classes: int = 80
    extra: Dict[str, str] = field(default_factory=dict)


LAYER_TYPES = {
    "convolutional": Convolutional,
    "conv": Convolutional,
    "maxpool": MaxPool,
    "max": MaxPool,
    "upsample": Upsample,
    "route": Route,
    "shortcut": Shortcut,
    "yolo": Yolo,
}

# Darknet layer kinds that exist but are outside the YOLOv3 family.
UNSUPPORTED = {
    "connected", "lstm", "rnn", "gru", "crnn", "region", "reorg", "detection",
    "softmax", "dropout", "avgpool", "local", "cost", "crop", "deconvolutional",
    "batchnorm", "normalization", "activation", "iseg", "l2norm", "logistic",
}


@dataclass
class NetworkDef:
    net_header: Dict[str, str] = field(default_factory=dict)
    layers: list = field(default_factory=list)

    def _header_int(self, key):
        try:
            return int(self.net_header[key])
        except KeyError:
            raise CfgStructureError(f"[net] header is missing '{key}'") from None
        except ValueError:
            raise CfgStructureError(
                f"[net] '{key}' is not an integer: {self.net_header[key]!r}") from None

    @property
    def width(self) -> int:
        return self._header_int("width")

    @property
    def height(self) -> int:
        return self._header_int("height")

    @property
    def channels(self) -> int:
        return self._header_int("channels")

    def __len__(self):
        return len(self.layers)

    def copy(self) -> "NetworkDef":
        return NetworkDef(dict(self.net_header), [_copy_layer(l) for l in self.layers])

    def sources(self, index: int) -> List[int]:
        """Absolute indices of the layers feeding ``layers[index]``."""
        layer = self.layers[index]
        if isinstance(layer, Route):
            return [resolve_ref(index, r) for r in layer.layers]
        if isinstance(layer, Shortcut):
            return [index - 1, resolve_ref(index, layer.from_)]
        return [index - 1]

    def references(self, index: int) -> List[int]:
        """Explicit route/shortcut references of ``layers[index]``, made absolute."""
        layer = self.layers[index]
        if isinstance(layer, (Route, Shortcut)):
            return self.sources(index)
        return []

    def yolo_indices(self) -> List[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Yolo)]


def _copy_layer(layer):
    kw = {}
    for f in dataclasses.fields(layer):
        v = getattr(layer, f.name)
        kw[f.name] = list(v) if isinstance(v, list) else dict(v) if isinstance(v, dict) else v
    return type(layer)(**kw)


def resolve_ref(index: int, ref: int) -> int:
    """Absolute layer index for a route/shortcut reference written at ``index``."""
    return index + ref if ref < 0 else ref


@dataclass(frozen=True)
class Diagnostic:
    layer: int  # -1 for the [net] header
    reason: str

    def __str__(self):
        where = "[net]" if self.layer < 0 else f"layer {self.layer}"
        return f"{where}: {self.reason}"


# ---------------------------------------------------------------- parsing


def _int(value, key, line):
    try:
        return int(value)
    except ValueError:
        raise CfgParseError(f"'{key}' expects an integer, got {value!r}", line) from None


def _int_list(value, key, line):
    parts = [p.strip() for p in value.split(",") if p.strip()]
    if not parts:
        raise CfgParseError(f"'{key}' is empty", line)
    return [_int(p, key, line) for p in parts]


def _number(text, key, line):
    try:
        x = float(text)
    except ValueError:
        raise CfgParseError(f"'{key}' expects numbers, got {text!r}", line) from None
    return int(x) if x.is_integer() else x


def _build_layer(kind, items, line):
    """items: list of (key, value, line_no)."""
    cls = LAYER_TYPES[kind]
    kw = {}
    extra = {}
    for key, value, ln in items:
        if cls is Convolutional and key in ("filters", "size", "stride", "pad", "batch_normalize"):
            kw[key] = _int(value, key, ln)
        elif cls is Convolutional and key == "activation":
            kw[key] = value
        elif cls is MaxPool and key in ("size", "stride"):
            kw[key] = _int(value, key, ln)
        elif cls is Upsample and key == "stride":
            kw[key] = _int(value, key, ln)
        elif cls is Route and key == "layers":
            kw["layers"] = _int_list(value, key, ln)
        elif cls is Shortcut and key == "from":
            vals = _int_list(value, key, ln)
            if len(vals) != 1:
                raise CfgParseError("shortcut 'from' takes exactly one index", ln)
            kw["from_"] = vals[0]
        elif cls is Shortcut and key == "activation":
            kw[key] = value
        elif cls is Yolo and key == "mask":
            kw["mask"] = _int_list(value, key, ln)
        elif cls is Yolo and key == "anchors":
            nums = [_number(p.strip(), key, ln) for p in value.split(",") if p.strip()]
            if len(nums) % 2:
                raise CfgParseError("anchors must come in (w,h) pairs", ln)
            kw["anchors"] = [(nums[i], nums[i + 1]) for i in range(0, len(nums), 2)]
        elif cls is Yolo and key == "classes":
            kw["classes"] = _int(value, key, ln)
        else:
            extra[key] = value
    if cls is Convolutional and "filters" not in kw:
        raise CfgParseError("convolutional section without 'filters'", line)
    if cls is Route and "layers" not in kw:
        raise CfgParseError("route section without 'layers'", line)
    if cls is Shortcut and "from_" not in kw:
        raise CfgParseError("shortcut section without 'from'", line)
    if cls is MaxPool and "size" not in kw and "stride" in kw:
        kw["size"] = kw["stride"]
    return cls(extra=extra, **kw)


def parse_cfg(text: str) -> NetworkDef:
    """Parse a configuration document into a :class:`NetworkDef`.

    Raises :class:`CfgParseError` for unknown sections or malformed lines,
    :class:`CfgStructureError` when the ``[net]`` header is missing and
    :class:`CfgReferenceError` when a route/shortcut points outside the
    layers defined before it.
    """
    sections = []  # (name, header line, items)
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise CfgParseError(f"unterminated section header {line!r}", line_no)
            name = line[1:-1].strip().lower()
            if not sections:
                if name not in ("net", "network"):
                    raise CfgStructureError(
                        f"line {line_no}: first section must be [net], got [{name}]")
            elif name in ("net", "network"):
                raise CfgParseError("duplicate [net] section", line_no)
            elif name in UNSUPPORTED:
                raise CfgParseError(f"unsupported layer type [{name}]", line_no)
            elif name not in LAYER_TYPES:
                raise CfgParseError(f"unknown section [{name}]", line_no)
            sections.append((name, line_no, []))
            continue
        if "=" not in line:
            raise CfgParseError(f"expected key=value, got {line!r}", line_no)
        if not sections:
            raise CfgStructureError(f"line {line_no}: key=value before the [net] header")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise CfgParseError(f"missing key in {line!r}", line_no)
        sections[-1][2].append((key, value, line_no))

    if not sections:
        raise CfgStructureError("document has no [net] header")

    header = {k: v for k, v, _ in sections[0][2]}
    layers = [_build_layer(name, items, ln) for name, ln, items in sections[1:]]
    net = NetworkDef(header, layers)
    for i in range(len(layers)):
        for src in net.references(i):
            if not 0 <= src < i:
                raise CfgReferenceError(
                    f"layer {i} ({layers[i].kind}) references layer {src}, "
                    f"outside [0, {i})")
    return net


# ---------------------------------------------------------------- emission


def _fmt_num(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _layer_items(layer):
    if isinstance(layer, Convolutional):
        items = [("batch_normalize", layer.batch_normalize), ("filters", layer.filters),
                 ("size", layer.size), ("stride", layer.stride), ("pad", layer.pad),
                 ("activation", layer.activation)]
    elif isinstance(layer, MaxPool):
        items = [("size", layer.size), ("stride", layer.stride)]
    elif isinstance(layer, Upsample):
        items = [("stride", layer.stride)]
    elif isinstance(layer, Route):
        items = [("layers", ",".join(str(r) for r in layer.layers))]
    elif isinstance(layer, Shortcut):
        items = [("from", layer.from_), ("activation", layer.activation)]
    elif isinstance(layer, Yolo):
        items = [("mask", ",".join(str(m) for m in layer.mask)),
                 ("anchors", ", ".join(f"{_fmt_num(w)},{_fmt_num(h)}" for w, h in layer.anchors)),
                 ("classes", layer.classes)]
    else:
        raise TypeError(f"not a layer: {layer!r}")
    return items + list(layer.extra.items())


def emit_cfg(net: NetworkDef) -> str:
    """Canonical text for ``net``; ``parse_cfg(emit_cfg(net)) == net``."""
    out = ["[net]"]
    out += [f"{k}={v}" for k, v in net.net_header.items()]
    for layer in net.layers:
        out.append("")
        out.append(f"[{layer.kind}]")
        out += [f"{k}={v}" for k, v in _layer_items(layer)]
    return "\n".join(out) + "\n"


def load_cfg(path) -> NetworkDef:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_cfg(fh.read())


def save_cfg(net: NetworkDef, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(emit_cfg(net))


# ---------------------------------------------------------------- validation


def validate(net: NetworkDef) -> List[Diagnostic]:
    """Check structural invariants; an empty list means the network is valid."""
    diags = []
    for key in ("width", "height", "channels"):
        value = net.net_header.get(key)
        try:
            ok = value is not None and int(value) > 0
        except ValueError:
            ok = False
        if not ok:
            diags.append(Diagnostic(-1, f"'{key}' must be a positive integer, got {value!r}"))

    for i, layer in enumerate(net.layers):
        if isinstance(layer, Convolutional):
            for name in ("filters", "size", "stride"):
                if getattr(layer, name) < 1:
                    diags.append(Diagnostic(i, f"{name} must be >= 1"))
        elif isinstance(layer, MaxPool):
            if layer.size < 1 or layer.stride < 1:
                diags.append(Diagnostic(i, "maxpool size and stride must be >= 1"))
        elif isinstance(layer, Upsample):
            if layer.stride < 1:
                diags.append(Diagnostic(i, "upsample stride must be >= 1"))
        elif isinstance(layer, Yolo):
            if layer.classes < 1:
                diags.append(Diagnostic(i, "classes must be >= 1"))
            bad = [m for m in layer.mask if not 0 <= m < len(layer.anchors)]
            if bad:
                diags.append(Diagnostic(
                    i, f"mask indices {bad} out of range for {len(layer.anchors)} anchors"))
        for src in net.references(i):
            if not 0 <= src < i:
                diags.append(Diagnostic(i, f"reference to layer {src} outside [0, {i})"))

    if diags:
        return diags

    # Shape-level checks only make sense on a structurally sound network.
    from .errors import ShapeError
    from .graph import infer_shapes

    try:
        shapes = infer_shapes(net)
    except ShapeError as exc:
        return [Diagnostic(exc.layer, str(exc))]
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Yolo):
            want = len(layer.mask) * (5 + layer.classes)
            got = shapes.shapes[i].c
            if got != want:
                diags.append(Diagnostic(
                    i, f"yolo input has {got} channels, expected {len(layer.mask)}*(5+{layer.classes})={want}"))
    return diags
