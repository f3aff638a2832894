"""Config-level model variants: SPP insertion and class-count rewrites."""
from __future__ import annotations

from typing import List, NamedTuple, Sequence, Union

from .cfg import Convolutional, MaxPool, NetworkDef, Route, Shortcut, Yolo, resolve_ref
from .errors import TransformError

__all__ = ["SppPlacement", "PLACEMENTS", "insert_spp", "insert_layers", "find_spp_blocks",
           "detection_heads", "set_classes"]

HEAD_BLOCK = 6  # convs between a head's entry point and its detection conv
SPP_POOLS = (5, 9, 13)


class SppPlacement(NamedTuple):
    """Where to put an SPP block inside one detection head.

    ``after`` counts the head's six-conv block from its start (1-based); the
    block goes between conv ``after`` and conv ``after + 1``. With ``reduce``
    a 1x1 conv squeezes the 4x-wide concatenation back to the source width.
    """
    after: int
    reduce: bool = False


PLACEMENTS = {
    # The coarse head keeps the stock yolov3-spp layout; the two finer heads
    # feed the concatenation straight into the next conv.
    "spp3": (SppPlacement(3, True), SppPlacement(4), SppPlacement(5)),
    # Stock yolov3-spp layout repeated on every head.
    "upstream": (SppPlacement(3, True),) * 3,
}


def _remap(net: NetworkDef, old_to_new) -> None:
    """Rewrite every route/shortcut reference after indices moved.

    References keep their written form: relative stays relative, absolute
    stays absolute.
    """
    n = len(net.layers)
    for new_i in range(n):
        layer = net.layers[new_i]
        old_i = getattr(layer, "_old_index", None)
        if old_i is None:
            continue

        def fix(ref):
            target = old_to_new[resolve_ref(old_i, ref)]
            return target - new_i if ref < 0 else target

        if isinstance(layer, Route):
            layer.layers = [fix(r) for r in layer.layers]
        elif isinstance(layer, Shortcut):
            layer.from_ = fix(layer.from_)


def insert_layers(net: NetworkDef, after: int, new_layers: Sequence) -> NetworkDef:
    """Insert ``new_layers`` right after layer ``after`` and re-resolve references.

    The inserted layers' own references must already be correct for their
    final positions.
    """
    out = net.copy()
    k = len(new_layers)
    old_to_new = {i: (i if i <= after else i + k) for i in range(len(out.layers))}
    for i, layer in enumerate(out.layers):
        layer._old_index = i
    out.layers[after + 1:after + 1] = list(new_layers)
    _remap(out, old_to_new)
    for layer in out.layers:
        layer.__dict__.pop("_old_index", None)
    return out


def find_spp_blocks(net: NetworkDef) -> List[int]:
    """Indices of routes that concatenate >=2 stride-1 maxpools sharing one source."""
    blocks = []
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, Route):
            continue
        pools = [s for s in net.sources(i)
                 if isinstance(net.layers[s], MaxPool) and net.layers[s].stride == 1]
        if len(pools) < 2:
            continue
        feeds = {_pool_source(net, p) for p in pools}
        if len(feeds) == 1:
            blocks.append(i)
    return blocks


def _pool_source(net, index):
    """The tensor a pool reads, looking through single-source routes."""
    src = index - 1
    while isinstance(net.layers[src], Route) and len(net.layers[src].layers) == 1:
        src = net.sources(src)[0]
    return src


def detection_heads(net: NetworkDef):
    """Per yolo layer: ``(yolo_index, conv_run, before)``.

    ``conv_run`` is the unbroken run of conv indices ending at the detection
    conv; ``before`` is the index of the layer just ahead of the run.
    """
    heads = []
    for y in net.yolo_indices():
        run = []
        i = y - 1
        while i >= 0 and isinstance(net.layers[i], Convolutional):
            run.append(i)
            i -= 1
        heads.append((y, run[::-1], i))
    return heads


def _spp_layers(channels: int, reduce: bool, literal_identity: bool):
    if literal_identity:
        # mp5 r mp9 r mp13 r mp1 route(13, 9, 5, 1)
        layers = [MaxPool(5, 1), Route([-2]), MaxPool(9, 1), Route([-4]),
                  MaxPool(13, 1), Route([-6]), MaxPool(1, 1), Route([-3, -5, -7, -1])]
    else:
        layers = [MaxPool(5, 1), Route([-2]), MaxPool(9, 1), Route([-4]),
                  MaxPool(13, 1), Route([-1, -3, -5, -6])]
    if reduce:
        layers.append(Convolutional(filters=channels, size=1, stride=1, pad=1,
                                    batch_normalize=1, activation="leaky"))
    return layers


def insert_spp(net: NetworkDef, placement: Union[str, Sequence[SppPlacement]] = "spp3",
               literal_identity: bool = False) -> NetworkDef:
    """Add an SPP block (stride-1 maxpools 5/9/13 plus identity, concatenated)
    to every detection head that does not already have one.

    ``placement`` is a preset name from :data:`PLACEMENTS` or one
    :class:`SppPlacement` per head, in yolo-layer order. With
    ``literal_identity`` the identity branch is written as a size-1 maxpool.
    """
    heads = detection_heads(net)
    if not heads:
        raise TransformError("network has no yolo layers")
    if isinstance(placement, str):
        try:
            placement = PLACEMENTS[placement]
        except KeyError:
            raise TransformError(f"unknown placement preset {placement!r}") from None
    placement = list(placement)
    if len(placement) < len(heads):
        placement += [placement[-1]] * (len(heads) - len(placement))

    existing = set(find_spp_blocks(net))
    plan = []
    for h, ((y, run, before), where) in enumerate(zip(heads, placement)):
        if before in existing:
            continue  # head already carries an SPP block
        if len(run) < HEAD_BLOCK + 1:
            raise TransformError(
                f"head {h} (yolo layer {y}) has {len(run) - 1} convs before its "
                f"detection conv; SPP insertion needs at least {HEAD_BLOCK}")
        if not 1 <= where.after < HEAD_BLOCK:
            raise TransformError(f"placement after conv {where.after} outside 1..{HEAD_BLOCK - 1}")
        block = run[-(HEAD_BLOCK + 1):-1]
        source = block[where.after - 1]
        plan.append((source, net.layers[source].filters, where.reduce))

    out = net
    # Insert from the back so earlier positions stay valid.
    for source, channels, reduce in sorted(plan, reverse=True):
        out = insert_layers(out, source, _spp_layers(channels, reduce, literal_identity))
    return out


def set_classes(net: NetworkDef, classes: int) -> NetworkDef:
    """Retarget every detection head to ``classes`` categories."""
    if classes < 1:
        raise TransformError("classes must be >= 1")
    out = net.copy()
    for y in out.yolo_indices():
        det = out.layers[y - 1]
        if not isinstance(det, Convolutional):
            raise TransformError(f"yolo layer {y} is not preceded by a convolution")
        out.layers[y].classes = classes
        det.filters = len(out.layers[y].mask) * (5 + classes)
    return out
