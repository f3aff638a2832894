import numpy as np
import pytest

from chanprune import fixture_path
from chanprune.cfg import (Convolutional, MaxPool, NetworkDef, Route, Yolo, emit_cfg, load_cfg,
                           parse_cfg, validate)
from chanprune.errors import TransformError
from chanprune.graph import count_flops, count_params, infer_shapes
from chanprune.inference import run_network
from chanprune.transforms import (PLACEMENTS, find_spp_blocks, insert_layers, insert_spp,
                                  set_classes)
from chanprune.weights import random_store

import toynets


@pytest.fixture(scope="module")
def yolov3():
    return load_cfg(fixture_path("yolov3"))


def stride1_pool_triplets(net):
    """Structural scan: routes whose sources include stride-1 pools of sizes 5, 9, 13."""
    found = []
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, Route):
            continue
        sizes = {net.layers[s].size for s in net.sources(i)
                 if isinstance(net.layers[s], MaxPool) and net.layers[s].stride == 1}
        if {5, 9, 13} <= sizes:
            found.append(i)
    return found


def test_spp3_from_baseline(yolov3):
    spp3 = insert_spp(yolov3)
    assert validate(spp3) == []
    assert len(stride1_pool_triplets(spp3)) == 3
    assert find_spp_blocks(spp3) == stride1_pool_triplets(spp3)


def test_spp1_gains_two_blocks(yolov3):
    spp1 = load_cfg(fixture_path("yolov3-spp"))
    assert len(find_spp_blocks(spp1)) == 1
    spp3 = insert_spp(spp1)
    assert len(stride1_pool_triplets(spp3)) == 3
    assert spp3 == insert_spp(yolov3)


def test_idempotent(yolov3):
    once = insert_spp(yolov3)
    assert insert_spp(once) == once


def test_spp3_costs_at_832(yolov3):
    spp3 = insert_spp(yolov3)
    assert count_params(spp3) / 1e6 == pytest.approx(63.9, rel=0.03)
    assert count_flops(spp3, 832) / 1e9 == pytest.approx(284.10, rel=0.03)
    ten = insert_spp(set_classes(yolov3, 10))
    assert round(count_flops(ten, 832) / 1e9, 2) == 284.10


def test_spp_block_quadruples_channels(yolov3):
    spp3 = insert_spp(yolov3)
    shapes = infer_shapes(spp3, 416).shapes
    for r in find_spp_blocks(spp3):
        src = spp3.sources(r)[-1]
        assert shapes[r].c == 4 * shapes[src].c
        assert shapes[r][:2] == shapes[src][:2]


def test_upstream_placement_layout(yolov3):
    up = insert_spp(yolov3, "upstream")
    assert validate(up) == []
    blocks = find_spp_blocks(up)
    assert len(blocks) == 3
    # each block is followed by the 1x1 reduce conv back to the source width
    shapes = infer_shapes(up).shapes
    for r in blocks:
        nxt = up.layers[r + 1]
        assert isinstance(nxt, Convolutional) and nxt.size == 1
        assert nxt.filters == shapes[up.sources(r)[-1]].c


def test_literal_identity_matches_implicit():
    rng = np.random.default_rng(0)
    # tiny has too few convs per head for a six-conv block; build a small six-conv head
    layers = [toynets.conv(4), toynets.conv(4, s=2)] + [toynets.conv(4, k=1) for _ in range(6)]
    layers += toynets.head(1)
    net = NetworkDef({"width": "16", "height": "16", "channels": "3"}, layers)
    implicit = insert_spp(net, [PLACEMENTS["upstream"][0]])
    literal = insert_spp(net, [PLACEMENTS["upstream"][0]], literal_identity=True)
    assert validate(implicit) == [] and validate(literal) == []
    assert len(literal.layers) == len(implicit.layers) + 2
    assert count_params(literal) == count_params(implicit)
    si = random_store(implicit, rng)
    # same conv sequence, so the weights can be transplanted by order
    conv_i = [i for i, l in enumerate(implicit.layers) if isinstance(l, Convolutional)]
    conv_l = [i for i, l in enumerate(literal.layers) if isinstance(l, Convolutional)]
    sl = type(si)(si.header, {b: si.layers[a] for a, b in zip(conv_i, conv_l)})
    x = rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    a = run_network(implicit, si, x, decode=False).head_outputs(implicit)[0]
    b = run_network(literal, sl, x, decode=False).head_outputs(literal)[0]
    assert np.array_equal(a, b)


def test_too_short_head_rejected():
    net = set_classes(load_cfg(fixture_path("yolov3-tiny")), 1)
    with pytest.raises(TransformError, match="head"):
        insert_spp(net)


def test_no_yolo_rejected():
    net = NetworkDef({"width": "8", "height": "8", "channels": "3"}, [toynets.conv(2)])
    with pytest.raises(TransformError):
        insert_spp(net)


def test_insert_layers_remaps_references():
    net = load_cfg(fixture_path("yolov3-tiny"))
    before = [net.references(i) for i in range(len(net.layers))]
    new = insert_layers(net, 3, [MaxPool(1, 1), MaxPool(1, 1)])
    assert validate(new) == []
    shift = lambda j: j if j <= 3 else j + 2
    for i in range(len(net.layers)):
        assert new.references(shift(i)) == [shift(s) for s in before[i]]
    # written form preserved: tiny's absolute "8" stays absolute, relative stays relative
    r = [l for l in new.layers if isinstance(l, Route) and len(l.layers) == 2][0]
    assert r.layers[0] < 0 and r.layers[1] == 10
    assert parse_cfg(emit_cfg(new)) == new


def test_set_classes():
    net = set_classes(load_cfg(fixture_path("yolov3")), 10)
    assert validate(net) == []
    for i in net.yolo_indices():
        assert net.layers[i].classes == 10
        assert net.layers[i - 1].filters == 45
