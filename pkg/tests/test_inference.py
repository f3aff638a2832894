import math

import numpy as np
import pytest

from chanprune import fixture_path
from chanprune.cfg import Convolutional, MaxPool, NetworkDef, Route, Shortcut, Yolo, load_cfg
from chanprune.errors import DecodeError, InputFormatError, ShapeError
from chanprune.inference import (conv_bn_act_forward, layer_forward, read_tensor, run_network,
                                 write_tensor, yolo_decode)
from chanprune.weights import ConvWeights, WeightStore, random_store


def identity_net(c=2):
    net = NetworkDef({"width": "5", "height": "4", "channels": str(c)},
                     [Convolutional(filters=c, size=1, activation="linear")])
    store = WeightStore(layers={0: ConvWeights(np.eye(c, dtype=np.float32).reshape(c, c, 1, 1),
                                               np.zeros(c, np.float32))})
    return net, store


def test_identity_conv():
    net, store = identity_net()
    x = np.random.default_rng(0).standard_normal((2, 4, 5)).astype(np.float32)
    out = run_network(net, store, x).outputs[-1]
    assert np.array_equal(out, x)


def test_zero_gamma_gives_constant_beta():
    rng = np.random.default_rng(1)
    layer = Convolutional(filters=3, size=3, pad=1, batch_normalize=1, activation="linear")
    w = ConvWeights(rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
                    np.array([0.5, -1.0, 2.0], np.float32), np.array([0.0, 1.0, 0.0], np.float32),
                    rng.standard_normal(3).astype(np.float32), np.ones(3, np.float32))
    for _ in range(3):
        y = conv_bn_act_forward(rng.standard_normal((2, 6, 6)).astype(np.float32), layer, w)
        assert np.all(y[0] == 0.5) and np.all(y[2] == 2.0)


def test_bn_formula():
    layer = Convolutional(filters=1, size=1, batch_normalize=1, activation="leaky")
    w = ConvWeights(np.full((1, 1, 1, 1), 2.0, np.float32), np.array([0.1], np.float32),
                    np.array([3.0], np.float32), np.array([1.0], np.float32),
                    np.array([4.0], np.float32))
    x = np.array([[[0.0, 5.0]]], np.float32)
    y = conv_bn_act_forward(x, layer, w)
    pre = 3.0 * (np.array([0.0, 10.0]) - 1.0) / math.sqrt(4.0 + 1e-6) + 0.1
    expect = np.where(pre > 0, pre, 0.1 * pre)
    np.testing.assert_allclose(y[0, 0], expect, rtol=1e-6)


def test_channel_mismatch():
    net, store = identity_net(2)
    with pytest.raises(ShapeError):
        conv_bn_act_forward(np.zeros((3, 2, 2), np.float32), net.layers[0], store.layers[0])
    with pytest.raises(ShapeError):
        run_network(net, store, np.zeros((3, 4, 5), np.float32))


def test_shortcut_and_route_forward():
    a = np.ones((2, 2, 2), np.float32)
    b = np.full((2, 2, 2), -3.0, np.float32)
    assert np.all(layer_forward(Shortcut(-2, "linear"), [a, b]) == -2)
    assert layer_forward(Route([-1, -2]), [a, b[:1]]).shape == (3, 2, 2)
    with pytest.raises(ShapeError):
        layer_forward(Shortcut(-2), [a, b[:1]])
    assert np.array_equal(layer_forward(MaxPool(1, 1), [b]), b)


def test_decode_zero_logits():
    dets = yolo_decode(np.zeros((6, 1, 1), np.float32), [(10, 14)], 1, (416, 416))
    assert len(dets) == 1
    d = dets[0]
    assert (d.x, d.y, d.w, d.h) == (208.0, 208.0, 10.0, 14.0)
    assert d.objectness == 0.5


def test_decode_threshold():
    t = np.zeros((6, 1, 1), np.float32)
    t[4] = math.log(0.05 / 0.95)
    assert yolo_decode(t, [(10, 14)], 1, (416, 416), threshold=0.1) == []
    assert len(yolo_decode(t, [(10, 14)], 1, (416, 416), threshold=0.01)) == 1


def test_decode_saturation_and_grid():
    t = np.zeros((6, 2, 4), np.float32)
    t[0] = 50.0
    dets = yolo_decode(t, [(10, 14)], 1, (64, 128))
    xs = sorted({round(d.x, 3) for d in dets})
    assert xs == [32.0, 64.0, 96.0, 128.0]  # right edge of each of the 4 cells
    assert sorted({d.y for d in dets}) == [16.0, 48.0]


def test_decode_mask_and_bad_channels():
    anchors = [(1, 1), (10, 14), (5, 5)]
    dets = yolo_decode(np.zeros((6, 1, 1), np.float32), anchors, 1, (32, 32), mask=[1])
    assert (dets[0].w, dets[0].h) == (10.0, 14.0)
    with pytest.raises(DecodeError):
        yolo_decode(np.zeros((7, 1, 1), np.float32), [(10, 14)], 1, (32, 32))


def test_tiny_zero_input_runs():
    net = load_cfg(fixture_path("yolov3-tiny"))
    store = random_store(net, np.random.default_rng(0))
    out = run_network(net, store, np.zeros((3, 416, 416), np.float32))
    assert all(np.all(np.isfinite(o)) for o in out.outputs)
    assert [o.shape for o in out.head_outputs(net)] == [(255, 13, 13), (255, 26, 26)]
    for d in out.detections:
        assert d.objectness > 0.1 and 0 <= d.class_id < 80


def test_repeatable():
    net = load_cfg(fixture_path("yolov3-tiny"))
    store = random_store(net, np.random.default_rng(2))
    x = np.random.default_rng(3).uniform(-1, 1, (3, 64, 64)).astype(np.float32)
    a = run_network(net, store, x, decode=False).outputs[-1]
    b = run_network(net, store, x, decode=False).outputs[-1]
    assert np.array_equal(a, b)


def test_tensor_blob_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    p = tmp_path / "x.bin"
    write_tensor(p, x)
    assert p.stat().st_size == x.size * 4
    assert np.array_equal(read_tensor(p), x)
    assert np.array_equal(read_tensor(p, (3, 4, 5)), x)
    with pytest.raises(InputFormatError):
        read_tensor(p, (3, 4, 4))
    (tmp_path / "x.bin.shape").unlink()
    with pytest.raises(InputFormatError):
        read_tensor(p)
