import struct

import numpy as np
import pytest

from chanprune import fixture_path
from chanprune.cfg import Convolutional, NetworkDef, load_cfg
from chanprune.errors import (AlignmentError, WeightsError, WeightsOverflowError,
                              WeightsUnderflowError)
from chanprune.weights import (ConvWeights, WeightStore, expected_float_count, random_store,
                               read_weights, write_weights)


def one_conv_net(bn=True, filters=1, c=1, size=1):
    return NetworkDef({"width": "4", "height": "4", "channels": str(c)},
                      [Convolutional(filters=filters, size=size, batch_normalize=int(bn))])


def test_hand_built_bn_fixture():
    beta, gamma, mean, var, w = 0.25, 1.5, -0.5, 2.0, 3.0
    blob = struct.pack("<iiiQ", 0, 2, 0, 0) + struct.pack("<5f", beta, gamma, mean, var, w)
    assert len(blob) == 20 + 4 * 4 + 4
    store = read_weights(blob, one_conv_net())
    lw = store.layers[0]
    assert lw.gamma.tolist() == [gamma] and lw.bias.tolist() == [beta]
    assert lw.mean.tolist() == [mean] and lw.var.tolist() == [var]
    assert lw.kernel.shape == (1, 1, 1, 1) and lw.kernel.item() == w
    assert write_weights(store, one_conv_net()) == blob


def test_non_bn_layout_is_bias_then_kernel():
    net = NetworkDef({"width": "4", "height": "4", "channels": "2"},
                     [Convolutional(filters=1, size=1, batch_normalize=1),
                      Convolutional(filters=2, size=1, batch_normalize=0)])
    floats = [0.1, 1.0, 0.0, 1.0, 7.0, 9.0,   # layer 0: beta gamma mean var, 1x2 kernel
              8.0, 0.5, -0.5, 2.0]            # layer 1: two biases, 2x1 kernel
    blob = struct.pack("<iiiQ", 0, 2, 0, 5) + struct.pack(f"<{len(floats)}f", *floats)
    store = read_weights(blob, net)
    assert store.layers[0].kernel.ravel().tolist() == [7.0, 9.0]
    l1 = store.layers[1]
    assert not l1.batch_normalize and l1.gamma is None
    assert l1.bias.tolist() == [8.0, 0.5] and l1.kernel.ravel().tolist() == [-0.5, 2.0]
    assert store.header.seen == 5


def test_legacy_header_with_32bit_seen():
    blob = struct.pack("<iiiI", 0, 1, 0, 7) + struct.pack("<2f", 0.5, 2.0)
    store = read_weights(blob, one_conv_net(bn=False))
    assert store.header.seen == 7 and not store.header.wide_seen
    # written back in the current layout
    out = write_weights(store, one_conv_net(bn=False))
    assert out[:20] == struct.pack("<iiiQ", 0, 2, 0, 7) and len(out) == 28


def test_short_stream_underflow():
    with pytest.raises(WeightsUnderflowError):
        read_weights(b"\x00" * 10, one_conv_net())


def test_truncated_layer_names_layer():
    net = load_cfg(fixture_path("yolov3-tiny"))
    blob = write_weights(random_store(net, np.random.default_rng(0)), net)
    with pytest.raises(WeightsUnderflowError, match="layer 0"):
        read_weights(blob[:40], net)
    with pytest.raises(WeightsUnderflowError, match=r"layer \d+"):
        read_weights(blob[:-4], net)


def test_trailing_bytes_overflow():
    net = one_conv_net()
    blob = write_weights(random_store(net, np.random.default_rng(0)), net)
    with pytest.raises(WeightsOverflowError, match="12 trailing"):
        read_weights(blob + b"\x00" * 12, net)


def test_negative_variance_rejected():
    blob = struct.pack("<iiiQ", 0, 2, 0, 0) + struct.pack("<5f", 0, 1, 0, -1, 1)
    with pytest.raises(WeightsError):
        read_weights(blob, one_conv_net())


@pytest.mark.parametrize("name", ["yolov3-tiny", "yolov3-spp"])
def test_fixture_byte_round_trip(name):
    net = load_cfg(fixture_path(name))
    blob = write_weights(random_store(net, np.random.default_rng(1)), net)
    assert len(blob) == 20 + 4 * expected_float_count(net)
    assert write_weights(read_weights(blob, net), net) == blob


def test_length_formula_independent():
    net = NetworkDef({"width": "8", "height": "8", "channels": "3"},
                     [Convolutional(filters=5, size=3, batch_normalize=1),
                      Convolutional(filters=2, size=1, batch_normalize=0)])
    blob = write_weights(random_store(net, np.random.default_rng(0)), net)
    assert len(blob) == 20 + 4 * ((4 * 5 + 5 * 3 * 9) + (2 + 2 * 5))


def test_empty_network_header_only():
    net = NetworkDef({"width": "8", "height": "8", "channels": "3"}, [])
    assert write_weights(WeightStore(), net) == struct.pack("<iiiQ", 0, 2, 0, 0)


def test_misaligned_store():
    net = one_conv_net(filters=2)
    store = random_store(one_conv_net(filters=3), np.random.default_rng(0))
    with pytest.raises(AlignmentError):
        write_weights(store, net)
    store = random_store(net, np.random.default_rng(0))
    store.layers[0] = ConvWeights(store.layers[0].kernel, store.layers[0].bias)
    with pytest.raises(AlignmentError, match="batch_normalize"):
        write_weights(store, net)


def test_store_equality_is_bitwise():
    net = one_conv_net(filters=3, c=2, size=3)
    a = random_store(net, np.random.default_rng(3))
    b = a.copy()
    assert a == b
    b.layers[0].kernel[0, 0, 0, 0] = np.nextafter(b.layers[0].kernel[0, 0, 0, 0], np.float32(9))
    assert a != b
