import itertools
import struct
import zlib

import numpy as np
import pytest

from fbs.layers import kept_count
from fbs.models import (
    CheckpointError,
    LayerSpec,
    Network,
    NetworkSpec,
    SpecError,
    build_mcifarnet,
    collect_usage,
    compact,
    deserialize,
    load,
    residual_merge,
    save,
    serialize,
)
from fbs.models.checkpoint import MAGIC
from fbs.data import Dataset, synthetic_dataset
from fbs.tensor import ChannelMask, MaskError, ShapeError

SMALL = NetworkSpec(
    (
        LayerSpec("fbs_conv", 6, 3, 1, 1, "l1"),
        LayerSpec("fbs_conv", 8, 3, 2, 1, "l2"),
        LayerSpec("fbs_conv", 8, 3, 1, 1, "var"),
        LayerSpec("global_avg_pool"),
        LayerSpec("fc", 4),
    ),
    input_shape=(3, 8, 8),
    class_count=4,
    name="small",
)

RESIDUAL = NetworkSpec(
    (
        LayerSpec("fbs_conv", 4, 3, 1, 1, "l1"),
        LayerSpec("residual_block", 4, 3, 1, 1, "l1"),
        LayerSpec("residual_block", 6, 3, 2, 1, "linf"),
        LayerSpec("global_avg_pool"),
        LayerSpec("fc", 3),
    ),
    input_shape=(3, 8, 8),
    class_count=3,
    name="toy-residual",
)


def warm(net, x, steps=2):
    """Populate running statistics with a couple of training-mode passes."""
    for _ in range(steps):
        net.forward(x, 1.0, training=True, method="gemm")
    return net


def param_count_oracle(spec):
    total = 0
    for layer, shape in zip(spec.layers, spec.shapes()):
        c_in = shape.input[0]
        c, k = layer.channels, layer.kernel
        if layer.kind == "fbs_conv":
            total += k * k * c_in * c + c + c * c_in + c
        elif layer.kind == "conv":
            total += k * k * c_in * c + 2 * c
        elif layer.kind == "fc":
            total += c_in * c + c
    return total


# ---------------------------------------------------------------- spec


def test_spec_text_round_trip():
    for spec in (SMALL, RESIDUAL, build_mcifarnet(), build_mcifarnet(fbs=False, width_divisor=4)):
        text = spec.to_text()
        assert NetworkSpec.from_text(text) == spec
        assert NetworkSpec.from_text(text).to_text() == text


def test_spec_rejects_bad_text():
    with pytest.raises(SpecError):
        NetworkSpec.from_text("input 3 8 8\nclasses 2\nfbs_conv 4 3 1\n")
    with pytest.raises(SpecError):
        NetworkSpec.from_text("input 3 8 8\nclasses 2\nwarp 4 3 1 1 l1\n")
    with pytest.raises(SpecError):
        NetworkSpec.from_text("fc 2 - - - -\n")
    with pytest.raises(SpecError):
        LayerSpec("fbs_conv", 1, 3, 1, 1, "l1")
    with pytest.raises(ValueError):
        LayerSpec("fbs_conv", 4, 3, 1, 1, "mean")


def test_spec_shape_inference_rejects_mismatch():
    with pytest.raises(SpecError):
        NetworkSpec((LayerSpec("fbs_conv", 4, 3, 1, 1, "l1"), LayerSpec("fc", 3)), (3, 8, 8), 3)
    with pytest.raises(SpecError):
        NetworkSpec((LayerSpec("global_avg_pool"), LayerSpec("fc", 3)), (3, 8, 8), 5)
    with pytest.raises(SpecError):
        NetworkSpec((LayerSpec("fbs_conv", 4, 9, 1, 0, "l1"),), (3, 8, 8), 4)


def test_mcifarnet_geometry():
    shapes = build_mcifarnet().shapes()
    outs = [s.output for s in shapes]
    assert outs[:8] == [(64, 30, 30), (64, 30, 30), (128, 15, 15), (128, 15, 15), (128, 15, 15),
                        (192, 8, 8), (192, 8, 8), (192, 8, 8)]
    assert outs[-1] == (10,)


def test_mcifarnet_parameter_count():
    net = Network.initialize(build_mcifarnet(fbs=False), seed=0)
    assert round(net.parameter_count() / 1e6, 2) == 1.30
    assert net.parameter_count() == param_count_oracle(build_mcifarnet(fbs=False))
    fbs = Network.initialize(build_mcifarnet(), seed=0)
    assert fbs.parameter_count() == param_count_oracle(build_mcifarnet())


# ---------------------------------------------------------------- forward


def test_initialize_is_seeded():
    a = Network.initialize(SMALL, seed=3)
    b = Network.initialize(SMALL, seed=3)
    c = Network.initialize(SMALL, seed=4)
    for k, v in a.parameters().items():
        assert np.array_equal(v, b.parameters()[k])
    assert not np.array_equal(a.parameters()["0.theta"], c.parameters()["0.theta"])


@pytest.mark.parametrize("d", [1.0, 0.8, 0.5, 0.3])
def test_forward_paths_agree(d, rng):
    x = rng.random((5, 3, 8, 8))
    net = warm(Network.initialize(SMALL, seed=1), x)
    sparse = net.forward(x, d, method="sparse")
    dense = net.forward(x, d, method="dense")
    gemm = net.forward(x, d, method="gemm")
    assert np.array_equal(sparse.logits, dense.logits)
    np.testing.assert_allclose(gemm.logits, dense.logits, rtol=1e-10, atol=1e-12)
    for rec, layer in zip(sparse.records, net.fbs_layers()):
        assert np.all(rec.active.counts() == kept_count(d, layer.conv.out_channels))


def test_density_one_keeps_every_channel(rng):
    net = Network.initialize(SMALL, seed=0)
    res = net.forward(rng.random((3, 3, 8, 8)), 1.0, training=True)
    assert all(r.active.is_full() for r in res.records)


def test_mcifarnet_half_density_survivors(rng):
    net = Network.initialize(build_mcifarnet(), seed=0)
    res = net.forward(rng.random((1, 3, 32, 32)), 0.5, training=True, method="gemm")
    assert [int(r.active.counts()[0]) for r in res.records] == [32, 32, 64, 64, 64, 96, 96, 96]


def test_forward_rejects_wrong_input(rng):
    net = Network.initialize(SMALL, seed=0)
    with pytest.raises(ShapeError):
        net.forward(rng.random((1, 3, 9, 9)))
    with pytest.raises(ValueError):
        net.forward(rng.random((1, 3, 8, 8)), 1.0, training=True, method="bogus")


def test_backward_needs_caches(rng):
    net = Network.initialize(SMALL, seed=0)
    res = net.forward(rng.random((1, 3, 8, 8)), 1.0, training=True)
    res.caches = []
    with pytest.raises(ValueError):
        net.backward(np.zeros((1, 4)), res)


# ---------------------------------------------------------------- residual rule


def test_residual_merge_examples():
    a = ChannelMask.from_active([[0, 1]], 3)
    b = ChannelMask.from_active([[1, 2]], 3)
    assert residual_merge(a, b) == ChannelMask.from_active([[0, 1, 2]], 3)
    e = ChannelMask.empty(1, 3)
    assert residual_merge(e, e) == e
    assert residual_merge(None, b) is None
    assert residual_merge(ChannelMask.full(1, 3), b).is_full()
    with pytest.raises(MaskError):
        residual_merge(a, ChannelMask.full(1, 4))


def all_masks(c=4):
    return [ChannelMask(np.array([bits], dtype=bool)) for bits in itertools.product([False, True], repeat=c)]


def test_residual_merge_exhaustive_4_channels():
    masks = all_masks()
    empty = ChannelMask.empty(1, 4)
    for a, b in itertools.product(masks, masks):
        m = residual_merge(a, b)
        assert np.array_equal(m.bits, a.bits | b.bits)
        assert residual_merge(b, a) == m
        assert residual_merge(a, a) == a
        assert residual_merge(a, empty) == a
        assert residual_merge(a, None) is None
        assert np.all(m.bits >= a.bits) and np.all(m.bits >= b.bits)
    for a, b, c in itertools.product(masks[::3], masks[::2], masks):
        assert residual_merge(residual_merge(a, b), c) == residual_merge(a, residual_merge(b, c))


@pytest.mark.parametrize("d", [1.0, 0.5])
def test_residual_network_matches_dense_path(d, rng):
    x = rng.random((4, 3, 8, 8))
    net = warm(Network.initialize(RESIDUAL, seed=2), x)
    sparse = net.forward(x, d, method="sparse")
    dense = net.forward(x, d, method="dense")
    assert np.array_equal(sparse.logits, dense.logits)
    # identity block: the mask fed onward is the union of its input and its second gate
    assert sparse.in_masks[3] == residual_merge(sparse.records[0].active, sparse.records[2].active)


def test_residual_block_layout():
    net = Network.initialize(RESIDUAL, seed=0)
    names = set(net.parameters())
    assert "1.a.theta" in names and "1.b.phi" in names and "1.short.theta" not in names
    assert "2.short.theta" in names and "2.short.gamma" in names
    assert RESIDUAL.fbs_layer_count == 5


# ---------------------------------------------------------------- usage


def test_usage_counts_and_heatmap(rng):
    data = synthetic_dataset(0, 3, classes=4, size=8)
    net = warm(Network.initialize(SMALL, seed=0), data.images)
    usage = collect_usage(net, data, 0.5)
    for u, layer in zip(usage.layers, net.fbs_layers()):
        assert u.skip_matrix().shape == (4, layer.conv.out_channels)
        assert u.selection_count.sum() == len(data) * kept_count(0.5, layer.conv.out_channels)
        m = u.skip_matrix()
        assert np.all((m >= 0) & (m <= 1))
        np.testing.assert_allclose(m.mean(axis=0), 1 - u.selection_frequency(), rtol=1e-12)
        order = u.sorted_order()
        assert np.all(np.diff(u.selection_count[order]) >= 0)
    full = collect_usage(net, data, 1.0)
    assert all(not u.skip_matrix().any() for u in full.layers)


def test_usage_single_sample_is_binary(rng):
    data = synthetic_dataset(0, 1, classes=4, size=8).subset(slice(0, 1))
    net = warm(Network.initialize(SMALL, seed=0), rng.random((4, 3, 8, 8)))
    for u in collect_usage(net, data, 0.5).layers:
        assert set(np.unique(u.skip_matrix())) <= {0.0, 1.0}


def test_usage_batches_do_not_matter(rng):
    data = synthetic_dataset(1, 3, classes=4, size=8)
    net = warm(Network.initialize(SMALL, seed=0), data.images)
    a = collect_usage(net, data, 0.5, batch_size=5)
    b = collect_usage(net, data, 0.5, batch_size=64)
    for x, y in zip(a.layers, b.layers):
        assert np.array_equal(x.class_selected, y.class_selected)


# ---------------------------------------------------------------- compaction


def test_compact_without_unused_channels_is_identity(rng):
    data = synthetic_dataset(0, 2, classes=4, size=8)
    net = warm(Network.initialize(SMALL, seed=0), data.images)
    small, rep = compact(net, collect_usage(net, data, 1.0))
    assert rep.ratio == 1.0
    assert rep.kept_channels == rep.original_channels
    assert np.array_equal(small.forward(data.images, 1.0).logits, net.forward(data.images, 1.0).logits)


def test_compact_removes_never_selected_channel(rng):
    data = synthetic_dataset(0, 2, classes=4, size=8)
    net = warm(Network.initialize(SMALL, seed=0), data.images)
    # silence channel 3 of the first layer so its saliency is always zero
    layer = net.fbs_layers()[0]
    layer.saliency.phi[3] = 0.0
    layer.saliency.rho[3] = -1.0
    before = net.forward(data.images, 0.5).logits
    usage = collect_usage(net, data, 0.5)
    assert 3 in usage.layers[0].unused()
    small, rep = compact(net, usage)
    assert np.array_equal(small.forward(data.images, 0.5).logits, before)
    assert rep.params_before == param_count_oracle(SMALL)
    assert rep.params_after == param_count_oracle(small.spec)
    assert rep.ratio > 1.0
    assert small.fbs_layers()[0].nominal_channels == 6


ONE_GATE = NetworkSpec(
    (
        LayerSpec("fbs_conv", 6, 3, 1, 1, "l1"),
        LayerSpec("conv", 8, 3, 1, 1),
        LayerSpec("global_avg_pool"),
        LayerSpec("fc", 4),
    ),
    input_shape=(3, 8, 8),
    class_count=4,
)


def test_compact_single_channel_oracle():
    data = synthetic_dataset(0, 2, classes=4, size=8)
    net = warm(Network.initialize(ONE_GATE, seed=0), data.images)
    layer = net.fbs_layers()[0]
    layer.saliency.rho[:] += 10.0
    layer.saliency.phi[3] = 0.0
    layer.saliency.rho[3] = -1.0
    d = 5 / 6
    before = net.forward(data.images, d).logits
    usage = collect_usage(net, data, d)
    assert list(usage.layers[0].unused()) == [3]
    small, rep = compact(net, usage)
    # own theta, beta, phi row, rho, and the consumer's theta slice
    lost = 9 * 3 + 1 + 3 + 1 + 9 * 8
    assert rep.params_before - rep.params_after == lost
    assert rep.kept_channels == [5] and rep.original_channels == [6]
    assert np.array_equal(small.forward(data.images, d).logits, before)


def test_compact_rejects_residual_networks(rng):
    net = Network.initialize(RESIDUAL, seed=0)
    data = Dataset(rng.random((2, 3, 8, 8)), [0, 1], 3)
    warm(net, data.images)
    with pytest.raises(ValueError):
        compact(net, collect_usage(net, data, 1.0))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    x = rng.random((3, 3, 8, 8))
    for spec in (SMALL, RESIDUAL):
        net = warm(Network.initialize(spec, seed=5), x)
        net.density = 0.5
        net.step = 17
        net.rng.random(3)
        save(net, tmp_path / "m.fbs")
        back = load(tmp_path / "m.fbs")
        assert back.spec == net.spec and back.density == 0.5 and back.step == 17
        assert np.array_equal(back.forward(x).logits, net.forward(x).logits)
        assert back.rng.random() == net.rng.random()
        assert serialize(back) == serialize(net)
    assert not (tmp_path / "m.fbs.tmp").exists()


def test_checkpoint_keeps_nominal_channels(rng):
    net = Network.initialize(SMALL, seed=0)
    net.fbs_layers()[1].nominal_channels = 10
    assert deserialize(serialize(net)).fbs_layers()[1].nominal_channels == 10


def _reseal(body: bytes) -> bytes:
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def test_checkpoint_older_minor_accepted():
    net = Network.initialize(SMALL, seed=0)
    data = serialize(net, version=(1, 0))
    assert serialize(deserialize(data)) == serialize(net)


def test_checkpoint_newer_versions_rejected():
    net = Network.initialize(SMALL, seed=0)
    with pytest.raises(CheckpointError, match="version"):
        deserialize(serialize(net, version=(1, 9)))
    with pytest.raises(CheckpointError, match="version"):
        deserialize(serialize(net, version=(2, 0)))


def test_checkpoint_corruption_detected():
    data = bytearray(serialize(Network.initialize(SMALL, seed=0)))
    bad = bytes(b"X" + data[1:])
    with pytest.raises(CheckpointError, match="magic"):
        deserialize(bad)
    with pytest.raises(CheckpointError):
        deserialize(bytes(data[: len(data) // 2]))
    with pytest.raises(CheckpointError):
        deserialize(bytes(data[:10]))
    flipped = bytearray(data)
    flipped[200] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        deserialize(bytes(flipped))


def test_checkpoint_spec_mismatch_detected():
    good = serialize(Network.initialize(SMALL, seed=0))
    other = serialize(Network.initialize(RESIDUAL, seed=0))
    # keep SMALL's tensors but swap in the residual spec text
    def split(data):
        pos = len(MAGIC) + 4
        (n,) = struct.unpack("<I", data[pos : pos + 4])
        meta_end = pos + 4 + n
        (m,) = struct.unpack("<I", data[meta_end : meta_end + 4])
        return data[len(MAGIC) : meta_end], data[meta_end : meta_end + 4 + m], data[meta_end + 4 + m : -4]

    head, _, tensors = split(good)
    _, spec_other, _ = split(other)
    with pytest.raises(CheckpointError):
        deserialize(_reseal(head + spec_other + tensors))
