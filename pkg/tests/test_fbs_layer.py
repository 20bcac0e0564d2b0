import numpy as np
import pytest

from fbs.layers import (
    BnParams,
    ConvParams,
    FbsConvLayer,
    PlainConvLayer,
    SaliencyParams,
    conv2d_dense,
    fbs_forward,
    global_avg_pool,
    linear,
    ordered_matmul,
    plain_forward,
    relu,
    saliency_g,
    subsample_ss,
    wta,
    wta_backward,
)
from fbs.tensor import ChannelMask, ShapeError


def make_layer(rng, c_in=3, c_out=8, stride=1, padding=1, reducer="l1"):
    layer = FbsConvLayer(
        ConvParams(rng.standard_normal((c_out, c_in, 3, 3)) * 0.3, stride, padding),
        BnParams.fresh(c_out, use_gamma=False),
        SaliencyParams(rng.standard_normal((c_out, c_in)), rng.random(c_out), reducer),
    )
    layer.bn.running_mean[:] = rng.standard_normal(c_out) * 0.1
    layer.bn.running_var[:] = rng.random(c_out) + 0.5
    layer.bn.beta[:] = rng.standard_normal(c_out) * 0.1
    return layer


def dense_oracle(x, layer, d, training=False):
    """Compute every channel densely, then zero the losers."""
    g = saliency_g(subsample_ss(x, layer.saliency.reducer), layer.saliency)
    pi = wta(g, layer.k_for(d))
    z = conv2d_dense(x, layer.conv, "direct")
    if training:
        mean, var = z.mean(axis=(0, 2, 3)), z.var(axis=(0, 2, 3))
    else:
        mean, var = layer.bn.running_mean, layer.bn.running_var
    u = (z - mean[None, :, None, None]) / np.sqrt(var + layer.bn.eps)[None, :, None, None]
    return relu(pi[:, :, None, None] * (u + layer.bn.beta[None, :, None, None]))


def test_relu_examples(rng):
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert not relu(-rng.random(5)).any()
    z = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(relu(z), np.where(z > 0, z, 0))


def test_linear_and_pool_oracles(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(linear(x, w, b), x @ w.T + b, rtol=1e-12)
    np.testing.assert_allclose(ordered_matmul(x, w.T), x @ w.T, rtol=1e-12)
    f = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(global_avg_pool(f), f.mean(axis=(2, 3)), rtol=1e-12)


def test_ordered_matmul_ignores_zero_columns(rng):
    # dropping an input whose value is zero leaves the result bitwise equal
    a = rng.standard_normal((3, 5))
    b = rng.standard_normal((5, 4))
    a[:, 2] = 0.0
    keep = [0, 1, 3, 4]
    assert np.array_equal(ordered_matmul(a, b), ordered_matmul(a[:, keep], b[keep]))


def test_saliency_examples():
    p = SaliencyParams(np.zeros((3, 2)), np.ones(3))
    np.testing.assert_array_equal(saliency_g(np.array([[5.0, -1.0]]), p), [[1, 1, 1]])
    p = SaliencyParams(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(saliency_g(np.array([[2.0, -3.0]]), p), [[2, 0]])


def test_wta_spec_example_and_backward():
    np.testing.assert_array_equal(wta(np.array([3.0, 1, 4, 1, 5]), 2), [0, 0, 4, 0, 5])
    keep = np.zeros(5, dtype=bool)
    keep[[2, 4]] = True
    up = np.arange(1.0, 6.0)
    np.testing.assert_array_equal(wta_backward(up, keep), [0, 0, 3, 0, 5])


def test_density_one_keeps_everything(rng):
    layer = make_layer(rng)
    x = rng.random((3, 3, 6, 6))
    y, rec, _ = fbs_forward(x, layer, 1.0, training=False)
    assert rec.active.is_full()
    np.testing.assert_allclose(y, dense_oracle(x, layer, 1.0), rtol=1e-12, atol=1e-15)


def test_zero_predictor_reduces_to_plain_layer(rng):
    layer = make_layer(rng)
    layer.saliency.phi[:] = 0.0
    layer.saliency.rho[:] = 1.0
    plain = PlainConvLayer(layer.conv, BnParams(layer.bn.beta, np.ones(8), layer.bn.running_mean,
                                                 layer.bn.running_var))
    x = rng.random((2, 3, 5, 5))
    for training in (False, True):
        y, _, _ = fbs_forward(x, layer, 1.0, training=training, method="dense")
        want, _ = plain_forward(x, plain, training=training)
        np.testing.assert_allclose(y, want, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("training", [False, True])
def test_half_density_matches_dense_oracle(training, rng):
    layer = make_layer(rng)
    x = rng.random((4, 3, 6, 6))
    y, rec, _ = fbs_forward(x, layer, 0.5, training=training, method="sparse")
    assert np.all(rec.active.counts() == 4)
    np.testing.assert_allclose(y, dense_oracle(x, layer, 0.5, training), rtol=1e-12, atol=1e-15)
    y_dense, _, _ = fbs_forward(x, layer, 0.5, training=training, method="dense")
    assert np.array_equal(y, y_dense)


def test_sparse_training_updates_only_used_channels(rng):
    layer = make_layer(rng, c_out=8)
    before = layer.bn.running_mean.copy()
    x = rng.random((1, 3, 6, 6))
    _, rec, _ = fbs_forward(x, layer, 0.25, training=True)
    used = rec.active.union_over_batch()
    assert np.array_equal(layer.bn.running_mean[~used], before[~used])
    assert not np.array_equal(layer.bn.running_mean[used], before[used])


def test_input_mask_is_honoured(rng):
    layer = make_layer(rng, c_in=4)
    x = rng.random((2, 4, 5, 5))
    m = ChannelMask.from_active([[0, 1], [2, 3]], 4)
    x_masked = x * m.bits[:, :, None, None]
    y, _, _ = fbs_forward(x_masked, layer, 0.5, training=False, in_mask=m)
    np.testing.assert_allclose(y, dense_oracle(x_masked, layer, 0.5), rtol=1e-12, atol=1e-15)
    y_dense, _, _ = fbs_forward(x_masked, layer, 0.5, training=False, method="dense")
    assert np.array_equal(y, y_dense)


def test_shape_and_method_errors(rng):
    layer = make_layer(rng)
    with pytest.raises(ShapeError):
        fbs_forward(rng.random((1, 4, 5, 5)), layer, 1.0, training=False)
    with pytest.raises(ValueError):
        fbs_forward(rng.random((1, 3, 5, 5)), layer, 1.0, training=False, method="fast")
    with pytest.raises(ShapeError):
        FbsConvLayer(layer.conv, BnParams.fresh(8, use_gamma=True), layer.saliency)


def test_nominal_channels_bound_k(rng):
    layer = make_layer(rng, c_out=4)
    layer.nominal_channels = 8
    assert layer.k_for(0.5) == 4
    with pytest.raises(ValueError):
        layer.k_for(0.75)
