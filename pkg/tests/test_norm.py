import numpy as np
import pytest

from fbs.layers import BnParams, batch_norm, batch_norm_backward
from fbs.tensor import ShapeError


def test_training_normalizes_per_channel(rng):
    z = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    p = BnParams.fresh(3, use_gamma=False)
    u, _ = batch_norm(z, p, training=True, use_gamma=False)
    np.testing.assert_allclose(u.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(u.var(axis=(0, 2, 3)), 1, rtol=1e-5)


def test_small_batch_statistics(rng):
    z = rng.standard_normal((4, 3, 2, 2))
    u, cache = batch_norm(z, BnParams.fresh(3, use_gamma=False), training=True, use_gamma=False)
    assert np.abs(cache.xhat.mean(axis=(0, 2, 3))).max() < 1e-12
    var = cache.xhat.var(axis=(0, 2, 3))
    oracle = z.var(axis=(0, 2, 3)) / (z.var(axis=(0, 2, 3)) + 1e-5)
    np.testing.assert_allclose(var, oracle, rtol=1e-12)
    assert np.abs(var - 1).max() < 1e-4


def test_gamma_and_beta_applied(rng):
    z = rng.standard_normal((2, 2, 3, 3))
    p = BnParams.fresh(2, use_gamma=True)
    p.gamma[:] = [2.0, -1.0]
    p.beta[:] = [0.5, 0.0]
    u, cache = batch_norm(z, p, training=True, use_gamma=True)
    np.testing.assert_allclose(u, cache.xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None])


def test_running_stats_update_oracle(rng):
    z = rng.standard_normal((3, 2, 4, 4))
    p = BnParams.fresh(2, use_gamma=False)
    batch_norm(z, p, training=True, use_gamma=False)
    mean = z.mean(axis=(0, 2, 3))
    var = ((z - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    np.testing.assert_allclose(p.running_mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * var, rtol=1e-12)


def test_update_restricted_to_flagged_channels(rng):
    z = rng.standard_normal((3, 3, 2, 2))
    p = BnParams.fresh(3, use_gamma=False)
    batch_norm(z, p, training=True, use_gamma=False, update=np.array([True, False, True]))
    assert p.running_mean[1] == 0.0 and p.running_var[1] == 1.0
    assert p.running_mean[0] != 0.0


def test_inference_uses_running_stats():
    p = BnParams.fresh(1, use_gamma=False)
    p.running_mean[:] = 1.0
    p.running_var[:] = 4.0 - p.eps
    u, _ = batch_norm(np.full((1, 1, 1, 1), 5.0), p, training=False, use_gamma=False)
    assert np.isclose(u[0, 0, 0, 0], 2.0)


def test_inference_without_stats_raises():
    p = BnParams(beta=np.zeros(2))
    with pytest.raises(ValueError):
        batch_norm(np.zeros((1, 2, 1, 1)), p, training=False, use_gamma=False)


def test_shape_and_gamma_errors():
    p = BnParams.fresh(2, use_gamma=False)
    with pytest.raises(ShapeError):
        batch_norm(np.zeros((1, 3, 1, 1)), p, training=True, use_gamma=False)
    with pytest.raises(ValueError):
        batch_norm(np.zeros((1, 2, 1, 1)), p, training=True, use_gamma=True)


def test_backward_needs_cache():
    with pytest.raises(ValueError):
        batch_norm_backward(np.zeros((1, 1, 1, 1)), None, BnParams.fresh(1, use_gamma=False))


def test_constant_channel_gives_beta():
    p = BnParams.fresh(1, use_gamma=False)
    p.beta[:] = 0.25
    u, _ = batch_norm(np.full((2, 1, 3, 3), 7.0), p, training=True, use_gamma=False)
    assert np.all(u == 0.25)


def test_standardized_input_passes_through(rng):
    z = rng.standard_normal((4, 3, 6, 6))
    z = (z - z.mean(axis=(0, 2, 3), keepdims=True)) / z.std(axis=(0, 2, 3), keepdims=True)
    p = BnParams.fresh(3, use_gamma=True, eps=1e-15)
    u, _ = batch_norm(z, p, training=True, use_gamma=True)
    np.testing.assert_allclose(u, z, atol=1e-9)
