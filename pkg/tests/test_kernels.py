import numpy as np
import pytest

from metadapt.autodiff import Tensor, batch_norm, conv2d, max_pool_downsample, pool2d
from metadapt.autodiff.functional import RunningMoments
from metadapt.errors import DimensionError, PreconditionError
from oracles import batch_norm_ref, conv2d_loop, pool_loop


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (5, 1, 2), (3, 2, 1), (2, 2, 0), (3, 1, 0)])
def test_conv2d_matches_loop(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride + pad)
    x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
    w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w), stride, pad).data, conv2d_loop(x, w, stride, pad), atol=1e-4)


def test_conv2d_shape_errors():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((2, 3, 7, 7))))
    with pytest.raises(PreconditionError):
        conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), stride=0)


@pytest.mark.parametrize("mode", ["avg", "max"])
def test_pool3_matches_loop(mode):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    np.testing.assert_allclose(pool2d(Tensor(x), mode).data, pool_loop(x, mode), atol=1e-6)


def test_avg_pool_border_uses_valid_count():
    out = pool2d(Tensor(np.ones((1, 1, 4, 4))), "avg").data
    np.testing.assert_allclose(out, 1.0, atol=1e-7)


def test_max_pool_downsample_matches_loop():
    x = np.random.default_rng(6).standard_normal((2, 2, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(max_pool_downsample(Tensor(x), 2).data, pool_loop(x, "max", 2, 2, 0).astype(np.float32))


def test_batch_norm_train_matches_formula_and_updates_moments():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 3, 5, 5)).astype(np.float32) * 2 + 1
    g = rng.standard_normal(3).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    state = RunningMoments.fresh(3)
    out = batch_norm(Tensor(x), Tensor(g), Tensor(b), state, mode="train")
    np.testing.assert_allclose(out.data, batch_norm_ref(x, g, b), atol=1e-5)
    n = 4 * 25
    np.testing.assert_allclose(state.mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-5)


def test_batch_norm_eval_uses_running_moments():
    state = RunningMoments(np.array([1.0, -1.0], np.float32), np.array([4.0, 0.25], np.float32))
    x = np.full((1, 2, 2, 2), 3.0, dtype=np.float32)
    out = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, mode="eval", eps=0.0)
    np.testing.assert_allclose(out.data[0, :, 0, 0], [1.0, 8.0], rtol=1e-6)


def test_batch_norm_no_stats_update_when_disabled():
    state = RunningMoments.fresh(2)
    batch_norm(Tensor(np.random.default_rng(0).standard_normal((2, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, update_stats=False)
    np.testing.assert_array_equal(state.mean, 0)
    np.testing.assert_array_equal(state.var, 1)
