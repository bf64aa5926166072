import math
import threading

import numpy as np
import pytest

from gradcases import CASES, EPS, GUMBEL_CASES
from metadapt.autodiff import (
    Tensor,
    global_avg_pool,
    grad,
    leaky_relu,
    linear,
    no_grad,
    pool2d,
    softmax,
)
from metadapt.autodiff.gradcheck import grad_check, maxpool_tie_reason
from metadapt.errors import DimensionError, GraphError, NumericError
from oracles import matmul_loop


@pytest.mark.parametrize("case", CASES + GUMBEL_CASES, ids=lambda c: c.name)
def test_gradient_matches_finite_differences(case):
    for point in range(2):
        rng = np.random.default_rng(1000 + point)
        res = grad_check(case.op, case.make(rng), eps=EPS, skip_if=case.skip_if)
        assert not res.skipped, res.reason
        assert res.max_rel_error < case.tol, f"{case.name} point {point}: {res.max_rel_error:.2e}"


def test_leaky_relu_values_and_slope():
    x = Tensor(np.array([5.0, -10.0]), requires_grad=True)
    y = leaky_relu(x)
    np.testing.assert_array_equal(y.data, [5.0, -1.0])
    res = grad_check(leaky_relu, [np.array([-2.0])], eps=1e-2)
    assert res.max_rel_error < 1e-4
    (g,) = grad(leaky_relu(x).sum(), [x])
    np.testing.assert_allclose(g.data, [1.0, 0.1], rtol=1e-6)


def test_linear_identity_bias_and_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 6)).astype(np.float32)
    np.testing.assert_array_equal(linear(Tensor(x), Tensor(np.eye(6)), Tensor(np.zeros(6))).data, x)
    b = np.arange(3, dtype=np.float32)
    out = linear(Tensor(x), Tensor(np.zeros((6, 3))), Tensor(b)).data
    assert (out == b).all()
    w = rng.standard_normal((6, 3)).astype(np.float32)
    np.testing.assert_allclose(linear(Tensor(x), Tensor(w)).data, matmul_loop(x, w), atol=1e-5)
    with pytest.raises(DimensionError):
        linear(Tensor(x), Tensor(np.zeros((5, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(4))).data, [0.25] * 4, atol=1e-7)
    np.testing.assert_allclose(softmax(Tensor(np.array([0.0, math.log(3.0)]))).data, [0.25, 0.75], atol=1e-6)
    rng = np.random.default_rng(1)
    for _ in range(20):
        # dyadic values: z + offsets is exact in float32, so only softmax itself is tested
        offsets = rng.integers(-40, 40, size=6) / 8.0
        z = rng.integers(-80, 80) / 4.0
        a = softmax(Tensor(np.concatenate([[0.0], offsets]))).data
        b = softmax(Tensor(z + np.concatenate([[0.0], offsets]))).data
        assert abs(a.sum() - 1) < 1e-6 and (a > 0).all()
        np.testing.assert_allclose(a, b, atol=1e-7)
        # arbitrary shifts are limited by float32 rounding of the shifted logits
        r = rng.standard_normal(7) * 3
        np.testing.assert_allclose(softmax(Tensor(r)).data, softmax(Tensor(r + rng.standard_normal() * 5)).data, atol=1e-6)
    # large logits stay finite thanks to max subtraction
    assert np.isfinite(softmax(Tensor(np.array([1000.0, 0.0]))).data).all()


def test_global_avg_pool():
    x = np.full((2, 3, 4, 4), 2.5, dtype=np.float32)
    np.testing.assert_array_equal(global_avg_pool(Tensor(x)).data, np.full((2, 3), 2.5))
    r = np.random.default_rng(2).standard_normal((5, 3, 4, 4)).astype(np.float32)
    out = global_avg_pool(Tensor(r))
    assert out.shape == (5, 3)
    np.testing.assert_allclose(out.data, r.mean(axis=(2, 3)), atol=1e-6)


def test_backward_basic_cases():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])

    y = Tensor(np.ones(3), requires_grad=True)
    (gy,) = grad((x * 2.0).sum(), [y])
    np.testing.assert_array_equal(gy.data, 0)


def test_two_layer_chain_rule():
    # loss = sum(relu-free two-layer map) has gradient W1^T-style closed forms
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4)).astype(np.float32)
    w1 = rng.standard_normal((4, 3)).astype(np.float32)
    w2 = rng.standard_normal((3, 2)).astype(np.float32)
    t1, t2 = Tensor(w1, requires_grad=True), Tensor(w2, requires_grad=True)
    loss = linear(linear(Tensor(x), t1), t2).sum()
    g1, g2 = grad(loss, [t1, t2])
    ones = np.ones((2, 2))
    np.testing.assert_allclose(g2.data, (x @ w1).T @ ones, atol=1e-5)
    np.testing.assert_allclose(g1.data, x.T @ ones @ w2.T, atol=1e-5)


def test_repeated_backward_accumulates_and_zero_grad_resets():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = (w * w).sum()
    loss.backward()
    first = w.grad.copy()
    loss.backward()
    np.testing.assert_allclose(w.grad, 2 * first)
    w.zero_grad()
    loss.backward()
    np.testing.assert_allclose(w.grad, first)


def test_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        (x * 2.0).backward()
    with pytest.raises(GraphError):
        Tensor(np.ones(1)).backward()
    with pytest.raises(NumericError):
        Tensor(np.array([-1.0])).log()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_second_order_scalar():
    # d/dx of d/dx x^3 = 6x
    x = Tensor(np.array([1.5]), requires_grad=True)
    (g,) = grad((x**3.0).sum(), [x], create_graph=True)
    (h,) = grad(g.sum(), [x])
    np.testing.assert_allclose(h.data, [9.0], rtol=1e-6)


def test_maxpool_ties_are_skipped_not_failed():
    x = np.zeros((1, 1, 4, 4))
    assert maxpool_tie_reason(x, EPS) is not None
    res = grad_check(lambda t: pool2d(t, "max"), [x], eps=EPS, skip_if=lambda xs: maxpool_tie_reason(xs[0], EPS))
    assert res.skipped and res.ok()


def test_forward_determinism_across_threads():
    from metadapt.search_space import AdaptiveBlock, AlphaTable, block_forward

    rng = np.random.default_rng(4)
    block = AdaptiveBlock(4, 3, rng=rng)
    alpha = AlphaTable.from_array(3, block.ops, rng.standard_normal((3, len(block.ops))))
    x = Tensor(rng.standard_normal((3, 4, 5, 5)))
    block.eval()
    ref = block_forward(x, block, alpha).data
    outs = []

    def run():
        with no_grad():
            outs.append(block_forward(x, block, alpha).data)

    threads = [threading.Thread(target=run) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for o in outs:
        np.testing.assert_array_equal(o, ref)
