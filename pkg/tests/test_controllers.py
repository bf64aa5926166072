import numpy as np
import pytest

from metadapt.autodiff import Tensor, grad, softmax
from metadapt.autodiff.gradcheck import grad_check
from metadapt.controllers import (
    ControllerBank,
    adapt_alphas,
    adapted_block_forward,
    canonical_order,
    controller_forward,
    default_bottleneck,
    predict_deltas,
)
from metadapt.errors import DimensionError
from metadapt.search_space import AdaptiveBlock, AlphaTable, block_forward, dag_edges


def _setup(seed=0, channels=4, nodes=3, s=5, q=6):
    rng = np.random.default_rng(seed)
    block = AdaptiveBlock(channels, nodes, rng=rng)
    alpha = AlphaTable.from_array(nodes, block.ops, rng.standard_normal((len(dag_edges(nodes)), len(block.ops))))
    bank = ControllerBank(block, s, rng=rng)
    xs = Tensor(rng.standard_normal((s, channels, 4, 4)))
    xq = Tensor(rng.standard_normal((q, channels, 4, 4)))
    return rng, block, alpha, bank, xs, xq


def _wake(bank, rng):
    for e in dag_edges(bank.nodes):
        c = bank.controller(e)
        c.out.weight.data = (rng.standard_normal(c.out.weight.shape) * 0.5).astype(np.float32)


def test_zero_init_gives_zero_delta_and_unchanged_forward():
    rng, block, alpha, bank, xs, xq = _setup()
    deltas = predict_deltas(bank, block_forward(xs, block, alpha, return_nodes=True))
    assert all((d.data == 0).all() for d in deltas.values())
    out, adapted = adapted_block_forward(xs, xq, block, bank, alpha)
    from metadapt.autodiff import concat

    ref = block_forward(concat([xs, xq], axis=0), block, alpha)
    np.testing.assert_array_equal(out.data, ref.data)
    np.testing.assert_array_equal(adapted.as_array(), alpha.as_array())


def test_controller_shapes_and_support_size_check():
    rng, block, alpha, bank, xs, _ = _setup(s=5)
    c = bank.controller((0, 1))
    assert bank.d_bottleneck == default_bottleneck(4) == 8
    assert c.bottleneck.weight.shape == (4, 8)
    assert c.out.weight.shape == (5 * 8, len(block.ops))
    assert controller_forward(xs, c).shape == (len(block.ops),)
    with pytest.raises(DimensionError):
        controller_forward(Tensor(np.zeros((4, 4, 4, 4))), c)
    assert default_bottleneck(256) == 32


def test_adapt_alphas_arithmetic():
    ops = AdaptiveBlock(1, 2).ops
    base = AlphaTable.from_array(2, ops, np.full((1, 9), 0.5))
    d = {(0, 1): Tensor(np.full(9, 0.1))}
    np.testing.assert_allclose(adapt_alphas(base, d).as_array(), 0.6, atol=1e-7)
    zero = {(0, 1): Tensor(np.zeros(9))}
    np.testing.assert_array_equal(adapt_alphas(base, zero).as_array(), base.as_array())
    with pytest.raises(DimensionError):
        adapt_alphas(base, {(0, 1): Tensor(np.zeros(3))})
    with pytest.raises(DimensionError):
        adapt_alphas(base, {})


def test_adapt_alphas_is_additive():
    rng = np.random.default_rng(1)
    ops = AdaptiveBlock(1, 3).ops
    base = AlphaTable.from_array(3, ops, rng.standard_normal((3, 9)))
    # dyadic deltas keep float32 addition exact
    d1 = {e: Tensor(rng.integers(-8, 8, 9) / 4.0) for e in base.edges}
    d2 = {e: Tensor(rng.integers(-8, 8, 9) / 4.0) for e in base.edges}
    both = {e: Tensor(d1[e].data + d2[e].data) for e in base.edges}
    a = adapt_alphas(base, both).as_array()
    b = adapt_alphas(adapt_alphas(base, d1), d2).as_array()
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_positive_delta_shifts_mass_toward_that_op():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a = rng.standard_normal(6)
        d = -np.abs(rng.standard_normal(6))
        o = rng.integers(6)
        d[o] = abs(d[o]) + 0.01
        assert softmax(Tensor(a + d)).data[o] > softmax(Tensor(a)).data[o]


def test_permutation_sensitivity_and_canonical_order():
    rng, block, alpha, bank, xs, _ = _setup(seed=3)
    _wake(bank, rng)
    c = bank.controller((0, 1))
    perm = np.array([1, 0, 2, 3, 4])
    a = controller_forward(xs, c).data
    b = controller_forward(Tensor(xs.data[perm]), c).data
    assert not np.allclose(a, b)
    labels = np.array([2, 0, 1, 0, 2])
    order = canonical_order(labels)
    np.testing.assert_array_equal(order, [1, 3, 2, 0, 4])
    x1 = controller_forward(Tensor(xs.data[order]), c).data
    x2 = controller_forward(Tensor(xs.data[order]), c).data
    np.testing.assert_array_equal(x1, x2)


def test_different_episodes_give_different_adapted_alpha():
    rng, block, alpha, bank, xs, xq = _setup(seed=4)
    _wake(bank, rng)
    _, a1 = adapted_block_forward(xs, xq, block, bank, alpha)
    _, a2 = adapted_block_forward(Tensor(xs.data * 2.0 + 1.0), xq, block, bank, alpha)
    assert not np.allclose(a1.as_array(), a2.as_array())
    _, a3 = adapted_block_forward(xs, xq, block, bank, alpha)
    np.testing.assert_array_equal(a1.as_array(), a3.as_array())


def test_gradient_reaches_controllers():
    rng, block, alpha, bank, xs, xq = _setup(seed=5, nodes=2, channels=2, s=3, q=2)
    params = bank.parameters()
    out, _ = adapted_block_forward(xs, xq, block, bank, alpha)
    gs = grad((out * out).sum(), params)
    assert any(np.abs(g.data).max() > 0 for g in gs)

    c = bank.controller((0, 1))

    def f(w_out):
        saved = c.out.weight
        c.out.weight = w_out
        try:
            return adapted_block_forward(xs, xq, block, bank, alpha)[0]
        finally:
            c.out.weight = saved

    res = grad_check(f, [rng.standard_normal(c.out.weight.shape) * 0.3], eps=1e-2)
    assert res.max_rel_error < 1e-3
