import math

import numpy as np
import pytest

from metadapt.autodiff import Tensor, cross_entropy
from metadapt.errors import DimensionError, PreconditionError
from metadapt.heads import HeadConfig, accuracy, embed, head_logits, prototype_logits, ridge_logits


def test_embed_pools_spatially():
    x = np.full((3, 4, 2, 2), 1.5, dtype=np.float32)
    out = embed(Tensor(x))
    assert out.shape == (3, 4)
    assert (out.data == 1.5).all()


def test_prototype_examples():
    s = np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 4.0], [0.0, 2.0]])
    labels = [0, 0, 1, 1]
    # class means are (1, 0) and (2, 3)
    q = np.array([[1.0, 0.0], [2.0, 3.0]])
    z = prototype_logits(Tensor(s), labels, Tensor(q), tau=1.0)
    assert list(z.data.argmax(axis=1)) == [0, 1]
    np.testing.assert_allclose(z.data, [[0.0, -10.0], [-10.0, 0.0]], atol=1e-5)
    one = prototype_logits(Tensor(s[:2]), [0, 1], Tensor(s[:2]), tau=0.5)
    np.testing.assert_allclose(np.diag(one.data), 0.0, atol=1e-6)


def test_prototype_matches_brute_force():
    rng = np.random.default_rng(0)
    s, q = rng.standard_normal((10, 6)), rng.standard_normal((7, 6))
    labels = np.repeat(np.arange(5), 2)
    protos = np.stack([s[labels == c].mean(axis=0) for c in range(5)])
    ref = -0.5 * ((q[:, None, :] - protos[None]) ** 2).sum(-1)
    np.testing.assert_allclose(prototype_logits(Tensor(s), labels, Tensor(q)).data, ref, atol=1e-4)


def _ridge_ref(s, labels, q, lam):
    y = np.eye(labels.max() + 1)[labels]
    w = np.linalg.solve(s.T @ s + lam * np.eye(s.shape[1]), s.T @ y)
    return q @ w


@pytest.mark.parametrize("n_support", [5, 12])
def test_ridge_matches_normal_equations_in_both_forms(n_support):
    rng = np.random.default_rng(n_support)
    s, q = rng.standard_normal((n_support, 8)), rng.standard_normal((4, 8))
    labels = np.arange(n_support) % 5
    got = ridge_logits(Tensor(s), labels, Tensor(q), lam=0.5, tau=2.0).data
    np.testing.assert_allclose(got, 2.0 * _ridge_ref(s, labels, q, 0.5), atol=1e-4)


def test_ridge_limits():
    rng = np.random.default_rng(1)
    s = rng.standard_normal((5, 16))
    labels = np.arange(5)
    assert np.abs(ridge_logits(Tensor(s), labels, Tensor(s), lam=1e9).data).max() < 1e-6
    # few support points in many dimensions: a tiny regulariser interpolates the targets
    np.testing.assert_allclose(ridge_logits(Tensor(s), labels, Tensor(s), lam=1e-6).data, np.eye(5), atol=1e-3)


def test_head_errors():
    s = Tensor(np.zeros((4, 3)))
    with pytest.raises(PreconditionError):
        ridge_logits(s, [0, 1, 1, 0], Tensor(np.zeros((2, 3))), lam=0.0)
    with pytest.raises(DimensionError):
        ridge_logits(s, [0, 1, 1, 0], Tensor(np.zeros((2, 4))))
    with pytest.raises(PreconditionError):
        prototype_logits(s, [0, 2, 2, 0], Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        HeadConfig(kind="svm")


def test_head_equivariance_under_class_relabelling():
    rng = np.random.default_rng(2)
    s, q = rng.standard_normal((10, 6)), rng.standard_normal((5, 6))
    labels = np.repeat(np.arange(5), 2)
    perm = rng.permutation(5)
    for cfg in (HeadConfig("ridge"), HeadConfig("prototype")):
        a = head_logits(cfg, Tensor(s), labels, Tensor(q)).data
        b = head_logits(cfg, Tensor(s), perm[labels], Tensor(q)).data
        np.testing.assert_allclose(b[:, perm], a, atol=1e-5)


def test_cross_entropy_examples():
    assert abs(cross_entropy(Tensor(np.zeros((3, 5))), [0, 1, 4]).item() - math.log(5)) < 1e-4
    big = np.eye(5) * 1e3
    assert cross_entropy(Tensor(big), np.arange(5)).item() < 1e-3
    # hand calculation: rows (1, 0) label 0 and (0, 2) label 0
    z = np.array([[1.0, 0.0], [0.0, 2.0]])
    expected = 0.5 * (math.log(1 + math.exp(-1)) + (2 + math.log(1 + math.exp(-2))))
    assert abs(cross_entropy(Tensor(z), [0, 0]).item() - expected) < 1e-6


def test_accuracy():
    z = Tensor(np.array([[0.0, 1.0], [1.0, 0.0], [0.2, 0.1]]))
    assert accuracy(z, [1, 0, 1]) == pytest.approx(2 / 3)
