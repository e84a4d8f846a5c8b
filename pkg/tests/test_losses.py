import math

import numpy as np
import pytest

from cvxsnn.losses import LossBlock, LossSpec, loss_conjugate, loss_gradient, loss_value


def central_diff(f, Z, h):
    G = np.zeros_like(Z)
    for idx in np.ndindex(Z.shape):
        e = np.zeros_like(Z)
        e[idx] = h
        G[idx] = (f(Z + e) - f(Z - e)) / (2 * h)
    return G


def mixed_spec(n):
    blocks = (LossBlock("softmax", 0, 3, 1.0), LossBlock("logistic", 3, 5, 0.7), LossBlock("squared", 5, 6, 2.0))
    return LossSpec(blocks, np.random.default_rng(0).uniform(0.1, 2.0, n))


def mixed_targets(rng, n):
    Y = np.zeros((n, 6))
    Y[np.arange(n), rng.integers(0, 3, n)] = 1.0
    Y[:, 3:5] = rng.choice([-1.0, 1.0], size=(n, 2))
    Y[:, 5] = rng.normal(size=n)
    return Y


def test_squared_at_target():
    Y = np.random.default_rng(1).normal(size=(5, 2))
    assert loss_value("squared", Y, Y) == 0.0
    assert not loss_gradient("squared", Y, Y).any()


def test_logistic_at_zero():
    Y = np.array([1.0, -1.0, 1.0, 1.0])
    assert loss_value("logistic", np.zeros(4), Y) == pytest.approx(4 * math.log(2), abs=1e-14)


@pytest.mark.parametrize("kind,tol", [("squared", 1e-8), ("logistic", 1e-6), ("softmax", 1e-6)])
def test_gradient_fd(kind, tol):
    rng = np.random.default_rng(2)
    n = 6
    if kind == "softmax":
        Y = np.eye(3)[rng.integers(0, 3, n)]
    elif kind == "logistic":
        Y = rng.choice([-1.0, 1.0], size=(n, 3))
    else:
        Y = rng.normal(size=(n, 3))
    Z = rng.normal(size=(n, 3))
    G = loss_gradient(kind, Z, Y)
    num = central_diff(lambda z: loss_value(kind, z, Y), Z, 1e-5)
    assert np.max(np.abs(G - num)) / np.max(np.abs(G)) <= tol


def test_mixed_gradient_fd():
    rng = np.random.default_rng(3)
    spec = mixed_spec(5)
    Y = mixed_targets(rng, 5)
    Z = rng.normal(size=(5, 6))
    num = central_diff(lambda z: spec.value(z, Y), Z, 1e-5)
    np.testing.assert_allclose(spec.gradient(Z, Y), num, atol=1e-8)


def test_squared_conjugate_zero():
    Y = np.random.default_rng(4).normal(size=(3, 2))
    assert loss_conjugate("squared", np.zeros((3, 2)), Y) == 0.0


@pytest.mark.parametrize("kind", ["squared", "logistic", "softmax", "mixed"])
def test_fenchel_young(kind):
    rng = np.random.default_rng(5)
    n = 7
    if kind == "mixed":
        spec, Y = mixed_spec(n), mixed_targets(rng, n)
    else:
        Y = {"squared": rng.normal(size=(n, 2)), "logistic": rng.choice([-1.0, 1.0], size=(n, 2)),
             "softmax": np.eye(2)[rng.integers(0, 2, n)]}[kind]
        spec = LossSpec.single(kind, 2)
    for _ in range(100):
        Z = rng.normal(size=Y.shape) * 2
        G = spec.gradient(Z, Y)
        # equality at the gradient
        assert spec.value(Z, Y) + spec.conjugate(G, Y) == pytest.approx(np.sum(G * Z), abs=1e-10)
        U = G + rng.normal(size=Y.shape) * 0.05
        if kind in ("softmax", "mixed"):
            U = G  # off-gradient points of the simplex family are outside the domain
        c = spec.conjugate(U, Y)
        if math.isfinite(c):
            assert spec.value(Z, Y) + c >= np.sum(U * Z) - 1e-12


def test_logistic_half_point():
    # u = -0.5 y: entropy term equals -log 2 per entry
    Y = np.array([[1.0], [-1.0], [1.0]])
    assert loss_conjugate("logistic", -0.5 * Y, Y) == pytest.approx(-3 * math.log(2), abs=1e-14)


def test_logistic_conjugate_domain():
    Y = np.array([[1.0]])
    assert loss_conjugate("logistic", np.array([[0.5]]), Y) == math.inf


def test_label_domain():
    with pytest.raises(ValueError, match="label out of domain"):
        loss_value("logistic", np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ValueError, match="label out of domain"):
        loss_value("softmax", np.zeros((1, 2)), np.array([[0.5, 0.5]]))


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown loss kind"):
        LossBlock("hinge", 0, 1)
