import numpy as np
import pytest

from cvxsnn.losses import LossBlock, LossSpec
from cvxsnn.solver import ConvexProblem, dual_certificate, load_solution, save_solution, solve


def random_problem(seed, n=40, P=25, c=1, loss="squared", beta=0.5, m=2, penalty="group"):
    rng = np.random.default_rng(seed)
    D = (rng.random((n, P)) < 0.5).astype(float)
    if loss == "squared":
        Y = rng.normal(size=(n, c))
    elif loss == "logistic":
        Y = rng.choice([-1.0, 1.0], size=(n, c))
    else:
        Y = np.eye(c)[rng.integers(0, c, n)]
    return ConvexProblem(D, Y, beta, m, loss, penalty=penalty)


def test_one_column_lasso():
    p = ConvexProblem(np.ones((4, 1)), np.full(4, 0.5), 0.3, 1)
    sol = solve(p, tol=1e-12)
    assert sol.w_tilde[0, 0] == pytest.approx(0.425, abs=1e-9)
    assert dual_certificate(p, [[0.425]]).gap <= 1e-12


def test_null_solution():
    base = random_problem(0)
    G = base.D.T @ (-base.Y)
    beta = np.sqrt(base.m_last) * np.max(np.linalg.norm(G, axis=1)) * 1.01
    p = ConvexProblem(base.D, base.Y, beta, base.m_last)
    sol = solve(p)
    assert not sol.w_tilde.any()
    cert = dual_certificate(p, np.zeros((p.P, 1)))
    assert cert.scale == 1.0
    assert cert.gap == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("loss", ["squared", "logistic", "softmax"])
def test_weak_duality(loss):
    rng = np.random.default_rng(1)
    p = random_problem(1, c=3, loss=loss)
    for _ in range(20):
        cert = dual_certificate(p, rng.normal(size=(p.P, 3)) * rng.choice([0.01, 1.0]))
        assert cert.dual_value <= cert.primal_value


@pytest.mark.parametrize("loss", ["squared", "logistic", "softmax"])
@pytest.mark.parametrize("penalty", ["group", "l1"])
def test_certified_convergence(loss, penalty):
    p = random_problem(2, c=3, loss=loss, beta=0.3, penalty=penalty)
    sol = solve(p, tol=1e-8)
    assert sol.converged and sol.gap <= 1e-8
    assert sol.primal_value == pytest.approx(p.objective(sol.w_tilde), abs=1e-12)


@pytest.mark.parametrize("loss", ["squared", "logistic"])
def test_matches_cvxpy(loss):
    cp = pytest.importorskip("cvxpy")
    p = random_problem(3, n=30, P=15, c=2, loss=loss, beta=0.4)
    sol = solve(p, tol=1e-10)
    W = cp.Variable((p.P, 2))
    Z = p.D @ W
    if loss == "squared":
        f = 0.5 * cp.sum_squares(Z - p.Y)
    else:
        f = cp.sum(cp.logistic(-cp.multiply(p.Y, Z)))
    obj = f + p.tau * cp.sum(cp.norm(W, 2, axis=1))
    ref = cp.Problem(cp.Minimize(obj)).solve()
    # our certificate brackets the optimum, so the reference must sit inside it (up to its own accuracy)
    assert sol.dual_value - 1e-6 <= ref <= sol.primal_value + 1e-6
    assert abs(sol.primal_value - ref) <= 1e-5 * max(1.0, abs(ref))


def test_l1_squared_separable():
    p = random_problem(4, c=3, beta=0.5, penalty="l1")
    joint = solve(p, tol=1e-11).w_tilde
    for j in range(3):
        q = ConvexProblem(p.D, p.Y[:, j], p.reg_beta, p.m_last, penalty="l1")
        np.testing.assert_allclose(solve(q, tol=1e-11).w_tilde[:, 0], joint[:, j], atol=1e-5)


def test_row_compression_exact():
    # duplicated rows merge; the uncompressed certificate is what gets reported
    base = random_problem(5, n=20)
    D = np.vstack([base.D, base.D[:5]])
    Y = np.vstack([base.Y, base.Y[:5]])
    p = ConvexProblem(D, Y, 0.5, 2)
    a, b = solve(p, tol=1e-10), solve(p, tol=1e-10, compress=False)
    assert abs(a.primal_value - b.primal_value) <= 1e-9
    assert dual_certificate(p, a.w_tilde).gap <= 1e-9


def test_row_weights_and_mean_reduction():
    base = random_problem(6)
    spec = LossSpec((LossBlock("squared", 0, 1),), np.full(base.D.shape[0], 1.0 / base.D.shape[0]))
    a = solve(ConvexProblem(base.D, base.Y, 0.05, 2, spec), tol=1e-10)
    b = solve(ConvexProblem(base.D, base.Y, 0.05, 2, "squared", reduction="mean"), tol=1e-10)
    assert a.primal_value == pytest.approx(b.primal_value, abs=1e-9)


def test_persistence(tmp_path):
    p = random_problem(7, c=2)
    sol = solve(p, tol=1e-9)
    save_solution(sol, tmp_path / "s.json")
    back = load_solution(tmp_path / "s.json")
    np.testing.assert_array_equal(back.w_tilde, sol.w_tilde)
    assert back.problem_hash == p.hash()
    assert dual_certificate(p, back.w_tilde).gap == pytest.approx(sol.gap, abs=1e-12)


def test_errors():
    with pytest.raises(ValueError, match="reg_beta must be positive"):
        ConvexProblem(np.ones((2, 1)), np.ones(2), 0.0, 1)
    with pytest.raises(ValueError, match="empty dictionary"):
        ConvexProblem(np.ones((2, 0)), np.ones(2), 1.0, 1)
    with pytest.raises(ValueError, match="w_tilde shape"):
        dual_certificate(ConvexProblem(np.ones((2, 1)), np.ones(2), 1.0, 1), np.ones(3))
