"""Micro-scale global-optimality oracle.

For a two-layer LIF network (one hidden layer of width ``m``) on a tiny
dataset, the convex optimum over the grid-complete dictionary must lower
bound ``L(sum_k S_k P_k, Y) + beta * sum_k ||P_k||_F`` for every network whose
leaks lie on the grid.  Random networks are simulated in batches, their
hidden layers normalized, and their output weights fitted by batched
proximal gradient, so each trial reports the best objective its hidden
layer admits (a smaller, sharper upper bound).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dictionary import LifGrid, exact_enumerate_snn_dictionary
from .losses import LossSpec
from .reconstruct import reconstruct
from .solver import ConvexProblem, solve
from .witness import LifArch

WEAK_DUALITY_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class MicroInstance:
    X: np.ndarray
    Y: np.ndarray
    width: int
    reg_beta: float
    grid: LifGrid = field(default_factory=LifGrid)

    @property
    def arch(self) -> LifArch:
        return LifArch(self.X.shape[2], (self.width,), self.X.shape[0])


def random_micro_instance(seed: int, n_max: int = 6, T_max: int = 3, width_max: int = 2, d_max: int = 2,
                          reg_beta: float | None = None, grid: LifGrid | None = None) -> MicroInstance:
    """Dyadic inputs (multiples of 1/4 in [-1, 1]) and Gaussian scalar targets."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4242]))
    n = int(rng.integers(2, n_max + 1))
    T = int(rng.integers(1, T_max + 1))
    d = int(rng.integers(1, d_max + 1))
    m = int(rng.integers(1, width_max + 1))
    X = rng.integers(-4, 5, size=(T, n, d)) / 4.0
    Y = rng.normal(size=(n, 1))
    beta = float(rng.choice([0.05, 0.2, 0.5, 1.0])) if reg_beta is None else reg_beta
    return MicroInstance(X, Y, m, beta, grid or LifGrid())


def convex_optimum(inst: MicroInstance, tol: float = 1e-10, max_iter: int = 20000):
    """Solve over the exact dictionary.

    The bound is checked against ``sol.dual_value``, which is a certified
    lower bound whether or not ``tol`` was reached.
    """
    dictionary = exact_enumerate_snn_dictionary(inst.arch, inst.X, inst.grid)
    problem = ConvexProblem(dictionary, inst.Y, inst.reg_beta, inst.width, "squared")
    sol = solve(problem, tol=tol, max_iter=max_iter)
    return sol, dictionary, problem


def _batched_spikes(X, p, leak, thr):
    """Final-time spikes of independent neurons: ``p`` (N, d), returns (N, n) bool."""
    T, n, _ = X.shape
    N = p.shape[0]
    u = np.zeros((N, n))
    s = np.zeros((N, n))
    for t in range(T):
        u = p @ X[t].T + u * leak[:, None] - s * thr[:, None]
        s = (u >= 0.0).astype(np.float64)
    return s > 0.5


def _fit_group_outputs(S, Y, beta, group, iters=400):
    """Batched FISTA for ``min_P 0.5||S P - Y||^2 + beta sum_g ||P_g||_F``.

    ``S``: (B, n, J) features, groups of ``group`` consecutive columns.
    Returns objective values (B,).
    """
    B, n, J = S.shape
    c = Y.shape[1]
    G = J // group
    Lip = np.maximum(np.einsum("bnj,bnj->b", S, S), 1e-12)[:, None, None]
    P = np.zeros((B, J, c))
    Z, t = P.copy(), 1.0

    def prox(V, thr):
        Vg = V.reshape(B, G, group * c)
        nrm = np.linalg.norm(Vg, axis=2, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(nrm > thr[:, :, None], 1.0 - thr[:, :, None] / nrm, 0.0)
        return (Vg * f).reshape(B, J, c)

    def objective(P):
        R = S @ P - Y[None]
        pen = np.linalg.norm(P.reshape(B, G, group * c), axis=2).sum(axis=1)
        return 0.5 * np.einsum("bnc,bnc->b", R, R) + beta * pen

    best = objective(P)
    thr = (beta / Lip[:, :, 0]).reshape(B, 1)
    for _ in range(iters):
        grad = np.swapaxes(S, 1, 2) @ (S @ Z - Y[None])
        P_new = prox(Z - grad / Lip, thr)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        Z = P_new + ((t - 1.0) / t_new) * (P_new - P)
        P, t = P_new, t_new
    return np.minimum(best, objective(P))


def random_network_objective(inst: MicroInstance, n_trials: int, seed: int, off_grid: bool = False,
                             K_max: int = 3, batch: int = 20000, iters: int = 400) -> np.ndarray:
    """Regularized objectives of ``n_trials`` random normalized networks."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 977, int(off_grid)]))
    T, n, d = inst.X.shape
    m = inst.width
    leaks = np.asarray(inst.grid.leaks)
    thrs = np.asarray([t for t in inst.grid.thresholds if t > 0] or [1.0])
    out = []
    done = 0
    while done < n_trials:
        B = min(batch, n_trials - done)
        K = rng.integers(1, K_max + 1, size=B)
        N = B * K_max * m
        p = rng.normal(size=(N, d))
        if off_grid:
            leak = rng.uniform(0.0, 0.95, size=N)
            thr = np.abs(rng.normal(size=N)) + 1e-3
        else:
            leak = rng.choice(leaks, size=N)
            thr = rng.choice(thrs, size=N)
        # unit-norm scale-bearing block per neuron; spikes are unchanged
        a = np.sqrt(np.sum(p * p, axis=1) + thr * thr)
        p, thr = p / a[:, None], thr / a
        S = _batched_spikes(inst.X, p, leak, thr).astype(np.float64)
        S = S.reshape(B, K_max * m, n).transpose(0, 2, 1).copy()
        # drop unused subnets by zeroing their features
        active = (np.arange(K_max)[None, :] < K[:, None]).repeat(m, axis=1)
        S *= active[:, None, :]
        # many trials share a feature matrix; fit each distinct one once
        keys = np.packbits(S.reshape(B, -1) > 0.5, axis=1)
        _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        vals = _fit_group_outputs(S[first], inst.Y, inst.reg_beta, m, iters)
        out.append(vals[inv.ravel()])
        done += B
    return np.concatenate(out)


@dataclass
class OracleReport:
    n: int
    T: int
    d: int
    width: int
    reg_beta: float
    P: int
    convex_primal: float
    convex_dual: float
    gap: float
    network_min: float
    violations: int
    off_grid_min: float = math.nan
    off_grid_violations: int = 0
    reconstructed_objective: float = math.nan

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def network_objective(snn, X, Y, reg_beta: float) -> float:
    """Squared loss plus ``reg_beta * sum_k ||P_out,k||_F``."""
    Z = snn.forward(X)
    return LossSpec.single("squared", Y.shape[1]).value(Z, Y) + reg_beta * snn.output_norm()


def run_oracle(inst: MicroInstance, n_trials: int = 100000, seed: int = 0, off_grid_trials: int = 0,
               iters: int = 400) -> OracleReport:
    sol, dictionary, problem = convex_optimum(inst)
    objs = random_network_objective(inst, n_trials, seed, iters=iters)
    viol = int(np.sum(sol.dual_value > objs + WEAK_DUALITY_SLACK))
    T, n, d = inst.X.shape
    rep = OracleReport(n, T, d, inst.width, inst.reg_beta, dictionary.P, sol.primal_value, sol.dual_value,
                       sol.gap, float(objs.min()), viol)
    if off_grid_trials:
        off = random_network_objective(inst, off_grid_trials, seed, off_grid=True, iters=iters)
        rep.off_grid_min = float(off.min())
        rep.off_grid_violations = int(np.sum(sol.dual_value > off + WEAK_DUALITY_SLACK))
    snn = reconstruct(dictionary, sol, rule="uniform")
    rep.reconstructed_objective = network_objective(snn, inst.X, inst.Y, inst.reg_beta)
    return rep
