"""Certified solver for the lasso over a spike dictionary.

Problem::

    min_W  L(D W, Y) + tau * sum_i ||W_i||_2        tau = reg_beta / sqrt(m_last)

(or ``tau * ||W||_1`` entrywise with ``penalty="l1"``).  The certificate
rescales ``lam0 = -grad L(D W)`` into the dual feasible set
``max_i ||D_i^T lam||_* <= tau`` and reports ``-L*(-lam)`` as a lower bound.

Duplicate ``(D row, Y row)`` pairs are merged into one row with summed loss
weight before iterating; this is an exact reformulation.  The returned
certificate is always evaluated on the uncompressed rows.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossSpec

PENALTIES = ("group", "l1")
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ConvexProblem:
    """``dictionary`` is a SpikeDictionary/TrajectoryDictionary or a dense matrix."""

    dictionary: object
    Y: np.ndarray
    reg_beta: float
    m_last: int = None
    loss: object = "squared"
    timestep_weights: np.ndarray = None
    penalty: str = "group"
    reduction: str = "sum"

    def __post_init__(self):
        if not self.reg_beta > 0.0 or not math.isfinite(self.reg_beta):
            raise ValueError("reg_beta must be positive")
        Y = np.asarray(self.Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        Y.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        if self.m_last is None:
            object.__setattr__(self, "m_last", int(getattr(self.dictionary, "m_last", 1)))
        if self.m_last < 1:
            raise ValueError("m_last must be positive")
        if self.penalty not in PENALTIES:
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        spec = self.loss if isinstance(self.loss, LossSpec) else LossSpec.single(self.loss, Y.shape[1])
        n_rows = self.D.shape[0]
        if Y.shape[0] != n_rows:
            raise ValueError("targets do not match the dictionary rows")
        if self.D.shape[1] == 0:
            raise ValueError("empty dictionary")
        r = np.ones(n_rows) if spec.row_weights is None else spec.weights(n_rows).copy()
        if self.timestep_weights is not None:
            w = np.asarray(self.timestep_weights, dtype=np.float64).reshape(-1)
            if np.any(w < 0):
                raise ValueError("timestep weights must be nonnegative")
            if n_rows % w.size:
                raise ValueError("timestep weights do not divide the rows")
            r = r * np.repeat(w, n_rows // w.size)
        if self.reduction == "mean":
            r = r / self.n_samples
        spec = spec.with_weights(r)
        spec.validate(Y)
        object.__setattr__(self, "_spec", spec)

    @property
    def D(self) -> np.ndarray:
        cache = self.__dict__.get("_D")
        if cache is None:
            d = self.dictionary
            cache = d.dense() if hasattr(d, "dense") else np.asarray(d, dtype=np.float64)
            if cache.ndim != 2:
                raise ValueError("dictionary must be a matrix")
            cache = np.ascontiguousarray(cache)
            cache.setflags(write=False)
            object.__setattr__(self, "_D", cache)
        return cache

    @property
    def n_samples(self) -> int:
        return int(getattr(self.dictionary, "n_samples", self.D.shape[0]))

    @property
    def loss_spec(self) -> LossSpec:
        return self._spec

    @property
    def tau(self) -> float:
        return self.reg_beta / math.sqrt(self.m_last)

    @property
    def P(self) -> int:
        return self.D.shape[1]

    @property
    def d_out(self) -> int:
        return self.Y.shape[1]

    def penalty_value(self, W) -> float:
        return self.tau * _penalty_norm(W, self.penalty)

    def objective(self, W) -> float:
        W = _as_w(W, self.P, self.d_out)
        return self._spec.value(self.D @ W, self.Y) + self.penalty_value(W)

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.packbits(self.D.astype(bool), axis=None).tobytes())
        h.update(np.asarray(self.D.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.Y, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self._spec.weights(self.D.shape[0]), dtype="<f8").tobytes())
        meta = {"beta": self.reg_beta, "m": self.m_last, "penalty": self.penalty, **self._spec.to_dict()}
        h.update(json.dumps(meta, sort_keys=True).encode())
        return h.hexdigest()


@dataclass
class ConvexSolution:
    w_tilde: np.ndarray
    primal_value: float
    dual_value: float
    gap: float
    iterations: int
    dual_point: np.ndarray = None
    converged: bool = True
    problem_hash: str = ""
    history: list = field(default_factory=list)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.w_tilde != 0.0, axis=1))


@dataclass
class Certificate:
    dual_point: np.ndarray
    dual_value: float
    primal_value: float
    gap: float
    scale: float


def _as_w(W, P, c) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W.reshape(-1, 1)
    if W.shape != (P, c):
        raise ValueError("w_tilde shape does not match the problem")
    return W


def _penalty_norm(W, penalty) -> float:
    W = np.asarray(W, dtype=np.float64)
    if penalty == "group":
        return float(np.sum(np.sqrt(np.sum(W * W, axis=1))))
    return float(np.sum(np.abs(W)))


def _dual_norms(G, penalty) -> float:
    """Largest dual-norm row of ``D^T lam`` for the chosen penalty."""
    if G.size == 0:
        return 0.0
    if penalty == "group":
        return float(np.max(np.sqrt(np.sum(G * G, axis=1))))
    return float(np.max(np.abs(G)))


def _prox(V, thr, penalty) -> np.ndarray:
    if penalty == "l1":
        return np.sign(V) * np.maximum(np.abs(V) - thr, 0.0)
    norms = np.sqrt(np.sum(V * V, axis=1, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(norms > thr, 1.0 - thr / norms, 0.0)
    return V * f


def _certify(spec: LossSpec, D, Y, W, tau, penalty, Z=None, DT=None) -> Certificate:
    Z = D @ W if Z is None else Z
    G = spec.gradient(Z, Y)
    primal = spec.value(Z, Y) + tau * _penalty_norm(W, penalty)
    m = _dual_norms((D.T if DT is None else DT) @ G, penalty)
    s = 1.0 if m <= tau else tau / m
    lam = -s * G
    dual = -spec.conjugate(-lam, Y)
    return Certificate(lam, dual, primal, primal - dual, s)


def dual_certificate(problem: ConvexProblem, w_tilde) -> Certificate:
    """Feasible dual point by gradient rescaling, dual value and gap."""
    W = _as_w(w_tilde, problem.P, problem.d_out)
    return _certify(problem.loss_spec, problem.D, problem.Y, W, problem.tau, problem.penalty)


# -- compression -------------------------------------------------------------


@dataclass
class _Compressed:
    D: np.ndarray
    Y: np.ndarray
    spec: LossSpec
    inverse: np.ndarray  # full row -> compressed row (-1 for zero weight)


def compress_rows(D, Y, spec: LossSpec) -> _Compressed:
    """Merge identical ``(D row, Y row)`` pairs, summing their loss weights."""
    n = D.shape[0]
    r = spec.weights(n)
    live = np.flatnonzero(r > 0)
    keyD = np.packbits(D[live] != 0, axis=1) if np.all((D == 0) | (D == 1)) else np.ascontiguousarray(D[live]).view(np.uint8)
    keys = np.concatenate([keyD.reshape(live.size, -1),
                           np.ascontiguousarray(Y[live]).view(np.uint8).reshape(live.size, -1)], axis=1)
    keys = np.ascontiguousarray(keys)
    void = keys.view(np.dtype((np.void, keys.shape[1]))).ravel()
    _, first, inv = np.unique(void, return_index=True, return_inverse=True)
    inv = inv.ravel()
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    inv = rank[inv]
    rows = live[first[order]]
    rc = np.zeros(rows.size)
    np.add.at(rc, inv, r[live])
    inverse = np.full(n, -1, dtype=np.int64)
    inverse[live] = inv
    return _Compressed(np.ascontiguousarray(D[rows]), np.ascontiguousarray(Y[rows]),
                       spec.with_weights(rc), inverse)


def _lipschitz(D, spec: LossSpec, iters: int = 60) -> float:
    """Power iteration for ``||diag(sqrt r) D||_2^2`` times the curvature bound."""
    r = spec.weights(D.shape[0])
    A = D * np.sqrt(r)[:, None]
    v = np.random.default_rng(0).standard_normal(D.shape[1])
    sig = 0.0
    for _ in range(iters):
        u = A @ v
        w = A.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 1e-12
        sig = nw
        v = w / nw
    return max(spec.smoothness() * sig * 1.02, 1e-12)


# -- solver ------------------------------------------------------------------


def solve(problem: ConvexProblem, tol: float = 1e-7, max_iter: int = 50000, check_every: int = 10,
          w0=None, compress: bool = True) -> ConvexSolution:
    """Monotone FISTA with function-value restarts and backtracking.

    Stops when the certified gap is at most ``tol`` or after ``max_iter``
    iterations, returning the best certified iterate.
    """
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    P, c = problem.P, problem.d_out
    tau, pen = problem.tau, problem.penalty
    full_spec = problem.loss_spec
    if compress:
        cp = compress_rows(problem.D, problem.Y, full_spec)
        D, Y, spec = cp.D, cp.Y, cp.spec
    else:
        D, Y, spec = problem.D, problem.Y, full_spec

    def f(W):
        return spec.value(D @ W, Y)

    def F(W):
        val = f(W) + tau * _penalty_norm(W, pen)
        if not math.isfinite(val):
            raise FloatingPointError("divergence (check step size)")
        return val

    x = np.zeros((P, c)) if w0 is None else _as_w(w0, P, c).copy()
    zero = np.zeros((P, c))
    cert0 = _certify(spec, D, Y, zero, tau, pen)
    if cert0.scale == 1.0 and w0 is None:
        # null solution is optimal
        final = _certify(full_spec, problem.D, problem.Y, zero, tau, pen)
        return ConvexSolution(zero, final.primal_value, final.dual_value, final.gap, 0, final.dual_point,
                              final.gap <= tol, problem.hash())

    Lk = _lipschitz(D, spec)
    DT = np.ascontiguousarray(D.T)
    Fx = F(x)
    Zx = D @ x
    y, Zy, t, at_x = x.copy(), Zx, 1.0, True
    best = (np.inf, x.copy())
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        fy = spec.value(Zy, Y)
        g = DT @ spec.gradient(Zy, Y)
        while True:
            z = _prox(y - g / Lk, tau / Lk, pen)
            dz = z - y
            Zz = D @ z
            fz = spec.value(Zz, Y)
            if not math.isfinite(fz):
                raise FloatingPointError("divergence (check step size)")
            if fz <= fy + np.sum(g * dz) + 0.5 * Lk * np.sum(dz * dz) + 1e-12 * max(1.0, abs(fy)):
                break
            Lk *= 2.0
        Fz = fz + tau * _penalty_norm(z, pen)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        # a plain prox step from x descends in exact arithmetic; near the
        # optimum F differences drown in rounding, so accept it regardless
        if Fz <= Fx or at_x:
            mom = (t - 1.0) / t_new
            # predictions are linear in the weights, so the extrapolation is free
            y, Zy = z + mom * (z - x), Zz + mom * (Zz - Zx)
            x, Zx, Fx = z, Zz, Fz
            t, at_x = t_new, False
        else:
            # function-value restart; keep the monotone iterate
            y, Zy, t, at_x = x.copy(), Zx, 1.0, True
        if it % check_every == 0 or it == max_iter:
            cert = _certify(spec, D, Y, x, tau, pen, Z=Zx, DT=DT)
            history.append((it, cert.primal_value, cert.gap))
            if cert.gap < best[0]:
                best = (cert.gap, x.copy())
            if cert.gap <= tol:
                break
    W = best[1] if best[0] < np.inf else x
    final = _certify(full_spec, problem.D, problem.Y, W, tau, pen)
    return ConvexSolution(W, final.primal_value, final.dual_value, final.gap, it, final.dual_point,
                          final.gap <= tol, problem.hash(), history)


# -- persistence -------------------------------------------------------------


def solution_to_json(sol: ConvexSolution) -> dict:
    rows, cols = np.nonzero(sol.w_tilde)
    return {
        "format_version": FORMAT_VERSION,
        "shape": list(sol.w_tilde.shape),
        "w_tilde": [[int(i), int(j), float(sol.w_tilde[i, j])] for i, j in zip(rows, cols)],
        "primal": sol.primal_value,
        "dual": sol.dual_value,
        "gap": sol.gap,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "problem_hash": sol.problem_hash,
    }


def solution_from_json(doc: dict) -> ConvexSolution:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported solution format")
    W = np.zeros(doc["shape"])
    for i, j, v in doc["w_tilde"]:
        W[i, j] = v
    return ConvexSolution(W, doc["primal"], doc["dual"], doc["gap"], doc["iterations"], None,
                          doc.get("converged", True), doc.get("problem_hash", ""))


def save_solution(sol: ConvexSolution, path) -> None:
    Path(path).write_text(json.dumps(solution_to_json(sol), indent=1))


def load_solution(path) -> ConvexSolution:
    return solution_from_json(json.loads(Path(path).read_text()))
