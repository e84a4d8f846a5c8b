"""Convex losses with gradients and Fenchel conjugates.

A :class:`LossSpec` partitions output columns into blocks, each with its own
loss kind, and carries nonnegative per-row weights ``r``.  The total loss is
``sum_i r_i * sum_blocks loss(z_i[block], y_i[block])`` and the conjugate of
a weighted sum is ``sum_i r_i * loss*(u_i / r_i)``; rows with ``r_i = 0``
force ``u_i = 0``.

Kinds:

* ``squared``: ``0.5 * ||z - y||^2``;
* ``logistic``: ``log(1 + exp(-y z))`` per column, ``y`` in ``{-1, +1}``;
* ``softmax``: ``logsumexp(z) - <z, y>`` with ``y`` one-hot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, softmax, xlogy

KINDS = ("squared", "logistic", "softmax")

# curvature bounds of the per-row losses
SMOOTHNESS = {"squared": 1.0, "logistic": 0.25, "softmax": 0.5}

_DOMAIN_TOL = 1e-9


@dataclass(frozen=True)
class LossBlock:
    kind: str
    start: int
    stop: int
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0 <= self.start < self.stop:
            raise ValueError("empty loss block")
        if not (self.weight >= 0.0 and np.isfinite(self.weight)):
            raise ValueError("block weights must be nonnegative")

    @property
    def cols(self) -> slice:
        return slice(self.start, self.stop)


@dataclass(frozen=True, eq=False)
class LossSpec:
    blocks: tuple
    row_weights: np.ndarray = None

    def __post_init__(self):
        blocks = tuple(self.blocks)
        stop = 0
        for b in blocks:
            if b.start != stop:
                raise ValueError("loss blocks must tile the output columns")
            stop = b.stop
        object.__setattr__(self, "blocks", blocks)
        if self.row_weights is not None:
            r = np.asarray(self.row_weights, dtype=np.float64).reshape(-1)
            if np.any(r < 0) or not np.all(np.isfinite(r)):
                raise ValueError("row weights must be finite and nonnegative")
            r.setflags(write=False)
            object.__setattr__(self, "row_weights", r)

    @classmethod
    def single(cls, kind: str, d_out: int, row_weights=None) -> "LossSpec":
        return cls((LossBlock(kind, 0, d_out),), row_weights)

    @property
    def d_out(self) -> int:
        return self.blocks[-1].stop

    def with_weights(self, row_weights) -> "LossSpec":
        return LossSpec(self.blocks, row_weights)

    def weights(self, n: int) -> np.ndarray:
        if self.row_weights is None:
            return np.ones(n)
        if self.row_weights.shape[0] != n:
            raise ValueError("row weights do not match the number of rows")
        return self.row_weights

    def smoothness(self) -> float:
        """Curvature bound per unit row weight."""
        return max(b.weight * SMOOTHNESS[b.kind] for b in self.blocks)

    def to_dict(self) -> dict:
        return {"blocks": [[b.kind, b.start, b.stop, b.weight] for b in self.blocks]}

    def validate(self, Y: np.ndarray) -> None:
        Y = np.asarray(Y)
        if Y.ndim != 2 or Y.shape[1] != self.d_out:
            raise ValueError("targets do not match the loss spec")
        for b in self.blocks:
            y = Y[:, b.cols]
            if b.kind == "logistic" and not np.all(np.abs(y) == 1.0):
                raise ValueError("label out of domain: logistic targets must be +-1")
            if b.kind == "softmax":
                if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
                    raise ValueError("label out of domain: softmax targets must be one-hot")

    # -- per-row pieces ------------------------------------------------------

    def row_values(self, Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
        out = np.zeros(Z.shape[0])
        for b in self.blocks:
            z, y = Z[:, b.cols], Y[:, b.cols]
            if b.kind == "squared":
                v = 0.5 * np.sum((z - y) ** 2, axis=1)
            elif b.kind == "logistic":
                v = np.sum(np.logaddexp(0.0, -y * z), axis=1)
            else:
                v = logsumexp(z, axis=1) - np.sum(z * y, axis=1)
            out += b.weight * v
        return out

    def row_gradients(self, Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
        G = np.empty_like(Z, dtype=np.float64)
        for b in self.blocks:
            z, y = Z[:, b.cols], Y[:, b.cols]
            if b.kind == "squared":
                G[:, b.cols] = z - y
            elif b.kind == "logistic":
                G[:, b.cols] = -y * expit(-y * z)
            else:
                G[:, b.cols] = softmax(z, axis=1) - y
            G[:, b.cols] *= b.weight
        return G

    def row_conjugates(self, U: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Per-row ``loss*(u_i)``; ``inf`` outside the domain.

        A block scaled by ``c > 0`` contributes ``c * loss*(u / c)``.
        """
        out = np.zeros(U.shape[0])
        for b in self.blocks:
            u, y = U[:, b.cols], Y[:, b.cols]
            if b.weight == 0.0:
                out += np.where(np.any(u != 0.0, axis=1), np.inf, 0.0)
                continue
            c = b.weight
            u = u / c
            if b.kind == "squared":
                out += c * (0.5 * np.sum(u * u, axis=1) + np.sum(u * y, axis=1))
            elif b.kind == "logistic":
                s = -u * y
                bad = np.any((s < -_DOMAIN_TOL) | (s > 1.0 + _DOMAIN_TOL), axis=1)
                s = np.clip(s, 0.0, 1.0)
                val = np.sum(xlogy(s, s) + xlogy(1.0 - s, 1.0 - s), axis=1)
                out += np.where(bad, np.inf, c * val)
            else:
                q = u + y
                bad = np.any(q < -_DOMAIN_TOL, axis=1) | (np.abs(q.sum(axis=1) - 1.0) > _DOMAIN_TOL)
                q = np.clip(q, 0.0, None)
                out += np.where(bad, np.inf, c * np.sum(xlogy(q, q), axis=1))
        return out

    # -- weighted totals -----------------------------------------------------

    def value(self, Z, Y) -> float:
        Z, Y = np.asarray(Z, dtype=np.float64), np.asarray(Y, dtype=np.float64)
        return float(self.weights(Z.shape[0]) @ self.row_values(Z, Y))

    def gradient(self, Z, Y) -> np.ndarray:
        Z, Y = np.asarray(Z, dtype=np.float64), np.asarray(Y, dtype=np.float64)
        return self.weights(Z.shape[0])[:, None] * self.row_gradients(Z, Y)

    def conjugate(self, U, Y) -> float:
        """``L*(U)`` of the weighted loss at dual argument ``U`` (same shape as Y)."""
        U, Y = np.asarray(U, dtype=np.float64), np.asarray(Y, dtype=np.float64)
        if not np.all(np.isfinite(U)):
            raise ValueError("conjugate argument must be finite")
        r = self.weights(U.shape[0])
        pos = r > 0
        if np.any(U[~pos] != 0.0):
            return np.inf
        vals = self.row_conjugates(U[pos] / r[pos, None], Y[pos])
        if not np.all(np.isfinite(vals)):
            return np.inf
        return float(r[pos] @ vals)


def _spec(kind, Y, weights) -> LossSpec:
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    return LossSpec.single(kind, Y.shape[1], weights)


def _as2d(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def loss_value(kind: str, predictions, Y, weights=None) -> float:
    Z, Y = _as2d(predictions), _as2d(Y)
    spec = _spec(kind, Y, weights)
    spec.validate(Y)
    return spec.value(Z, Y)


def loss_gradient(kind: str, predictions, Y, weights=None) -> np.ndarray:
    Z, Y = _as2d(predictions), _as2d(Y)
    spec = _spec(kind, Y, weights)
    spec.validate(Y)
    return spec.gradient(Z, Y)


def loss_conjugate(kind: str, U, Y, weights=None) -> float:
    U, Y = _as2d(U), _as2d(Y)
    return _spec(kind, Y, weights).conjugate(U, Y)


def predict_probabilities(kind: str, Z: np.ndarray) -> np.ndarray:
    if kind == "logistic":
        return expit(Z)
    if kind == "softmax":
        return np.exp(log_softmax(Z, axis=1))
    return Z
