"""Exact forward dynamics for LIF spiking networks and threshold RNNs.

Conventions used throughout the package:

* ``threshold(x) = 1{x >= 0}``; zero (including ``-0.0``) fires.
* Sequences are arrays of shape ``(T, n, d)`` (time, samples, features).
* LIF recurrence per hidden layer ``l``::

      U^t = S_{l-1}^t @ p_in + U^{t-1} * leak - S^{t-1} * u_thr
      S^t = threshold(U^t)

  with ``S^0 = 0`` and ``U^0 = u_init`` broadcast over samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def threshold(x):
    """Binary step ``1{x >= 0}`` as a boolean array."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite pre-activation")
    return x >= 0.0


def as_sequence(inputs) -> np.ndarray:
    """Coerce a list of ``(n, d)`` matrices or a ``(T, n, d)`` array."""
    seq = np.asarray(inputs, dtype=np.float64)
    if seq.ndim == 2:
        seq = seq[None]
    if seq.ndim != 3:
        raise ValueError(f"expected (T, n, d) inputs, got shape {seq.shape}")
    if seq.shape[0] < 1:
        raise ValueError("need at least one timestep")
    return seq


@dataclass(frozen=True, eq=False)
class LifLayerParams:
    """Parameters of one hidden LIF layer.

    ``leak`` and ``u_thr`` are the diagonals of the leak and soft-reset
    matrices.
    """

    p_in: np.ndarray
    leak: np.ndarray
    u_thr: np.ndarray
    u_init: np.ndarray = None

    def __post_init__(self):
        p_in = np.array(self.p_in, dtype=np.float64, ndmin=2)
        width = p_in.shape[1]
        leak = np.broadcast_to(np.asarray(self.leak, dtype=np.float64), (width,)).copy()
        u_thr = np.broadcast_to(np.asarray(self.u_thr, dtype=np.float64), (width,)).copy()
        if self.u_init is None:
            u_init = np.zeros(width)
        else:
            u_init = np.broadcast_to(np.asarray(self.u_init, dtype=np.float64), (width,)).copy()
        for arr in (p_in, leak, u_thr, u_init):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LIF parameters must be finite")
            arr.setflags(write=False)
        if np.any(leak < 0.0) or np.any(leak >= 1.0):
            raise ValueError("leak out of [0,1)")
        object.__setattr__(self, "p_in", p_in)
        object.__setattr__(self, "leak", leak)
        object.__setattr__(self, "u_thr", u_thr)
        object.__setattr__(self, "u_init", u_init)

    @property
    def width(self) -> int:
        return self.p_in.shape[1]

    @property
    def fan_in(self) -> int:
        return self.p_in.shape[0]

    def equals(self, other: "LifLayerParams") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.p_in, self.leak, self.u_thr, self.u_init),
                (other.p_in, other.leak, other.u_thr, other.u_init),
            )
        )


@dataclass(frozen=True, eq=False)
class LifWitness:
    """Frozen hidden parameters for layers ``1 .. L-1``."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a witness needs at least one hidden layer")
        for l in range(1, len(layers)):
            if layers[l].fan_in != layers[l - 1].width:
                raise ValueError(f"shape mismatch at layer {l + 1}")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def widths(self) -> tuple:
        return tuple(layer.width for layer in self.layers)

    @property
    def m_last(self) -> int:
        return self.layers[-1].width

    def equals(self, other: "LifWitness") -> bool:
        return len(self.layers) == len(other.layers) and all(
            a.equals(b) for a, b in zip(self.layers, other.layers)
        )


@dataclass
class LifTrajectory:
    """Membranes and spikes for every layer, each of shape ``(T, n, m_l)``."""

    membranes: list = field(default_factory=list)
    spikes: list = field(default_factory=list)

    @property
    def final_spikes(self) -> np.ndarray:
        return self.spikes[-1]


@dataclass
class LifState:
    """Running state used for step-by-step simulation."""

    membranes: list
    spikes: list


def lif_initial_state(witness: LifWitness, n: int) -> LifState:
    membranes = [np.tile(layer.u_init, (n, 1)) for layer in witness.layers]
    spikes = [np.zeros((n, layer.width)) for layer in witness.layers]
    return LifState(membranes, spikes)


def lif_step(witness: LifWitness, state: LifState, x: np.ndarray) -> LifState:
    """Advance every layer by one timestep; returns the new state."""
    below = np.asarray(x, dtype=np.float64)
    membranes, spikes = [], []
    for l, layer in enumerate(witness.layers):
        if below.shape[-1] != layer.fan_in:
            raise ValueError(f"shape mismatch at layer {l + 1}")
        with np.errstate(over="ignore", invalid="ignore"):
            u = below @ layer.p_in + state.membranes[l] * layer.leak - state.spikes[l] * layer.u_thr
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("membrane overflow")
        s = (u >= 0.0).astype(np.float64)
        membranes.append(u)
        spikes.append(s)
        below = s
    return LifState(membranes, spikes)


def lif_rollout(witness: LifWitness, inputs) -> LifTrajectory:
    """Run the LIF recurrence over all timesteps and layers."""
    seq = as_sequence(inputs)
    T, n, d = seq.shape
    if d != witness.input_dim:
        raise ValueError("shape mismatch at layer 1")
    traj = LifTrajectory(
        membranes=[np.empty((T, n, m)) for m in witness.widths],
        spikes=[np.empty((T, n, m), dtype=bool) for m in witness.widths],
    )
    state = lif_initial_state(witness, n)
    for t in range(T):
        state = lif_step(witness, state, seq[t])
        for l in range(len(witness.layers)):
            traj.membranes[l][t] = state.membranes[l]
            traj.spikes[l][t] = state.spikes[l] > 0.5
    return traj


def lif_rescale(witness: LifWitness, scales: Sequence) -> LifWitness:
    """Positively rescale each layer's membrane coordinates.

    ``p_in``, ``u_thr`` and ``u_init`` are multiplied column-wise by the
    layer's scale vector; the leak (diagonal) is unchanged, so spikes are
    unchanged.
    """
    if len(scales) != len(witness.layers):
        raise ValueError("need one scale vector per hidden layer")
    layers = []
    for layer, a in zip(witness.layers, scales):
        a = np.broadcast_to(np.asarray(a, dtype=np.float64), (layer.width,))
        if np.any(~(a > 0.0)):
            raise ValueError("scale must be positive")
        layers.append(
            LifLayerParams(
                p_in=layer.p_in * a,
                leak=layer.leak,
                u_thr=layer.u_thr * a,
                u_init=layer.u_init * a,
            )
        )
    return LifWitness(tuple(layers))


# -- generic threshold RNN ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class ThresholdRnnParams:
    """Per-layer ``(p_in, p_rec)`` pairs of a binary-state recurrent net."""

    p_in: tuple
    p_rec: tuple

    def __post_init__(self):
        p_in = tuple(np.array(p, dtype=np.float64, ndmin=2) for p in self.p_in)
        p_rec = tuple(np.array(p, dtype=np.float64, ndmin=2) for p in self.p_rec)
        if len(p_in) != len(p_rec) or not p_in:
            raise ValueError("need matching, nonempty p_in / p_rec lists")
        for l, (a, r) in enumerate(zip(p_in, p_rec)):
            m = a.shape[1]
            if r.shape != (m, m):
                raise ValueError(f"shape mismatch at layer {l + 1}")
            if l and a.shape[0] != p_in[l - 1].shape[1]:
                raise ValueError(f"shape mismatch at layer {l + 1}")
        object.__setattr__(self, "p_in", p_in)
        object.__setattr__(self, "p_rec", p_rec)

    @property
    def widths(self) -> tuple:
        return tuple(p.shape[1] for p in self.p_in)


def threshold_rnn_rollout(params: ThresholdRnnParams, inputs, T: int | None = None) -> list:
    """Binary hidden states ``H_l^t``; returns per-layer ``(T, n, m_l)`` bool arrays."""
    seq = as_sequence(inputs)
    if T is not None and T != seq.shape[0]:
        raise ValueError("T does not match the input length")
    T, n, d = seq.shape
    if d != params.p_in[0].shape[0]:
        raise ValueError("shape mismatch at layer 1")
    hidden = [np.zeros((n, m)) for m in params.widths]
    out = [np.empty((T, n, m), dtype=bool) for m in params.widths]
    for t in range(T):
        below = seq[t]
        for l, (a, r) in enumerate(zip(params.p_in, params.p_rec)):
            h = threshold(below @ a + hidden[l] @ r).astype(np.float64)
            hidden[l] = h
            out[l][t] = h > 0.5
            below = h
    return out
