"""Witnessed binary spike dictionaries.

Two construction regimes:

* sampled: roll a :class:`~cvxsnn.witness.WitnessStore` through the LIF
  recurrence and keep the distinct final-layer patterns;
* exact (micro scale): enumerate every pattern realizable by a witness whose
  leak lies on a declared grid, via exact arrangement sweeps in the joint
  ``(p_in, u_thr)`` space.

Columns are bit-packed; trajectory dictionaries stack the ``T`` time slices
t-major (rows ``t*n .. (t+1)*n - 1`` hold timestep ``t+1``).
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import bitpack
from .arrangement import BudgetExceeded, exact_enumerate_arrangement, face_points, primitive
from .lif import LifLayerParams, LifWitness, as_sequence, lif_rollout
from .witness import WitnessStore, witness_from_json, witness_to_json

MAGIC = b"SNNDICT1"

__all__ = [
    "SpikeDictionary",
    "TrajectoryDictionary",
    "LifGrid",
    "build_sampled_dictionary",
    "build_trajectory_dictionary",
    "exact_enumerate_arrangement",
    "exact_enumerate_snn_dictionary",
    "save_dictionary",
    "verify_dictionary",
    "load_dictionary",
    "BudgetExceeded",
]


@dataclass(frozen=True, eq=False)
class SpikeDictionary:
    """Distinct binary columns with the witness that generated each one.

    ``witness_of[i] = (w, j)`` means column ``i`` is neuron ``j`` of the last
    hidden layer of ``witnesses[w]`` at the final timestep.
    """

    words: np.ndarray
    n_rows: int
    witness_of: np.ndarray
    witnesses: tuple
    n_samples: int
    T: int
    m_last: int
    meta: dict = field(default_factory=dict)

    kind = "final"

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        wo = np.asarray(self.witness_of, dtype=np.int64).reshape(-1, 2)
        if words.shape[0] != wo.shape[0]:
            raise ValueError("one witness entry per column")
        if words.shape[0] and words.shape[1] != bitpack.n_words(self.n_rows):
            raise ValueError("packed width does not match row count")
        words.setflags(write=False)
        wo.setflags(write=False)
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "witness_of", wo)
        object.__setattr__(self, "witnesses", tuple(self.witnesses))

    @property
    def P(self) -> int:
        return self.words.shape[0]

    @property
    def columns(self) -> np.ndarray:
        """Boolean ``(n_rows, P)`` matrix."""
        return bitpack.unpack_columns(self.words, self.n_rows)

    def dense(self, dtype=np.float64) -> np.ndarray:
        return self.columns.astype(dtype)

    def column(self, i: int) -> np.ndarray:
        return bitpack.unpack_columns(self.words[i:i + 1], self.n_rows)[:, 0]

    def witness(self, i: int):
        """``(LifWitness, neuron index)`` generating column ``i``."""
        w, j = self.witness_of[i]
        return self.witnesses[w], int(j)

    def expected_column(self, trajectory_spikes: np.ndarray, j: int) -> np.ndarray:
        return trajectory_spikes[-1, :, j]


@dataclass(frozen=True, eq=False)
class TrajectoryDictionary(SpikeDictionary):
    """Stacked ``(nT, P)`` columns; dedup is on the whole trajectory."""

    kind = "trajectory"

    @property
    def stacked(self) -> np.ndarray:
        return self.columns

    def block(self, t: int) -> np.ndarray:
        """Rows for timestep ``t`` (1-based)."""
        if not 1 <= t <= self.T:
            raise IndexError("timestep out of range")
        n = self.n_samples
        return self.columns[(t - 1) * n:t * n]

    def expected_column(self, trajectory_spikes: np.ndarray, j: int) -> np.ndarray:
        return trajectory_spikes[:, :, j].reshape(-1)


# -- sampled regime ----------------------------------------------------------


def _final_layer_spikes(witness: LifWitness, seq: np.ndarray) -> np.ndarray:
    return lif_rollout(witness, seq).spikes[-1]


def _build(store: WitnessStore, inputs, stacked: bool):
    if len(store) == 0:
        raise ValueError("no witnesses")
    seq = as_sequence(inputs)
    T, n, d = seq.shape
    if d != store.arch.input_dim:
        raise ValueError("inputs do not match the witness architecture")
    m = store.arch.m_last
    n_rows = n * T if stacked else n
    chunks, owners = [], []
    for w_idx, w in enumerate(store.witnesses):
        S = _final_layer_spikes(w, seq)
        B = S.reshape(T * n, m) if stacked else S[-1]
        chunks.append(bitpack.pack_columns(B))
        owners.extend((w_idx, j) for j in range(m))
    words = np.concatenate(chunks, axis=0)
    keep, _ = bitpack.unique_columns(words)
    cls = TrajectoryDictionary if stacked else SpikeDictionary
    return cls(
        words=words[keep],
        n_rows=n_rows,
        witness_of=np.asarray(owners, dtype=np.int64)[keep],
        witnesses=store.witnesses,
        n_samples=n,
        T=T,
        m_last=m,
        meta={"regime": "sampled", "n_candidates": len(owners), **{k: v for k, v in store.meta.items()
                                                                     if isinstance(v, (int, float, str))}},
    )


def build_sampled_dictionary(store: WitnessStore, inputs) -> SpikeDictionary:
    """Final-timestep dictionary of the last hidden layer, deduplicated.

    Candidates are ordered by ``(witness, neuron)`` and the first occurrence
    of each pattern is kept, so representatives are the lowest indices.
    """
    return _build(store, inputs, stacked=False)


def build_trajectory_dictionary(store: WitnessStore, inputs) -> TrajectoryDictionary:
    """Like :func:`build_sampled_dictionary` but columns are full ``nT`` stacks."""
    return _build(store, inputs, stacked=True)


def verify_dictionary(dictionary: SpikeDictionary, inputs) -> bool:
    """Re-roll every stored witness and compare with its column bit-exactly."""
    seq = as_sequence(inputs)
    cols = dictionary.columns
    cache = {}
    for i, (w, j) in enumerate(dictionary.witness_of):
        if w not in cache:
            cache[w] = _final_layer_spikes(dictionary.witnesses[w], seq)
        if not np.array_equal(dictionary.expected_column(cache[w], j), cols[:, i]):
            return False
    return True


# -- exact enumeration (micro scale) -----------------------------------------


@dataclass(frozen=True)
class LifGrid:
    """Declared grid of witness leaks and thresholds.

    Every positive threshold yields the same set of patterns (scale ``p_in``
    with it), so thresholds only matter through whether ``0`` is allowed.
    ``u_init`` is fixed to zero.
    """

    leaks: tuple = (0.0, 0.25, 0.5, 0.75)
    thresholds: tuple = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "leaks", tuple(float(b) for b in self.leaks))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if not self.leaks or any(not 0.0 <= b < 1.0 for b in self.leaks):
            raise ValueError("leak out of [0,1)")
        if not self.thresholds or any(t < 0.0 for t in self.thresholds):
            raise ValueError("grid thresholds must be nonnegative")

    @property
    def allow_zero_threshold(self) -> bool:
        return 0.0 in self.thresholds

    def refine(self, extra_leaks=()) -> "LifGrid":
        return LifGrid(tuple(sorted(set(self.leaks) | {float(b) for b in extra_leaks})), self.thresholds)


def _neuron_normals(X, leak: Fraction):
    """Normals ``(a, -c)`` of every (time, sample, spike-history) hyperplane.

    ``X`` is an exact ``(T, n, d)`` nested list of Fractions.  For history
    ``h`` the membrane at ``t`` is ``a . p - c * theta`` with
    ``a = sum_tau leak^(t-tau) X^tau`` and ``c = sum_{tau>=2} h_{tau-1} leak^(t-tau)``.
    Returns the primitive integer normals and a map ``(t, i, h) -> row``.
    """
    T, n = len(X), len(X[0])
    d = len(X[0][0])
    normals, index = [], {}
    for t in range(1, T + 1):
        for i in range(n):
            a = [sum((leak ** (t - tau) * X[tau - 1][i][k] for tau in range(1, t + 1)), Fraction(0))
                 for k in range(d)]
            for h in itertools.product((0, 1), repeat=t - 1):
                c = sum((leak ** (t - tau) for tau in range(2, t + 1) if h[tau - 2]), Fraction(0))
                index[(t, i, h)] = len(normals)
                normals.append(primitive(a + [-c]))
    return normals, index


def _exact_trajectories(normals, index, T: int, n: int, points) -> list:
    """Spike trajectory ``(T, n)`` of a single neuron at each ``(p, theta)`` point.

    The membrane at ``(t, i)`` is a positive multiple of ``normal . point``
    for the normal indexed by the spike history actually taken.
    """
    if not points:
        return []
    signs = np.asarray(points, dtype=object) @ np.asarray(normals, dtype=object).T >= 0
    out = []
    for row in signs:
        hist = [()] * n
        traj = []
        for t in range(1, T + 1):
            step = tuple(int(row[index[(t, i, hist[i])]]) for i in range(n))
            hist = [hist[i] + (step[i],) for i in range(n)]
            traj.append(step)
        out.append(tuple(traj))
    return out


def _enumerate_neuron(X, grid: LifGrid):
    """Map trajectory -> (leak, p, theta) for one neuron on exact inputs."""
    d = len(X[0][0])
    if d + 1 > 3:
        raise BudgetExceeded("exact enumeration out of budget")
    found = {}
    for leak_f in grid.leaks:
        leak = Fraction(leak_f)
        normals, index = _neuron_normals(X, leak)
        theta_axis = tuple([0] * d + [1])
        pts = face_points(normals + [theta_axis], d + 1)
        keep = [pt for pt in pts if pt[-1] > 0 or (pt[-1] == 0 and grid.allow_zero_threshold)]
        for traj, pt in zip(_exact_trajectories(normals, index, len(X), len(X[0]), keep), keep):
            found.setdefault(traj, (leak_f, pt[:-1], pt[-1]))
    return found


def _exact_inputs(seq: np.ndarray):
    return [[[Fraction(float(v)) for v in row] for row in step] for step in seq]


def exact_enumerate_snn_dictionary(arch, inputs, grid: LifGrid | None = None, kind: str = "final",
                                   max_samples: int = 8, max_T: int = 3, max_combos: int = 20000):
    """Grid-complete witnessed dictionary for micro LIF architectures.

    ``arch`` is a :class:`~cvxsnn.witness.LifArch` with one or two hidden
    layers of width at most 2 and input dimension at most 2.  Every
    returned column is re-rolled through the float simulator; inputs should
    be dyadic rationals so that float and exact arithmetic agree.
    """
    grid = grid or LifGrid()
    seq = as_sequence(inputs)
    T, n, d = seq.shape
    widths = tuple(arch.widths)
    if n > max_samples or T > max_T or len(widths) > 2 or max(widths) > 2 or d > 2:
        raise BudgetExceeded("exact enumeration out of budget")
    if d != arch.input_dim:
        raise ValueError("inputs do not match the witness architecture")
    X = _exact_inputs(seq)
    m_last = widths[-1]

    def neuron_layer(fan_in, leak, p, theta, width):
        p_in = np.tile(np.asarray(p, dtype=np.float64).reshape(fan_in, 1), (1, width))
        return LifLayerParams(p_in, np.full(width, leak), np.full(width, float(theta)))

    candidates = {}
    if len(widths) == 1:
        for traj, (leak, p, theta) in _enumerate_neuron(X, grid).items():
            candidates.setdefault(traj, LifWitness((neuron_layer(d, leak, p, theta, m_last),)))
    else:
        m1 = widths[0]
        first = sorted(_enumerate_neuron(X, grid).items())
        combos = itertools.combinations_with_replacement(range(len(first)), m1)
        n_combos = 0
        for combo in combos:
            n_combos += 1
            if n_combos > max_combos:
                raise BudgetExceeded("exact enumeration out of budget")
            X2 = [[[Fraction(first[c][0][t][i]) for c in combo] for i in range(n)] for t in range(T)]
            params = [first[c][1] for c in combo]
            layer1 = LifLayerParams(
                np.array([[float(v) for v in pr[1]] for pr in params]).T.reshape(d, m1),
                np.array([pr[0] for pr in params]),
                np.array([float(pr[2]) for pr in params]),
            )
            for traj, (leak, p, theta) in _enumerate_neuron(X2, grid).items():
                if traj not in candidates:
                    candidates[traj] = LifWitness((layer1, neuron_layer(m1, leak, p, theta, m_last)))

    # verify against the float simulator, then pack in a canonical order
    trajs = sorted(candidates)
    witnesses = []
    for traj in trajs:
        w = candidates[traj]
        S = lif_rollout(w, seq).spikes[-1][:, :, 0]
        if not np.array_equal(S, np.asarray(traj, dtype=bool)):
            raise ArithmeticError("float rollout disagrees with exact enumeration; use dyadic inputs")
        witnesses.append(w)
    stacked = kind == "trajectory"
    if kind not in ("final", "trajectory"):
        raise ValueError(f"unknown dictionary kind {kind!r}")
    B = np.array([np.asarray(tr, dtype=bool).reshape(-1) if stacked else np.asarray(tr[-1], dtype=bool)
                  for tr in trajs]).T.reshape(n * T if stacked else n, len(trajs))
    words = bitpack.pack_columns(B)
    keep, _ = bitpack.unique_columns(words)
    cls = TrajectoryDictionary if stacked else SpikeDictionary
    return cls(
        words=words[keep],
        n_rows=B.shape[0],
        witness_of=np.stack([keep, np.zeros_like(keep)], axis=1),
        witnesses=tuple(witnesses),
        n_samples=n,
        T=T,
        m_last=m_last,
        meta={"regime": "exact", "leaks": list(grid.leaks), "thresholds": list(grid.thresholds)},
    )


# -- persistence -------------------------------------------------------------


def dictionary_to_bytes(dictionary: SpikeDictionary) -> bytes:
    header = MAGIC + struct.pack("<4I", dictionary.n_rows, dictionary.P, dictionary.T, dictionary.m_last)
    data = np.ascontiguousarray(dictionary.words, dtype="<u8").tobytes()
    trailer = {
        "kind": dictionary.kind,
        "n_samples": dictionary.n_samples,
        "witness_of": dictionary.witness_of.tolist(),
        "witnesses": [witness_to_json(w) for w in dictionary.witnesses],
        "meta": dictionary.meta,
    }
    return header + data + json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode()


def dictionary_from_bytes(blob: bytes) -> SpikeDictionary:
    if blob[:8] != MAGIC:
        raise ValueError("not a spike dictionary container")
    n_rows, P, T, m_last = struct.unpack("<4I", blob[8:24])
    W = bitpack.n_words(n_rows)
    end = 24 + 8 * P * W
    words = np.frombuffer(blob[24:end], dtype="<u8").reshape(P, W).astype(np.uint64)
    trailer = json.loads(blob[end:].decode())
    cls = TrajectoryDictionary if trailer["kind"] == "trajectory" else SpikeDictionary
    return cls(
        words=words,
        n_rows=n_rows,
        witness_of=np.asarray(trailer["witness_of"], dtype=np.int64).reshape(-1, 2),
        witnesses=tuple(witness_from_json(w) for w in trailer["witnesses"]),
        n_samples=int(trailer["n_samples"]),
        T=T,
        m_last=m_last,
        meta=trailer.get("meta", {}),
    )


def save_dictionary(dictionary: SpikeDictionary, path) -> None:
    Path(path).write_bytes(dictionary_to_bytes(dictionary))


def load_dictionary(path) -> SpikeDictionary:
    return dictionary_from_bytes(Path(path).read_bytes())
