"""Executable K-parallel LIF networks built from convex solutions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lif import LifLayerParams, LifWitness, as_sequence, lif_initial_state, lif_rollout, lif_step
from .witness import witness_from_json, witness_to_json

FORMAT_VERSION = 1
READOUTS = ("final_time", "per_timestep")
RULES = ("masked", "uniform")


@dataclass(frozen=True, eq=False)
class Subnet:
    """One parallel branch; ``columns`` records the dictionary columns it carries
    as ``(column index, neuron index)`` pairs."""

    witness: LifWitness
    p_out: np.ndarray
    columns: tuple = ()

    def __post_init__(self):
        p = np.array(self.p_out, dtype=np.float64, ndmin=2)
        if p.shape[0] != self.witness.m_last:
            raise ValueError("p_out rows must match the last hidden width")
        p.setflags(write=False)
        object.__setattr__(self, "p_out", p)
        object.__setattr__(self, "columns", tuple(tuple(int(v) for v in c) for c in self.columns))


@dataclass(frozen=True, eq=False)
class ParallelSnn:
    subnets: tuple
    d_out: int
    readout_rule: str = "final_time"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "subnets", tuple(self.subnets))
        if self.readout_rule not in READOUTS:
            raise ValueError(f"unknown readout rule {self.readout_rule!r}")
        for s in self.subnets:
            if s.p_out.shape[1] != self.d_out:
                raise ValueError("p_out columns must match d_out")

    @property
    def K(self) -> int:
        return len(self.subnets)

    @property
    def T(self):
        return self.meta.get("T")

    def hidden_witnesses(self) -> list:
        return [s.witness for s in self.subnets]

    def forward(self, inputs) -> np.ndarray:
        """``(n, d_out)`` for the final-time readout, ``(T*n, d_out)`` t-major otherwise."""
        seq = as_sequence(inputs)
        T, n, _ = seq.shape
        rows = n if self.readout_rule == "final_time" else T * n
        out = np.zeros((rows, self.d_out))
        for s in self.subnets:
            S = lif_rollout(s.witness, seq).spikes[-1].astype(np.float64)
            if self.readout_rule == "final_time":
                out += S[-1] @ s.p_out
            else:
                out += S.reshape(T * n, -1) @ s.p_out
        return out

    def output_norm(self) -> float:
        """``sum_k ||P_out,k||_F``, the reduced regularizer of a normalized network."""
        return float(sum(np.linalg.norm(s.p_out) for s in self.subnets))

    # step protocol used by sequential evaluation
    def begin(self, n: int):
        return [lif_initial_state(s.witness, n) for s in self.subnets]

    def step(self, state, x):
        x = np.asarray(x, dtype=np.float64)
        new, y = [], np.zeros((x.shape[0], self.d_out))
        for s, st in zip(self.subnets, state):
            st = lif_step(s.witness, st, x)
            new.append(st)
            y += st.spikes[-1] @ s.p_out
        return new, y


def _replicate_neuron(witness: LifWitness, j: int) -> LifWitness:
    """Copy of ``witness`` whose last layer repeats neuron ``j`` in every slot."""
    last = witness.layers[-1]
    m = last.width
    rep = LifLayerParams(
        np.repeat(last.p_in[:, j:j + 1], m, axis=1),
        np.full(m, last.leak[j]),
        np.full(m, last.u_thr[j]),
        np.full(m, last.u_init[j]),
    )
    return LifWitness(witness.layers[:-1] + (rep,))


def reconstruct(dictionary, solution, rule: str = "masked", merge: bool = False) -> ParallelSnn:
    """One subnet per nonzero coefficient row of ``solution.w_tilde``.

    ``rule="masked"`` keeps the witness and puts ``w_i`` only on the
    generating neuron's row of ``p_out``.  ``rule="uniform"`` replicates
    the generating neuron across the last layer and sets
    ``p_out = (w_i / m) 1``.  ``merge=True`` (masked only) folds columns that
    share a witness into a single subnet.
    """
    if rule not in RULES:
        raise ValueError(f"unknown reconstruction rule {rule!r}")
    W = np.asarray(getattr(solution, "w_tilde", solution), dtype=np.float64)
    if W.ndim == 1:
        W = W.reshape(-1, 1)
    if W.shape[0] != dictionary.P:
        raise ValueError("solution does not match the dictionary")
    d_out = W.shape[1]
    readout = "per_timestep" if dictionary.kind == "trajectory" else "final_time"
    meta = {"T": dictionary.T, "rule": rule}
    support = np.flatnonzero(np.any(W != 0.0, axis=1))
    subnets = []
    if rule == "uniform":
        for i in support:
            w, j = dictionary.witness(i)
            m = w.m_last
            p_out = np.tile(W[i] / m, (m, 1))
            subnets.append(Subnet(_replicate_neuron(w, j), p_out, ((i, j),)))
        return ParallelSnn(subnets, d_out, readout, meta)
    groups = {}
    for i in support:
        widx, j = (int(v) for v in dictionary.witness_of[i])
        key = widx if merge else (widx, int(i))
        groups.setdefault(key, (widx, []))[1].append((int(i), j))
    for _, (widx, cols) in groups.items():
        w = dictionary.witnesses[widx]
        p_out = np.zeros((w.m_last, d_out))
        for i, j in cols:
            p_out[j] += W[i]
        subnets.append(Subnet(w, p_out, tuple(cols)))
    return ParallelSnn(subnets, d_out, readout, meta)


@dataclass
class ReconstructionReport:
    max_deviation: float
    column_match: list
    mismatched_columns: list
    support_size: int
    n_rows: int

    @property
    def support_within_bound(self) -> bool:
        return self.support_size <= self.n_rows + 1

    @property
    def passed(self) -> bool:
        return self.max_deviation <= 1e-9 and not self.mismatched_columns

    def to_dict(self) -> dict:
        return {
            "max_deviation": self.max_deviation,
            "mismatched_columns": self.mismatched_columns,
            "support_size": self.support_size,
            "support_within_bound": self.support_within_bound,
            "passed": self.passed,
        }


def verify_reconstruction(snn: ParallelSnn, dictionary, solution, inputs) -> ReconstructionReport:
    """Compare ``forward(X)`` with ``D w`` and re-check every carried column."""
    W = np.asarray(getattr(solution, "w_tilde", solution), dtype=np.float64)
    if W.ndim == 1:
        W = W.reshape(-1, 1)
    seq = as_sequence(inputs)
    T, n, _ = seq.shape
    D = dictionary.dense()
    target = D @ W
    out = snn.forward(seq)
    dev = float(np.max(np.abs(out - target))) if out.size else 0.0
    matches, bad = [], []
    for s in snn.subnets:
        S = lif_rollout(s.witness, seq).spikes[-1]
        ok = True
        for i, j in s.columns:
            col = S[:, :, j].reshape(-1) if dictionary.kind == "trajectory" else S[-1, :, j]
            if not np.array_equal(col, D[:, i] > 0.5):
                ok = False
                bad.append(i)
        matches.append(ok)
    support = int(np.count_nonzero(np.any(W != 0.0, axis=1)))
    return ReconstructionReport(dev, matches, sorted(bad), support, D.shape[0])


# -- checkpoint JSON ---------------------------------------------------------


def snn_to_json(snn: ParallelSnn) -> dict:
    table, index = [], {}
    refs = []
    for s in snn.subnets:
        key = id(s.witness)
        if key not in index:
            for k, w in enumerate(table):
                if w.equals(s.witness):
                    index[key] = k
                    break
            else:
                index[key] = len(table)
                table.append(s.witness)
        rows = np.flatnonzero(np.any(s.p_out != 0.0, axis=1))
        refs.append({
            "witness": index[key],
            "m": int(s.p_out.shape[0]),
            "p_out_rows": [[int(r), s.p_out[r].tolist()] for r in rows],
            "columns": [list(c) for c in s.columns],
        })
    first = table[0] if table else None
    return {
        "format_version": FORMAT_VERSION,
        "arch": {"input_dim": first.input_dim, "widths": list(first.widths)} if first else None,
        "d_out": snn.d_out,
        "readout_rule": snn.readout_rule,
        "meta": snn.meta,
        "witnesses": [witness_to_json(w) for w in table],
        "subnets": refs,
    }


def snn_from_json(doc: dict) -> ParallelSnn:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported checkpoint format")
    table = [witness_from_json(w) for w in doc["witnesses"]]
    subnets = []
    for ref in doc["subnets"]:
        p_out = np.zeros((ref["m"], doc["d_out"]))
        for r, vals in ref["p_out_rows"]:
            p_out[r] = vals
        subnets.append(Subnet(table[ref["witness"]], p_out, tuple(tuple(c) for c in ref["columns"])))
    return ParallelSnn(subnets, doc["d_out"], doc["readout_rule"], doc.get("meta", {}))


def save_snn(snn: ParallelSnn, path) -> None:
    Path(path).write_text(json.dumps(snn_to_json(snn)))


def load_snn(path) -> ParallelSnn:
    return snn_from_json(json.loads(Path(path).read_text()))
