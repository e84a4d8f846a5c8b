"""Path regularizers on weighted DAGs and the incoming-norm normalization.

A :class:`PathDag` stores one node table and one edge table.  Source nodes
are either ``"input"`` nodes (fed by data) or ``"state"`` nodes (initial
recurrent states with a constant value); both carry unit path mass.
Hidden nodes apply either the threshold step or the identity (LIF membrane
nodes); output nodes are linear.

For parallel networks every hidden node carries a ``subnet`` label and the
regularizer is the sum of per-subnetwork path norms.
"""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .lif import LifLayerParams, LifWitness, lif_rescale

SOURCE_ROLES = ("input", "state")


@dataclass(frozen=True, eq=False)
class PathDag:
    """Weighted DAG with per-edge tie groups and LIF edge labels.

    Node arrays: ``role`` (input/state/hidden/output), ``activation``
    (threshold/linear, hidden nodes only), ``subnet``, ``layer`` and
    ``const`` (value of state nodes).  Edge arrays: ``src``, ``dst``,
    ``weight``, ``tie`` (-1 for untied), ``scale_bearing`` and ``trainable``.
    """

    role: tuple
    activation: tuple
    subnet: np.ndarray
    layer: np.ndarray
    const: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    tie: np.ndarray
    scale_bearing: np.ndarray
    trainable: np.ndarray
    p: float = 2.0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        self.order()  # validates acyclicity
        tie = np.asarray(self.tie)
        for g in np.unique(tie[tie >= 0]):
            w = self.weight[tie == g]
            if not np.all(w == w[0]):
                raise ValueError(f"tie group {g} has unequal weights")

    @property
    def n_nodes(self) -> int:
        return len(self.role)

    def nodes_with_role(self, role: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.role) if r == role], dtype=int)

    def order(self) -> list:
        ts = graphlib.TopologicalSorter({v: () for v in range(self.n_nodes)})
        for u, v in zip(self.src.tolist(), self.dst.tolist()):
            ts.add(v, u)
        try:
            return list(ts.static_order())
        except graphlib.CycleError as exc:
            raise ValueError("not a DAG") from exc

    def incoming(self) -> list:
        inc = [[] for _ in range(self.n_nodes)]
        for e, v in enumerate(self.dst.tolist()):
            inc[v].append(e)
        return inc

    def with_weights(self, weight: np.ndarray) -> "PathDag":
        return replace(self, weight=np.asarray(weight, dtype=np.float64))


@dataclass(frozen=True)
class PathNormValue:
    value: float
    p: float


class _DagBuilder:
    def __init__(self, p: float = 2.0):
        self.p = p
        self.role, self.activation, self.subnet, self.layer, self.const = [], [], [], [], []
        self.edges = []
        self._ties = {}

    def node(self, role, activation="linear", subnet=-1, layer=0, const=0.0) -> int:
        self.role.append(role)
        self.activation.append(activation)
        self.subnet.append(subnet)
        self.layer.append(layer)
        self.const.append(const)
        return len(self.role) - 1

    def edge(self, u, v, w, tie_key=None, scale_bearing=True, trainable=True):
        tie = -1
        if tie_key is not None:
            tie = self._ties.setdefault(tie_key, len(self._ties))
        self.edges.append((u, v, float(w), tie, bool(scale_bearing), bool(trainable)))

    def build(self) -> PathDag:
        e = list(zip(*self.edges)) if self.edges else [[]] * 6
        return PathDag(
            role=tuple(self.role),
            activation=tuple(self.activation),
            subnet=np.array(self.subnet, dtype=int),
            layer=np.array(self.layer, dtype=int),
            const=np.array(self.const, dtype=np.float64),
            src=np.array(e[0], dtype=int),
            dst=np.array(e[1], dtype=int),
            weight=np.array(e[2], dtype=np.float64),
            tie=np.array(e[3], dtype=int),
            scale_bearing=np.array(e[4], dtype=bool),
            trainable=np.array(e[5], dtype=bool),
            p=self.p,
        )


# -- builders ----------------------------------------------------------------


def feedforward_dag(subnets: Sequence[Sequence[np.ndarray]], p: float = 2.0) -> PathDag:
    """K-parallel fully connected threshold network.

    ``subnets[k]`` is the list ``[W_1, ..., W_L]`` of subnetwork ``k``; all
    subnetworks share the input and output nodes.
    """
    b = _DagBuilder(p)
    d = np.asarray(subnets[0][0]).shape[0]
    d_out = np.asarray(subnets[0][-1]).shape[1]
    inputs = [b.node("input") for _ in range(d)]
    outputs = [b.node("output", layer=-1) for _ in range(d_out)]
    for k, weights in enumerate(subnets):
        below = inputs
        for l, W in enumerate(weights):
            W = np.asarray(W, dtype=np.float64)
            if W.shape[0] != len(below):
                raise ValueError(f"shape mismatch at layer {l + 1}")
            if l == len(weights) - 1:
                targets = outputs
            else:
                targets = [b.node("hidden", "threshold", k, l + 1) for _ in range(W.shape[1])]
            for i, u in enumerate(below):
                for j, v in enumerate(targets):
                    b.edge(u, v, W[i, j])
            below = targets
    return b.build()


def recurrent_dag(subnets, p_outs, T: int, p: float = 2.0) -> PathDag:
    """Unrolled K-parallel threshold RNN.

    ``subnets[k]`` is a :class:`~cvxsnn.lif.ThresholdRnnParams`.  Every
    copy of a recurrent or feedforward weight lands in one tie group, and
    the zero initial states ``H_l^0`` are state nodes.
    """
    b = _DagBuilder(p)
    d = subnets[0].p_in[0].shape[0]
    d_out = np.asarray(p_outs[0]).shape[1]
    inputs = [[b.node("input", layer=0) for _ in range(d)] for _ in range(T)]
    outputs = [b.node("output", layer=-1) for _ in range(d_out)]
    for k, params in enumerate(subnets):
        prev_time = [[b.node("state", subnet=k, layer=l + 1) for _ in range(m)]
                     for l, m in enumerate(params.widths)]
        for t in range(T):
            below = inputs[t]
            current = []
            for l, (A, R) in enumerate(zip(params.p_in, params.p_rec)):
                units = [b.node("hidden", "threshold", k, l + 1) for _ in range(A.shape[1])]
                for i, u in enumerate(below):
                    for j, v in enumerate(units):
                        b.edge(u, v, A[i, j], tie_key=(k, l, "in", i, j))
                for i, u in enumerate(prev_time[l]):
                    for j, v in enumerate(units):
                        b.edge(u, v, R[i, j], tie_key=(k, l, "rec", i, j))
                current.append(units)
                below = units
            prev_time = current
        P = np.asarray(p_outs[k], dtype=np.float64)
        for i, u in enumerate(prev_time[-1]):
            for o, v in enumerate(outputs):
                b.edge(u, v, P[i, o])
    return b.build()


def lif_dag(witnesses: Sequence[LifWitness], p_outs, T: int, trainable_threshold: bool = True,
            p: float = 2.0) -> PathDag:
    """Typed unrolled LIF DAG with membrane (linear) and spike (threshold) nodes.

    Input-to-membrane edges are scale-bearing, reset edges are scale-bearing
    only when the threshold is trainable, leak and membrane-to-spike edges
    are structural.
    """
    b = _DagBuilder(p)
    d = witnesses[0].input_dim
    d_out = np.asarray(p_outs[0]).shape[1]
    inputs = [[b.node("input", layer=0) for _ in range(d)] for _ in range(T)]
    outputs = [b.node("output", layer=-1) for _ in range(d_out)]
    for k, wit in enumerate(witnesses):
        prev_u, prev_s = [], []
        for l, layer in enumerate(wit.layers):
            prev_u.append([b.node("state", subnet=k, layer=l + 1, const=c) for c in layer.u_init])
            prev_s.append([b.node("state", subnet=k, layer=l + 1) for _ in range(layer.width)])
        for t in range(T):
            below = inputs[t]
            for l, layer in enumerate(wit.layers):
                us = [b.node("hidden", "linear", k, l + 1) for _ in range(layer.width)]
                ss = [b.node("hidden", "threshold", k, l + 1) for _ in range(layer.width)]
                for i, u in enumerate(below):
                    for j, v in enumerate(us):
                        b.edge(u, v, layer.p_in[i, j], tie_key=(k, l, "in", i, j))
                for j in range(layer.width):
                    b.edge(prev_u[l][j], us[j], layer.leak[j], tie_key=(k, l, "leak", j),
                           scale_bearing=False, trainable=False)
                    b.edge(prev_s[l][j], us[j], -layer.u_thr[j], tie_key=(k, l, "reset", j),
                           scale_bearing=trainable_threshold, trainable=trainable_threshold)
                    b.edge(us[j], ss[j], 1.0, tie_key=("unit",), scale_bearing=False,
                           trainable=False)
                prev_u[l], prev_s[l] = us, ss
                below = ss
        P = np.asarray(p_outs[k], dtype=np.float64)
        for i, u in enumerate(prev_s[-1]):
            for o, v in enumerate(outputs):
                b.edge(u, v, P[i, o])
    return b.build()


def random_dag(rng: np.random.Generator, depth: int, width: int, p: float = 2.0,
               n_subnets: int = 1, skip_prob: float = 0.0, d_out: int = 1) -> PathDag:
    """Random K-parallel layered threshold DAG, optionally with skip edges."""
    b = _DagBuilder(p)
    d = int(rng.integers(1, width + 1))
    inputs = [b.node("input") for _ in range(d)]
    outputs = [b.node("output", layer=-1) for _ in range(d_out)]
    for k in range(n_subnets):
        earlier = list(inputs)
        below = inputs
        for l in range(depth - 1):
            units = [b.node("hidden", "threshold", k, l + 1)
                     for _ in range(int(rng.integers(1, width + 1)))]
            for v in units:
                for u in below:
                    b.edge(u, v, rng.normal() * rng.choice([0.3, 1.0, 3.0]))
                for u in earlier:
                    if u not in below and rng.random() < skip_prob:
                        b.edge(u, v, rng.normal())
            earlier += units
            below = units
        for u in below:
            for v in outputs:
                b.edge(u, v, rng.normal())
    return b.build()


# -- regularizers ------------------------------------------------------------


def _needs_log_domain(w: np.ndarray) -> bool:
    a = np.abs(w[w != 0.0])
    return bool(a.size and (a.max() > 1e3 or a.min() < 1e-3))


def _path_mass(dag: PathDag, lif: bool) -> float:
    p = dag.p
    inc = dag.incoming()
    w = dag.weight
    log_domain = _needs_log_domain(w)
    with np.errstate(divide="ignore"):
        logw = p * np.log(np.abs(w))
    order = dag.order()
    total = 0.0
    subnets = np.unique(dag.subnet[[i for i, r in enumerate(dag.role) if r == "hidden"]])
    if subnets.size == 0:
        subnets = np.array([-1])
    for k in subnets:
        mass = np.full(dag.n_nodes, -np.inf if log_domain else 0.0)
        for v in order:
            role = dag.role[v]
            if role in SOURCE_ROLES:
                mass[v] = 0.0 if log_domain else 1.0
                continue
            if role == "hidden" and dag.subnet[v] != k:
                continue
            edges = inc[v]
            if role == "output":
                edges = [e for e in edges if dag.role[dag.src[e]] in SOURCE_ROLES
                         or dag.subnet[dag.src[e]] == k]
            if lif:
                bearing = [e for e in edges if dag.scale_bearing[e]]
                if bearing:
                    terms = [(e, True) for e in bearing]
                else:
                    terms = [(e, False) for e in edges]
            else:
                terms = [(e, True) for e in edges]
            if log_domain:
                vals = [(logw[e] if use_w else 0.0) + mass[dag.src[e]] for e, use_w in terms]
                mass[v] = np.logaddexp.reduce(vals) if vals else -np.inf
            else:
                mass[v] = sum((abs(w[e]) ** p if use_w else 1.0) * mass[dag.src[e]]
                              for e, use_w in terms)
        outs = dag.nodes_with_role("output")
        if log_domain:
            lm = np.logaddexp.reduce(mass[outs]) if outs.size else -np.inf
            total += float(np.exp(lm / p))
        else:
            total += float(np.sum(mass[outs]) ** (1.0 / p))
    return total


def path_regularizer(dag: PathDag) -> PathNormValue:
    """``sum_k (sum_paths prod |w|^p)^(1/p)`` by dynamic programming."""
    return PathNormValue(_path_mass(dag, lif=False), dag.p)


def lif_path_regularizer(dag: PathDag) -> PathNormValue:
    """Path regularizer counting only scale-bearing edges.

    A node with scale-bearing incoming edges takes its path mass from those
    edges only, so leak edges add neither a factor nor extra paths.  Nodes
    fed solely by structural edges (membrane-to-spike) pass mass through
    with factor 1.
    """
    return PathNormValue(_path_mass(dag, lif=True), dag.p)


def outer_norm(dag: PathDag) -> float:
    """Sum over subnetworks of the l_p norm of output-layer weights."""
    total = 0.0
    into_out = np.array([dag.role[v] == "output" for v in dag.dst])
    hidden_src = np.array([dag.role[u] == "hidden" for u in dag.src])
    for k in np.unique(dag.subnet[dag.src[into_out & hidden_src]]):
        sel = into_out & hidden_src & (dag.subnet[dag.src] == k)
        total += float(np.sum(np.abs(dag.weight[sel]) ** dag.p) ** (1.0 / dag.p))
    return total


def normalize_incoming(dag: PathDag) -> PathDag:
    """Give every threshold hidden node unit incoming l_p^p mass.

    Output weights are left untouched: the threshold step is invariant to
    positive rescaling of its pre-activation, so the function is preserved.
    Time copies of a recurrent unit have identical tied incoming blocks and
    therefore receive the same scale.
    """
    p = dag.p
    w = dag.weight.copy()
    inc = dag.incoming()
    for v in range(dag.n_nodes):
        if dag.role[v] != "hidden" or dag.activation[v] != "threshold":
            continue
        edges = sorted(inc[v], key=lambda e: (dag.tie[e], abs(dag.weight[e]), dag.src[e]))
        mags = np.abs(dag.weight[edges]) ** p
        a = float(np.sum(mags)) ** (1.0 / p) if edges else 0.0
        if not a > 0.0:
            raise ValueError("degenerate hidden node")
        w[edges] = dag.weight[edges] / a
    tie = dag.tie
    for g in np.unique(tie[tie >= 0]):
        if not np.all(w[tie == g] == w[tie == g][0]):
            raise ValueError("tie group inconsistency after normalization")
    return dag.with_weights(w)


def dag_forward(dag: PathDag, X: np.ndarray) -> np.ndarray:
    """Evaluate the network on ``X`` (rows = samples, columns = input nodes)."""
    X = np.asarray(X, dtype=np.float64)
    inputs = dag.nodes_with_role("input")
    if X.shape[1] != inputs.size:
        raise ValueError("input width does not match the DAG")
    vals = np.zeros((X.shape[0], dag.n_nodes))
    vals[:, inputs] = X
    inc = dag.incoming()
    for v in dag.order():
        role = dag.role[v]
        if role == "input":
            continue
        if role == "state":
            vals[:, v] = dag.const[v]
            continue
        edges = inc[v]
        z = vals[:, dag.src[edges]] @ dag.weight[edges] if edges else np.zeros(X.shape[0])
        if role == "hidden" and dag.activation[v] == "threshold":
            z = (z >= 0.0).astype(np.float64)
        vals[:, v] = z
    return vals[:, dag.nodes_with_role("output")]


# -- LIF normalization -------------------------------------------------------


def lif_block_norms(layer: LifLayerParams, trainable_threshold: bool, p: float = 2.0) -> np.ndarray:
    mass = np.sum(np.abs(layer.p_in) ** p, axis=0)
    if trainable_threshold:
        mass = mass + np.abs(layer.u_thr) ** p
    return mass ** (1.0 / p)


def lif_normalize(witness: LifWitness, trainable_threshold: bool = True, p: float = 2.0) -> LifWitness:
    """Rescale every neuron so its scale-bearing incoming block has unit l_p norm."""
    scales = []
    for layer in witness.layers:
        a = lif_block_norms(layer, trainable_threshold, p)
        if np.any(~(a > 0.0)):
            raise ValueError("degenerate neuron")
        scales.append(1.0 / a)
    return lif_rescale(witness, scales)
