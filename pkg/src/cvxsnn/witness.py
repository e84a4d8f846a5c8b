"""Frozen hidden LIF witnesses: Gaussian sampling, extraction, persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lif import LifLayerParams, LifWitness

FORMAT_VERSION = 1


@dataclass(frozen=True)
class LifArch:
    """Hidden architecture: input dim, hidden widths ``m_1 .. m_{L-1}``, horizon T."""

    input_dim: int
    widths: tuple
    T: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(m) for m in self.widths))
        if self.input_dim < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError("invalid architecture")

    @property
    def depth(self) -> int:
        """Number of layers L (hidden layers plus the readout)."""
        return len(self.widths) + 1

    @property
    def m_last(self) -> int:
        return self.widths[-1]

    def matches(self, witness: LifWitness) -> bool:
        return witness.input_dim == self.input_dim and witness.widths == self.widths

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "widths": list(self.widths), "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "LifArch":
        return cls(int(d["input_dim"]), tuple(d["widths"]), int(d.get("T", 1)))


@dataclass(frozen=True)
class WitnessStore:
    witnesses: tuple
    provenance: tuple
    arch: LifArch
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "witnesses", tuple(self.witnesses))
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if len(self.witnesses) != len(self.provenance):
            raise ValueError("one provenance tag per witness")
        for w in self.witnesses:
            if not self.arch.matches(w):
                raise ValueError("witness does not match the declared architecture")

    def __len__(self):
        return len(self.witnesses)

    def __getitem__(self, i) -> LifWitness:
        return self.witnesses[i]


def parse_leak_mode(mode: str):
    """``"fixed:0.9"`` or ``"uniform:lo,hi"``."""
    kind, _, arg = mode.partition(":")
    if kind == "fixed":
        v = float(arg or 0.9)
        if not 0.0 <= v < 1.0:
            raise ValueError("leak out of [0,1)")
        return ("fixed", v)
    if kind == "uniform":
        lo, hi = (float(x) for x in (arg or "0.0,0.95").split(","))
        if not (0.0 <= lo <= hi <= 1.0) or lo >= 1.0:
            raise ValueError("leak out of [0,1)")
        return ("uniform", lo, hi)
    raise ValueError(f"unknown leak mode {mode!r}")


def parse_thr_mode(mode: str):
    """``"fixed:1.0"`` or ``"halfnormal"`` (``|N(0, 1)|``)."""
    kind, _, arg = mode.partition(":")
    if kind == "fixed":
        return ("fixed", float(arg or 1.0))
    if kind == "halfnormal":
        return ("halfnormal",)
    raise ValueError(f"unknown threshold mode {mode!r}")


def _layer_rng(seed: int, index: int, layer: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(layer)]))


def gaussian_witness(arch: LifArch, seed: int, index: int, leak_mode: str = "fixed:0.9",
                     thr_mode: str = "fixed:1.0") -> LifWitness:
    """Witness ``index`` of the stream ``seed``; independent of other indices."""
    leak_spec = parse_leak_mode(leak_mode)
    thr_spec = parse_thr_mode(thr_mode)
    layers = []
    fan_in = arch.input_dim
    for l, m in enumerate(arch.widths):
        rng = _layer_rng(seed, index, l)
        p_in = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, m))
        if leak_spec[0] == "fixed":
            leak = np.full(m, leak_spec[1])
        else:
            leak = rng.uniform(leak_spec[1], leak_spec[2], size=m)
            leak = np.minimum(leak, np.nextafter(1.0, 0.0))
        if thr_spec[0] == "fixed":
            u_thr = np.full(m, thr_spec[1])
        else:
            u_thr = np.abs(rng.normal(size=m))
        layers.append(LifLayerParams(p_in, leak, u_thr, np.zeros(m)))
        fan_in = m
    return LifWitness(tuple(layers))


def sample_gaussian_witnesses(arch: LifArch, count: int, seed: int, leak_mode: str = "fixed:0.9",
                              thr_mode: str = "fixed:1.0") -> WitnessStore:
    """``count`` Gaussian witnesses; ``p_in ~ N(0, 1/fan_in)``, ``u_init = 0``."""
    if count < 1:
        raise ValueError("need at least one witness (M >= 1)")
    parse_leak_mode(leak_mode)
    parse_thr_mode(thr_mode)
    witnesses = [gaussian_witness(arch, seed, i, leak_mode, thr_mode) for i in range(count)]
    prov = [{"kind": "gaussian", "seed": int(seed), "index": i} for i in range(count)]
    return WitnessStore(witnesses, prov, arch,
                        {"leak_mode": leak_mode, "thr_mode": thr_mode, "seed": int(seed)})


def extract_pretrained_witnesses(checkpoint, arch: LifArch | None = None,
                                 checkpoint_id: str = "checkpoint") -> WitnessStore:
    """Copy the hidden layers of every subnetwork; output weights are dropped.

    ``checkpoint`` is anything exposing ``hidden_witnesses()`` (a
    :class:`~cvxsnn.reconstruct.ParallelSnn` or
    :class:`~cvxsnn.surrogate.TrainableSnn`) or a bare :class:`LifWitness`.
    """
    if isinstance(checkpoint, LifWitness):
        hidden = [checkpoint]
    else:
        hidden = list(checkpoint.hidden_witnesses())
    if not hidden:
        raise ValueError("incompatible checkpoint")
    first = hidden[0]
    if arch is None:
        arch = LifArch(first.input_dim, first.widths, getattr(checkpoint, "T", 1) or 1)
    for w in hidden:
        if not arch.matches(w):
            raise ValueError("incompatible checkpoint")
    copies = [
        LifWitness(tuple(LifLayerParams(l.p_in.copy(), l.leak.copy(), l.u_thr.copy(), l.u_init.copy())
                         for l in w.layers))
        for w in hidden
    ]
    prov = [{"kind": "pretrained", "checkpoint": checkpoint_id, "subnet": k} for k in range(len(copies))]
    return WitnessStore(copies, prov, arch, {"source": checkpoint_id})


# -- persistence -------------------------------------------------------------


def array_to_json(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def array_from_json(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def witness_to_json(w: LifWitness) -> dict:
    return {
        "layers": [
            {
                "p_in": array_to_json(l.p_in),
                "leak": l.leak.tolist(),
                "u_thr": l.u_thr.tolist(),
                "u_init": l.u_init.tolist(),
            }
            for l in w.layers
        ]
    }


def witness_from_json(d: dict) -> LifWitness:
    return LifWitness(tuple(
        LifLayerParams(array_from_json(l["p_in"]), np.asarray(l["leak"], dtype=np.float64),
                       np.asarray(l["u_thr"], dtype=np.float64),
                       np.asarray(l["u_init"], dtype=np.float64))
        for l in d["layers"]
    ))


def store_to_json(store: WitnessStore) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "arch": store.arch.to_dict(),
        "meta": store.meta,
        "witnesses": [
            {"provenance": prov, **witness_to_json(w)}
            for w, prov in zip(store.witnesses, store.provenance)
        ],
    }


def store_from_json(doc: dict) -> WitnessStore:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported witness store version {doc.get('format_version')}")
    arch = LifArch.from_dict(doc["arch"])
    witnesses = [witness_from_json(w) for w in doc["witnesses"]]
    prov = [w["provenance"] for w in doc["witnesses"]]
    return WitnessStore(witnesses, prov, arch, doc.get("meta", {}))


def save_store(store: WitnessStore, path) -> None:
    Path(path).write_text(json.dumps(store_to_json(store)))


def load_store(path) -> WitnessStore:
    return store_from_json(json.loads(Path(path).read_text()))
