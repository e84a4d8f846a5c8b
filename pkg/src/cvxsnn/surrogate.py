"""Surrogate-gradient BPTT for K-parallel LIF networks (numpy, hand-derived).

Forward spikes are exact thresholds; the backward pass replaces the step
derivative with ``k * s(kU) * (1 - s(kU))``.  With ``smooth=True`` the
forward also uses ``s(kU)``, which makes the returned gradient the true
gradient of a differentiable network (useful for finite-difference checks).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .lif import LifLayerParams, LifWitness, as_sequence
from .losses import LossSpec
from .reconstruct import ParallelSnn, Subnet
from .witness import LifArch, array_from_json, array_to_json, gaussian_witness

LEAK_MAX = 1.0 - 1e-6
HIDDEN_KEYS = ("p_in", "leak", "u_thr", "u_init")


@dataclass(frozen=True)
class SurrogateConfig:
    slope: float = 25.0
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    reg: float = 0.0
    detach_reset: bool = False
    train_p_in: bool = True
    train_leak: bool = False
    train_thr: bool = False
    train_u_init: bool = False
    train_p_out: bool = True

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError("surrogate slope must be positive")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid optimizer settings")

    def trainable(self, key: str) -> bool:
        return {"p_in": self.train_p_in, "leak": self.train_leak, "u_thr": self.train_thr,
                "u_init": self.train_u_init, "p_out": self.train_p_out}[key]


def surrogate_derivative(U, slope: float) -> np.ndarray:
    s = expit(slope * np.asarray(U, dtype=np.float64))
    return slope * s * (1.0 - s)


class TrainableSnn:
    """Mutable K-parallel LIF network.

    ``subnets[k]`` is ``{"layers": [{"p_in", "leak", "u_thr", "u_init"}, ...],
    "p_out": (m_last, d_out)}``.
    """

    def __init__(self, subnets, d_out: int, readout_rule: str = "final_time", T=None):
        self.subnets = subnets
        self.d_out = int(d_out)
        self.readout_rule = readout_rule
        self.T = T

    # -- construction --------------------------------------------------------

    @classmethod
    def from_arch(cls, arch: LifArch, K: int, d_out: int, seed: int, leak_mode: str = "fixed:0.9",
                  thr_mode: str = "fixed:1.0", readout_rule: str = "final_time") -> "TrainableSnn":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
        subnets = []
        for k in range(K):
            w = gaussian_witness(arch, seed, k, leak_mode, thr_mode)
            p_out = rng.normal(0.0, 1.0 / math.sqrt(arch.m_last), size=(arch.m_last, d_out))
            subnets.append({"layers": _layers_from_witness(w), "p_out": p_out})
        return cls(subnets, d_out, readout_rule, arch.T)

    @classmethod
    def from_parallel(cls, snn: ParallelSnn) -> "TrainableSnn":
        subnets = [{"layers": _layers_from_witness(s.witness), "p_out": np.array(s.p_out, dtype=np.float64)}
                   for s in snn.subnets]
        return cls(subnets, snn.d_out, snn.readout_rule, snn.T)

    def copy(self) -> "TrainableSnn":
        return copy.deepcopy(self)

    @property
    def K(self) -> int:
        return len(self.subnets)

    def hidden_witnesses(self) -> list:
        return [LifWitness(tuple(LifLayerParams(l["p_in"], l["leak"], l["u_thr"], l["u_init"])
                                 for l in s["layers"])) for s in self.subnets]

    def to_parallel(self) -> ParallelSnn:
        subs = [Subnet(w, s["p_out"]) for w, s in zip(self.hidden_witnesses(), self.subnets)]
        return ParallelSnn(subs, self.d_out, self.readout_rule, {"T": self.T})

    def params(self):
        """Yield ``(path, array)`` for every parameter array (views, mutable)."""
        for k, s in enumerate(self.subnets):
            for l, layer in enumerate(s["layers"]):
                for key in HIDDEN_KEYS:
                    yield (k, l, key), layer[key]
            yield (k, None, "p_out"), s["p_out"]

    def forward(self, inputs) -> np.ndarray:
        return self.to_parallel().forward(inputs)

    def begin(self, n):
        self._frozen = self.to_parallel()
        return self._frozen.begin(n)

    def step(self, state, x):
        return self._frozen.step(state, x)

    # -- persistence ---------------------------------------------------------

    def to_json(self, stage: str = "sg") -> dict:
        return {
            "format_version": 1,
            "stage": stage,
            "d_out": self.d_out,
            "readout_rule": self.readout_rule,
            "T": self.T,
            "subnets": [
                {"layers": [{k: array_to_json(v) for k, v in l.items()} for l in s["layers"]],
                 "p_out": array_to_json(s["p_out"])}
                for s in self.subnets
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainableSnn":
        subnets = [{"layers": [{k: array_from_json(v) for k, v in l.items()} for l in s["layers"]],
                    "p_out": array_from_json(s["p_out"])} for s in doc["subnets"]]
        return cls(subnets, doc["d_out"], doc["readout_rule"], doc.get("T"))


def _layers_from_witness(w: LifWitness) -> list:
    return [{"p_in": np.array(l.p_in), "leak": np.array(l.leak), "u_thr": np.array(l.u_thr),
             "u_init": np.array(l.u_init)} for l in w.layers]


# -- forward / backward --------------------------------------------------------


def _subnet_forward(layers, X, slope, smooth):
    T, n, _ = X.shape
    Us, Ss = [], []
    below = X
    for layer in layers:
        m = layer["p_in"].shape[1]
        U = np.empty((T, n, m))
        S = np.empty((T, n, m))
        u = np.tile(layer["u_init"], (n, 1))
        s = np.zeros((n, m))
        for t in range(T):
            u = below[t] @ layer["p_in"] + u * layer["leak"] - s * layer["u_thr"]
            s = expit(slope * u) if smooth else (u >= 0.0).astype(np.float64)
            U[t], S[t] = u, s
        Us.append(U)
        Ss.append(S)
        below = S
    return Us, Ss


def surrogate_forward_backward(snn: TrainableSnn, inputs, Y, loss: LossSpec, config: SurrogateConfig = None,
                               smooth: bool = False, timestep_weights=None):
    """Loss and gradients for every parameter of ``snn``.

    The loss is ``loss.value(Z, Y)`` on the network output ``Z`` (row
    weights of ``loss`` apply; ``timestep_weights`` multiply them per
    t-major block).  Returns ``(loss, grads)`` with ``grads`` keyed like
    :meth:`TrainableSnn.params`.
    """
    config = config or SurrogateConfig()
    k_s = config.slope
    X = as_sequence(inputs)
    T, n, _ = X.shape
    Y = np.asarray(Y, dtype=np.float64)
    per_t = snn.readout_rule == "per_timestep"
    rows = T * n if per_t else n
    r = loss.weights(rows).copy()
    if timestep_weights is not None:
        r = r * np.repeat(np.asarray(timestep_weights, dtype=np.float64), rows // len(timestep_weights))
    spec = loss.with_weights(r)

    cache = []
    Z = np.zeros((rows, snn.d_out))
    for s in snn.subnets:
        Us, Ss = _subnet_forward(s["layers"], X, k_s, smooth)
        cache.append((Us, Ss))
        last = Ss[-1]
        Z += (last.reshape(T * n, -1) if per_t else last[-1]) @ s["p_out"]
    value = spec.value(Z, Y)
    if not math.isfinite(value):
        raise FloatingPointError("gradient overflow")
    G = spec.gradient(Z, Y)
    Gt = G.reshape(T, n, -1) if per_t else None

    grads = {}
    for k, (s, (Us, Ss)) in enumerate(zip(snn.subnets, cache)):
        layers = s["layers"]
        L = len(layers)
        last = Ss[-1]
        if per_t:
            grads[(k, None, "p_out")] = last.reshape(T * n, -1).T @ G
        else:
            grads[(k, None, "p_out")] = last[-1].T @ G
        g = {(l, key): np.zeros_like(layers[l][key]) for l in range(L) for key in HIDDEN_KEYS}
        gU_next = [np.zeros((n, layers[l]["p_in"].shape[1])) for l in range(L)]
        for t in range(T - 1, -1, -1):
            gU_above = None
            for l in range(L - 1, -1, -1):
                lay = layers[l]
                gS = np.zeros((n, lay["p_in"].shape[1]))
                if l == L - 1:
                    if per_t:
                        gS += Gt[t] @ s["p_out"].T
                    elif t == T - 1:
                        gS += G @ s["p_out"].T
                else:
                    gS += gU_above @ layers[l + 1]["p_in"].T
                if not config.detach_reset:
                    gS -= gU_next[l] * lay["u_thr"]
                if smooth:
                    sv = Ss[l][t]
                    dS = k_s * sv * (1.0 - sv)
                else:
                    dS = surrogate_derivative(Us[l][t], k_s)
                gU = gS * dS + gU_next[l] * lay["leak"]
                below = X[t] if l == 0 else Ss[l - 1][t]
                g[(l, "p_in")] += below.T @ gU
                U_prev = Us[l][t - 1] if t > 0 else np.broadcast_to(lay["u_init"], (n, gU.shape[1]))
                g[(l, "leak")] += np.sum(gU * U_prev, axis=0)
                if t > 0:
                    g[(l, "u_thr")] -= np.sum(gU * Ss[l][t - 1], axis=0)
                else:
                    g[(l, "u_init")] += np.sum(gU * lay["leak"], axis=0)
                gU_next[l] = gU
                gU_above = gU
        for (l, key), v in g.items():
            grads[(k, l, key)] = v
    for v in grads.values():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("gradient overflow")
    return value, grads


def smoothed_loss(snn: TrainableSnn, inputs, Y, loss: LossSpec, slope: float, timestep_weights=None) -> float:
    """Loss of the smoothed network, the function checked by finite differences."""
    cfg = SurrogateConfig(slope=slope)
    X = as_sequence(inputs)
    T, n, _ = X.shape
    per_t = snn.readout_rule == "per_timestep"
    rows = T * n if per_t else n
    r = loss.weights(rows).copy()
    if timestep_weights is not None:
        r = r * np.repeat(np.asarray(timestep_weights, dtype=np.float64), rows // len(timestep_weights))
    Z = np.zeros((rows, snn.d_out))
    for s in snn.subnets:
        _, Ss = _subnet_forward(s["layers"], X, cfg.slope, True)
        last = Ss[-1]
        Z += (last.reshape(T * n, -1) if per_t else last[-1]) @ s["p_out"]
    return loss.with_weights(r).value(Z, np.asarray(Y, dtype=np.float64))


# -- optimizer / training loop -----------------------------------------------


class Adam:
    """Adam with decoupled weight decay ``reg``."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, reg=0.0):
        self.lr, self.b1, self.b2, self.eps, self.reg = lr, betas[0], betas[1], eps, reg
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for key, g in grads.items():
            p = params[key]
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.reg:
                p -= self.lr * self.reg * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batch_rows(idx, n, T, per_t):
    return (np.arange(T)[:, None] * n + idx[None, :]).reshape(-1) if per_t else idx


def dataset_loss(snn: TrainableSnn, dataset) -> float:
    """Training objective of ``snn`` on the whole dataset (mean over samples)."""
    Z = snn.forward(dataset.inputs)
    spec = dataset.loss_spec(reduction="mean")
    return spec.value(Z, dataset.Y)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    diverged: bool = False

    def to_rows(self) -> list:
        return [dict(e) for e in self.epochs]


def train_sg(config: SurrogateConfig, dataset, init: TrainableSnn, val=None, score=None):
    """Minibatch Adam over surrogate gradients; returns ``(best snn, log)``.

    ``dataset`` must expose ``inputs`` (T, n, d), ``Y``, ``loss_spec(reduction)``
    and ``timestep_weights``.  The best checkpoint is chosen by
    ``score(snn, val)`` (higher is better) when ``val`` is given, else by
    training loss.  Training aborts on overflow and keeps the last finite
    checkpoint.
    """
    snn = init.copy()
    X = dataset.inputs
    T, n, _ = X.shape
    per_t = snn.readout_rule == "per_timestep"
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 104729]))
    opt = Adam(config.lr, config.betas, config.eps, config.reg)
    params = dict(snn.params())
    trainable = {key for key in params if config.trainable(key[2])}
    log = TrainLog()

    def evaluate(epoch):
        loss = dataset_loss(snn, dataset)
        entry = {"epoch": epoch, "train_loss": loss}
        if val is not None and score is not None:
            entry["val_score"] = float(score(snn, val))
            key = entry["val_score"]
        else:
            key = -loss
        log.epochs.append(entry)
        return key

    best_key = evaluate(0)
    best = snn.copy()
    spec_full = dataset.loss_spec(reduction="sum")
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        try:
            for a in range(0, n, config.batch_size):
                idx = np.sort(order[a:a + config.batch_size])
                rows = _batch_rows(idx, n, T, per_t)
                spec = spec_full.with_weights(spec_full.weights(dataset.Y.shape[0])[rows] / idx.size)
                _, grads = surrogate_forward_backward(snn, X[:, idx], dataset.Y[rows], spec, config)
                opt.step(params, {k: v for k, v in grads.items() if k in trainable})
                for s in snn.subnets:
                    for layer in s["layers"]:
                        np.clip(layer["leak"], 0.0, LEAK_MAX, out=layer["leak"])
            key = evaluate(epoch)
        except FloatingPointError:
            log.diverged = True
            break
        if not math.isfinite(log.epochs[-1]["train_loss"]):
            log.diverged = True
            break
        if key > best_key:
            best_key, best = key, snn.copy()
            log.best_epoch = epoch
    return best, log


def save_trainable(snn: TrainableSnn, path, stage: str = "sg") -> None:
    Path(path).write_text(json.dumps(snn.to_json(stage)))


def load_trainable(path) -> TrainableSnn:
    return TrainableSnn.from_json(json.loads(Path(path).read_text()))


def config_dict(cfg: SurrogateConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
