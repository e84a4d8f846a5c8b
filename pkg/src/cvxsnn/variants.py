"""The five training pipelines: SG, CVX, SG-CVX, SG-SG and CVX-SG."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dictionary import build_sampled_dictionary, build_trajectory_dictionary
from .metrics import selection_score
from .reconstruct import ParallelSnn, reconstruct
from .solver import ConvexProblem, ConvexSolution, solve
from .surrogate import SurrogateConfig, TrainableSnn, train_sg
from .witness import LifArch, WitnessStore, extract_pretrained_witnesses, sample_gaussian_witnesses

VARIANTS = ("sg", "cvx", "sg-cvx", "sg-sg", "cvx-sg")


@dataclass(frozen=True)
class VariantConfig:
    arch: LifArch
    K: int = 2
    M: int = 64
    seed: int = 0
    leak_mode: str = "fixed:0.9"
    thr_mode: str = "fixed:1.0"
    reg_beta: float = 0.1
    tol: float = 1e-6
    max_iter: int = 50000
    penalty: str = "group"
    rule: str = "masked"
    sg: SurrogateConfig = field(default_factory=SurrogateConfig)
    finetune_epochs: int = 100
    select_metric: str = "tf_joint_token"


@dataclass
class VariantResult:
    variant: str
    model: object
    solution: ConvexSolution = None
    dictionary: object = None
    logs: dict = field(default_factory=dict)
    wall_time: float = 0.0


def _build_dictionary(store: WitnessStore, ds):
    if ds.readout_rule == "per_timestep":
        return build_trajectory_dictionary(store, ds.inputs)
    return build_sampled_dictionary(store, ds.inputs)


def convex_stage(store: WitnessStore, ds, cfg: VariantConfig, merge: bool = False):
    """Freeze ``store``, build the dictionary, solve and reconstruct."""
    dictionary = _build_dictionary(store, ds)
    problem = ConvexProblem(dictionary, ds.Y, cfg.reg_beta, store.arch.m_last, ds.loss_spec("mean"),
                            penalty=cfg.penalty)
    sol = solve(problem, tol=cfg.tol, max_iter=cfg.max_iter)
    snn = reconstruct(dictionary, sol, rule=cfg.rule, merge=merge)
    return snn, sol, dictionary, problem


def _score(cfg):
    return lambda model, ds: selection_score(model, ds, cfg.select_metric)


def run_variant(variant: str, cfg: VariantConfig, data: dict, prior: VariantResult | None = None) -> VariantResult:
    """Run one pipeline on ``data`` (keys ``train``, ``val``, optional ``finetune``/``finetune_val``).

    ``sg-cvx`` and ``sg-sg`` need ``prior`` from an ``sg`` run; ``cvx-sg``
    needs ``prior`` from a ``cvx`` run.
    """
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    train, val = data["train"], data.get("val")
    ft, ft_val = data.get("finetune", train), data.get("finetune_val", val)
    t0 = time.perf_counter()
    arch = LifArch(cfg.arch.input_dim, cfg.arch.widths, train.T)

    if variant in ("sg-cvx", "sg-sg") and (prior is None or prior.variant != "sg"):
        raise ValueError("missing prerequisite checkpoint: run sg first")
    if variant == "cvx-sg" and (prior is None or prior.variant != "cvx"):
        raise ValueError("missing prerequisite checkpoint: run cvx first")

    if variant == "sg":
        init = TrainableSnn.from_arch(arch, cfg.K, train.d_out, cfg.seed, cfg.leak_mode, cfg.thr_mode,
                                      train.readout_rule)
        model, log = train_sg(replace(cfg.sg, seed=cfg.seed), train, init, val, _score(cfg))
        res = VariantResult(variant, model, logs={"sg": log})
    elif variant == "cvx":
        store = sample_gaussian_witnesses(arch, cfg.M, cfg.seed, cfg.leak_mode, cfg.thr_mode)
        snn, sol, dic, _ = convex_stage(store, train, cfg, merge=True)
        res = VariantResult(variant, snn, sol, dic)
    elif variant == "sg-cvx":
        store = extract_pretrained_witnesses(prior.model, arch, "sg")
        snn, sol, dic, _ = convex_stage(store, ft, cfg, merge=True)
        res = VariantResult(variant, snn, sol, dic)
    elif variant == "sg-sg":
        sg_cfg = replace(cfg.sg, epochs=cfg.finetune_epochs, seed=cfg.seed + 1)
        model, log = train_sg(sg_cfg, ft, prior.model, ft_val, _score(cfg))
        res = VariantResult(variant, model, logs={"sg": log})
    else:
        init = TrainableSnn.from_parallel(prior.model)
        if init.K == 0:
            init = TrainableSnn.from_arch(arch, 1, train.d_out, cfg.seed, cfg.leak_mode, cfg.thr_mode,
                                          train.readout_rule)
            for s in init.subnets:
                s["p_out"][:] = 0.0
        sg_cfg = replace(cfg.sg, epochs=cfg.finetune_epochs, seed=cfg.seed + 1)
        model, log = train_sg(sg_cfg, ft, init, ft_val, _score(cfg))
        res = VariantResult(variant, model, prior.solution, prior.dictionary, {"sg": log})
    res.wall_time = time.perf_counter() - t0
    return res


def as_parallel(model) -> ParallelSnn:
    return model.to_parallel() if isinstance(model, TrainableSnn) else model


def hidden_fingerprint(model) -> bytes:
    """Bytes of every hidden parameter, for freeze checks."""
    parts = []
    for w in model.hidden_witnesses():
        for l in w.layers:
            for a in (l.p_in, l.leak, l.u_thr, l.u_init):
                parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)
