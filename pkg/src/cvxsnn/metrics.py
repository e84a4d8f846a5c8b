"""Evaluation: teacher-forced and autoregressive addition metrics, classification.

Models are driven through a small step protocol so any object providing
``begin(n) -> state`` and ``step(state, x) -> (state, y)`` can be scored;
``y`` is the ``(n, d_out)`` readout at that timestep.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

METRIC_FIELDS = (
    "task", "mode", "split", "n", "T", "token_acc", "sum_acc", "carry_acc", "joint_token_acc",
    "seq_acc", "first_error_mean", "error_free_frac", "accuracy", "primal", "dual", "gap",
    "wall_time", "seed",
)
SCHEMA_VERSION = 1


@dataclass
class MetricsRecord:
    task: str = ""
    mode: str = ""
    split: str = ""
    n: int = 0
    T: int = 0
    token_acc: float = math.nan
    sum_acc: float = math.nan
    carry_acc: float = math.nan
    joint_token_acc: float = math.nan
    seq_acc: float = math.nan
    first_error_mean: float = math.nan
    error_free_frac: float = math.nan
    accuracy: float = math.nan
    primal: float = math.nan
    dual: float = math.nan
    gap: float = math.nan
    wall_time: float = math.nan
    seed: int = -1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("token_acc", "sum_acc", "carry_acc", "joint_token_acc", "seq_acc", "accuracy",
                     "error_free_frac"):
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def row(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return d


def rollout_addition(model, ds, mode: str = "tf"):
    """Per-timestep sum and carry predictions, each ``(n, T)``.

    In ``"ar"`` mode the carry input at step ``t > 1`` is the model's own
    predicted carry from step ``t - 1`` (argmax); step 1 uses carry 0.
    """
    if ds.task != "addition":
        raise ValueError("autoregressive mode requires carry task")
    if mode not in ("tf", "ar"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    base = ds.meta["base"]
    X = ds.inputs
    T, n, _ = X.shape
    state = model.begin(n)
    sums = np.zeros((n, T), dtype=np.int64)
    carries = np.zeros((n, T), dtype=np.int64)
    prev = np.zeros(n, dtype=np.int64)
    for t in range(T):
        x = X[t].copy()
        if mode == "ar":
            x[:, 2] = prev if t > 0 else 0.0
        state, y = model.step(state, x)
        y = np.asarray(y)
        sums[:, t] = np.argmax(y[:, :base], axis=1)
        carries[:, t] = np.argmax(y[:, base:base + 2], axis=1)
        prev = carries[:, t]
    return sums, carries


def addition_metrics(sums, carries, ds, mode: str, split: str = "") -> MetricsRecord:
    ok_sum = sums == ds.extras["sum"]
    ok_carry = carries == ds.extras["carry_out"]
    joint = ok_sum & ok_carry
    n, T = joint.shape
    wrong = ~joint
    has_err = wrong.any(axis=1)
    first = np.argmax(wrong, axis=1) + 1
    return MetricsRecord(
        task="addition", mode=mode, split=split or ds.meta.get("split", ""), n=n, T=T,
        token_acc=float(joint.mean()),
        sum_acc=float(ok_sum.mean()),
        carry_acc=float(ok_carry.mean()),
        joint_token_acc=float(joint.mean()),
        seq_acc=float(joint.all(axis=1).mean()),
        first_error_mean=float(first[has_err].mean()) if has_err.any() else math.nan,
        error_free_frac=float((~has_err).mean()),
        seed=int(ds.meta.get("seed", -1)),
    )


def eval_teacher_forced(model, ds, split: str = "") -> MetricsRecord:
    return addition_metrics(*rollout_addition(model, ds, "tf"), ds, "tf", split)


def eval_autoregressive(model, ds, split: str = "") -> MetricsRecord:
    return addition_metrics(*rollout_addition(model, ds, "ar"), ds, "ar", split)


def first_error_timesteps(sums, carries, ds) -> np.ndarray:
    """1-based first wrong timestep per sample (``T + 1`` when none)."""
    wrong = ~((sums == ds.extras["sum"]) & (carries == ds.extras["carry_out"]))
    T = wrong.shape[1]
    return np.where(wrong.any(axis=1), np.argmax(wrong, axis=1) + 1, T + 1)


def predict_labels(model, ds) -> np.ndarray:
    """Class decisions for final-time tasks (argmax, or sign for one ±1 column)."""
    Z = np.asarray(model.forward(ds.inputs))
    if Z.shape[1] == 1:
        return (Z[:, 0] >= 0.0).astype(np.int64)
    return np.argmax(Z, axis=1)


def classification_accuracy(model, ds) -> float:
    return float(np.mean(predict_labels(model, ds) == ds.extras["labels"]))


def evaluate(model, ds, mode: str = "tf", split: str = "") -> MetricsRecord:
    if ds.task == "addition":
        return eval_teacher_forced(model, ds, split) if mode == "tf" else eval_autoregressive(model, ds, split)
    acc = classification_accuracy(model, ds)
    return MetricsRecord(task=ds.task, mode="final", split=split or ds.meta.get("split", ""), n=ds.n, T=ds.T,
                         accuracy=acc, token_acc=acc, seed=int(ds.meta.get("seed", -1)))


def selection_score(model, ds, metric: str = "tf_joint_token") -> float:
    """Validation score used for checkpoint and grid selection (higher is better)."""
    if ds.task != "addition":
        return classification_accuracy(model, ds)
    mode, _, name = metric.partition("_")
    rec = evaluate(model, ds, mode)
    return {"joint_token": rec.joint_token_acc, "seq": rec.seq_acc, "sum": rec.sum_acc}[name]
