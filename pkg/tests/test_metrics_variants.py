import numpy as np
import pytest

from cvxsnn.lif import lif_rollout
from cvxsnn.metrics import (
    MetricsRecord,
    eval_autoregressive,
    eval_teacher_forced,
    first_error_timesteps,
    rollout_addition,
)
from cvxsnn.surrogate import SurrogateConfig
from cvxsnn.tasks import gen_addition, xor_splits
from cvxsnn.variants import VariantConfig, as_parallel, hidden_fingerprint, run_variant
from cvxsnn.witness import LifArch


class Adder:
    """Reads the operands and carry input back out of the encoding."""

    def __init__(self, base, carry_ok=True):
        self.base, self.carry_ok = base, carry_ok

    def begin(self, n):
        return None

    def step(self, state, x):
        a = np.rint(x[:, 0] * (self.base - 1)).astype(int)
        b = np.rint(x[:, 1] * (self.base - 1)).astype(int)
        tot = a + b + np.rint(x[:, 2]).astype(int)
        y = np.zeros((x.shape[0], self.base + 2))
        y[np.arange(len(tot)), tot % self.base] = 1.0
        carry = tot // self.base if self.carry_ok else np.zeros_like(tot)
        y[np.arange(len(tot)), self.base + carry] = 1.0
        return state, y


@pytest.mark.parametrize("base", [2, 3, 5])
def test_perfect_model(base):
    ds = gen_addition(base, 6, 300, 0)
    tf, ar = eval_teacher_forced(Adder(base), ds), eval_autoregressive(Adder(base), ds)
    assert tf.joint_token_acc == ar.joint_token_acc == 1.0
    assert tf.seq_acc == ar.seq_acc == 1.0


def test_carry_blind_model_first_error():
    ds = gen_addition(2, 8, 400, 1)
    sums, carries = rollout_addition(Adder(2, carry_ok=False), ds, "tf")
    first = first_error_timesteps(sums, carries, ds)
    cout = ds.extras["carry_out"]
    expected = np.where(cout.any(axis=1), np.argmax(cout, axis=1) + 1, ds.T + 1)
    np.testing.assert_array_equal(first, expected)


def test_rollout_feeds_back_predictions():
    # a carry-blind model is wrong in both modes, but AR also corrupts the sums
    ds = gen_addition(2, 8, 400, 2)
    tf = eval_teacher_forced(Adder(2, carry_ok=False), ds)
    ar = eval_autoregressive(Adder(2, carry_ok=False), ds)
    assert tf.sum_acc == 1.0
    assert ar.sum_acc < 1.0


def test_ar_requires_carry_task():
    ds = xor_splits(3, 0, 8, 8, 8)["train"]
    with pytest.raises(ValueError, match="autoregressive mode requires carry task"):
        eval_autoregressive(Adder(2), ds)


def test_record_range():
    with pytest.raises(ValueError, match="must lie in"):
        MetricsRecord(seq_acc=1.5)


@pytest.fixture(scope="module")
def xor_runs():
    data = xor_splits(4, 0, 64, 32, 32)
    cfg = VariantConfig(LifArch(1, (8,), 4), K=2, M=4, thr_mode="halfnormal", reg_beta=0.01, tol=1e-5,
                        sg=SurrogateConfig(lr=1e-2, epochs=3, batch_size=32), finetune_epochs=0)
    sg = run_variant("sg", cfg, data)
    return cfg, data, sg


def test_sg_cvx_freezes_hidden(xor_runs):
    cfg, data, sg = xor_runs
    res = run_variant("sg-cvx", cfg, data, sg)
    X = data["train"].inputs
    snn = as_parallel(res.model)
    ref = {s.witness.layers[0].p_in.tobytes(): s.witness for s in as_parallel(sg.model).subnets}
    for s in snn.subnets:
        src = ref[s.witness.layers[0].p_in.tobytes()]
        np.testing.assert_array_equal(lif_rollout(s.witness, X).spikes[-1], lif_rollout(src, X).spikes[-1])


def test_sg_sg_zero_epochs_is_identity(xor_runs):
    cfg, data, sg = xor_runs
    res = run_variant("sg-sg", cfg, data, sg)
    assert hidden_fingerprint(res.model) == hidden_fingerprint(sg.model)
    for (_, a), (_, b) in zip(res.model.params(), sg.model.params()):
        np.testing.assert_array_equal(a, b)


def test_cvx_sg_starts_from_reconstruction(xor_runs):
    cfg, data, _ = xor_runs
    cvx = run_variant("cvx", cfg, data)
    res = run_variant("cvx-sg", cfg, data, cvx)
    np.testing.assert_allclose(res.model.forward(data["train"].inputs), cvx.model.forward(data["train"].inputs))


@pytest.mark.parametrize("variant,msg", [("sg-cvx", "run sg first"), ("sg-sg", "run sg first"),
                                         ("cvx-sg", "run cvx first")])
def test_missing_prerequisite(xor_runs, variant, msg):
    cfg, data, _ = xor_runs
    with pytest.raises(ValueError, match=f"missing prerequisite checkpoint: {msg}"):
        run_variant(variant, cfg, data)
