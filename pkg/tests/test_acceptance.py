"""Acceptance gate.

Each test prints one ``[PASS]``/``[FAIL]`` line naming its criterion and the
measured quantity against its pinned threshold, then asserts.  Run alone
with ``pytest tests/test_acceptance.py -v``.  The addition criteria take
several minutes each on one core.
"""

import statistics
import time

import numpy as np
import pytest

from cvxsnn.dictionary import build_sampled_dictionary, build_trajectory_dictionary
from cvxsnn.lif import lif_rescale, lif_rollout
from cvxsnn.metrics import classification_accuracy, evaluate
from cvxsnn.oracle import random_micro_instance, run_oracle
from cvxsnn.pathnorm import (
    dag_forward,
    lif_dag,
    lif_normalize,
    lif_path_regularizer,
    normalize_incoming,
    outer_norm,
    path_regularizer,
    random_dag,
)
from cvxsnn.reconstruct import reconstruct, verify_reconstruction
from cvxsnn.solver import ConvexProblem, solve
from cvxsnn.surrogate import SurrogateConfig
from cvxsnn.tasks import (
    addition_splits,
    digits_to_int,
    gen_addition,
    gen_first_last_xor,
    read_idx,
    write_idx,
    xor_splits,
)
from cvxsnn.variants import VariantConfig, run_variant
from cvxsnn.witness import LifArch, sample_gaussian_witnesses

from test_surrogate import fd_check

# pinned tolerances and thresholds
GAP_TOL = 1e-6
XOR_GAP_SOLVER_TOL = 1e-7
ORACLE_INSTANCES = 20
ORACLE_TRIALS = 100_000
FIDELITY_TOL = 1e-9
FIDELITY_INSTANCES = 50
PATHNORM_TOL = 1e-10
PATHNORM_DAGS = 100
PATHNORM_INPUTS = 50
RESCALE_TRIALS = 100
LIF_NORM_TOL = 1e-10
FD_TOL = 1e-4
FD_SEEDS = 20
DEPTH_CVX_MIN = 0.95
DEPTH_MARGIN = 0.2
ADD_TOKEN_MIN = 0.90
ADD_SEEDS = (0, 1, 2)
ADD_REG_GRID = (0.01, 0.1, 0.5, 1.0, 5.0, 10.0)
SCALING_REG_GRID = (0.01, 0.1)
SCALING_MARGIN = 0.05
IDENTITY_SAMPLES = 10_000


@pytest.fixture
def report(capsys):
    def emit(number, ok, text):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}")
    return emit


def test_c01_xor_duality_gap(report):
    t0 = time.perf_counter()
    ds = gen_first_last_xor(11, 512, 0)
    arch = LifArch(ds.d, (16, 16), 11)
    worst = 0.0
    for K in (2, 16, 32, 64):
        # M = K witness groups of width 16, fixed leak and threshold
        dic = build_sampled_dictionary(sample_gaussian_witnesses(arch, K, 0, "fixed:0.9", "fixed:1.0"), ds.inputs)
        for reg in (0.01, 0.1):
            sol = solve(ConvexProblem(dic, ds.Y, reg, arch.m_last, ds.loss_spec("mean")), tol=XOR_GAP_SOLVER_TOL)
            worst = max(worst, abs(sol.primal_value - sol.dual_value))
    elapsed = time.perf_counter() - t0
    ok = worst <= GAP_TOL and elapsed < 300
    report(1, ok, f"max |primal-dual| = {worst:.2e} (<= {GAP_TOL:g}) in {elapsed:.0f}s")
    assert ok


def test_c02_micro_global_optimality(report):
    t0 = time.perf_counter()
    violations, slack = 0, np.inf
    for i in range(ORACLE_INSTANCES):
        rep = run_oracle(random_micro_instance(i), n_trials=ORACLE_TRIALS, seed=i)
        violations += rep.violations
        slack = min(slack, rep.network_min - rep.convex_dual)
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 600
    report(2, ok, f"{violations} violations over {ORACLE_INSTANCES}x{ORACLE_TRIALS} networks, "
                  f"min slack {slack:.2e}, {elapsed:.0f}s")
    assert ok


def test_c03_reconstruction_fidelity(report):
    worst = 0.0
    for seed in range(FIDELITY_INSTANCES):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 6))
        arch = LifArch(int(rng.integers(1, 4)), tuple(int(m) for m in rng.integers(2, 9, size=rng.integers(1, 3))), T)
        X = rng.normal(size=(T, int(rng.integers(10, 60)), arch.input_dim))
        store = sample_gaussian_witnesses(arch, int(rng.integers(1, 8)), seed, "uniform:0.0,0.95", "halfnormal")
        build = build_trajectory_dictionary if seed % 2 else build_sampled_dictionary
        d = build(store, X)
        Y = rng.normal(size=(d.n_rows, int(rng.integers(1, 4))))
        sol = solve(ConvexProblem(d, Y, float(rng.choice([0.01, 0.1, 1.0])), arch.m_last), tol=1e-6)
        for rule in ("masked", "uniform"):
            rep = verify_reconstruction(reconstruct(d, sol, rule=rule, merge=rule == "masked"), d, sol, X)
            assert not rep.mismatched_columns
            worst = max(worst, rep.max_deviation)
    ok = worst <= FIDELITY_TOL
    report(3, ok, f"max |forward - D w| = {worst:.2e} over {FIDELITY_INSTANCES} instances (<= {FIDELITY_TOL:g})")
    assert ok


def test_c04_path_norm_reduction(report):
    rng = np.random.default_rng(2024)
    worst_phi, outputs_ok = 0.0, True
    for i in range(PATHNORM_DAGS):
        p = (1.0, 2.0)[i % 2]
        dag = random_dag(rng, int(rng.integers(2, 6)), int(rng.integers(1, 9)), p,
                         n_subnets=int(rng.integers(1, 4)), skip_prob=0.2, d_out=int(rng.integers(1, 3)))
        norm = normalize_incoming(dag)
        phi = path_regularizer(norm).value
        worst_phi = max(worst_phi, abs(phi - outer_norm(norm)))
        X = rng.normal(size=(PATHNORM_INPUTS, dag.nodes_with_role("input").size))
        outputs_ok &= bool(np.array_equal(dag_forward(dag, X), dag_forward(norm, X)))
    ok = worst_phi <= PATHNORM_TOL and outputs_ok
    report(4, ok, f"max |Phi_p - outer norm| = {worst_phi:.2e} (<= {PATHNORM_TOL:g}), outputs preserved: {outputs_ok}")
    assert ok


def test_c05_lif_reduction(report):
    rng = np.random.default_rng(7)
    exact = True
    for i in range(RESCALE_TRIALS):
        arch = LifArch(int(rng.integers(1, 4)), tuple(int(m) for m in rng.integers(1, 6, size=rng.integers(1, 4))),
                       int(rng.integers(1, 7)))
        w = sample_gaussian_witnesses(arch, 1, i, "uniform:0.0,0.95", "halfnormal")[0]
        scales = [2.0 ** rng.integers(-6, 7, size=m).astype(float) for m in arch.widths]
        X = rng.normal(size=(arch.T, 20, arch.input_dim))
        a, b = lif_rollout(w, X), lif_rollout(lif_rescale(w, scales), X)
        for l, s in enumerate(scales):
            exact &= bool(np.array_equal(a.spikes[l], b.spikes[l]))
            exact &= bool(np.array_equal(a.membranes[l] * s, b.membranes[l]))
    worst = 0.0
    for i in range(20):
        arch = LifArch(2, tuple(int(m) for m in rng.integers(1, 4, size=rng.integers(1, 3))), int(rng.integers(1, 4)))
        trainable = bool(i % 2)
        ws = [lif_normalize(w, trainable) for w in sample_gaussian_witnesses(arch, 3, 100 + i, "uniform:0.0,0.95",
                                                                              "halfnormal").witnesses]
        p_outs = [rng.normal(size=(arch.m_last, 2)) for _ in ws]
        dag = lif_dag(ws, p_outs, arch.T, trainable_threshold=trainable)
        phi = lif_path_regularizer(dag).value
        target = sum(np.linalg.norm(p) for p in p_outs)
        worst = max(worst, abs(phi - target), abs(outer_norm(dag) - target))
    ok = exact and worst <= LIF_NORM_TOL
    report(5, ok, f"power-of-two rescalings bit-exact: {exact}; |Phi_LIF - sum ||P_out||_2| = {worst:.2e} "
                  f"(<= {LIF_NORM_TOL:g})")
    assert ok


def test_c06_surrogate_gradients(report):
    worst = max(fd_check(seed, per_timestep=bool(seed % 2)) for seed in range(FD_SEEDS))
    ok = worst <= FD_TOL
    report(6, ok, f"max relative FD error = {worst:.2e} over {FD_SEEDS} seeds (<= {FD_TOL:g})")
    assert ok


def _xor_cvx(L, seed, data):
    arch = LifArch(1, (16,) * (L - 1), 6)
    cfg = VariantConfig(arch, K=2, M=64, seed=seed, thr_mode="halfnormal", reg_beta=0.001, tol=1e-6)
    return classification_accuracy(run_variant("cvx", cfg, data).model, data["test"])


def _xor_sg(L, seed, data):
    # learning rate picked on validation accuracy
    arch = LifArch(1, (16,) * (L - 1), 6)
    best = None
    for lr in (1e-3, 5e-3, 1e-2, 1e-1):
        cfg = VariantConfig(arch, K=2, seed=seed, thr_mode="halfnormal", sg=SurrogateConfig(lr=lr, epochs=100))
        model = run_variant("sg", cfg, data).model
        key = (classification_accuracy(model, data["val"]), -lr)
        if best is None or key > best[0]:
            best = (key, classification_accuracy(model, data["test"]))
    return best[1]


def test_c07_depth_trend(report):
    cvx3, cvx10, sg10 = [], [], []
    for seed in range(3):
        data = xor_splits(6, seed)
        cvx3.append(_xor_cvx(3, seed, data))
        cvx10.append(_xor_cvx(10, seed, data))
        sg10.append(_xor_sg(10, seed, data))
    m3, m10, s10 = statistics.median(cvx3), statistics.median(cvx10), statistics.median(sg10)
    ok = m3 >= DEPTH_CVX_MIN and m10 - s10 >= DEPTH_MARGIN
    report(7, ok, f"median CVX L=3 {m3:.3f} (>= {DEPTH_CVX_MIN}); L=10 CVX {m10:.3f} vs SG {s10:.3f}, "
                  f"margin {m10 - s10:.3f} (>= {DEPTH_MARGIN})")
    assert ok


def _addition_cvx(seed, data, reg):
    arch = LifArch(3, (256, 512), data["train"].T)
    cfg = VariantConfig(arch, K=2, M=2, seed=seed, reg_beta=reg, tol=1e-6, max_iter=3000)
    return run_variant("cvx", cfg, data).model


def _best_of_grid(seed, data, grid, metric):
    """Validation-selected test record; ties go to the smaller reg_beta."""
    best = None
    for reg in grid:
        model = _addition_cvx(seed, data, reg)
        val = getattr(evaluate(model, data["val"], "tf"), metric)
        if best is None or val > best[0]:
            best = (val, reg, evaluate(model, data["test"], "tf"))
    return best


def test_c08_addition_base2(report):
    t0 = time.perf_counter()
    scores = []
    for seed in ADD_SEEDS:
        data = addition_splits(2, 5, seed)
        _, reg, rec = _best_of_grid(seed, data, ADD_REG_GRID, "joint_token_acc")
        scores.append((rec.joint_token_acc, reg))
    elapsed = time.perf_counter() - t0
    worst = min(s for s, _ in scores)
    ok = worst >= ADD_TOKEN_MIN and elapsed < 1800
    detail = ", ".join(f"{s:.3f}@{r:g}" for s, r in scores)
    report(8, ok, f"TF token accuracy per seed [{detail}], min {worst:.3f} (>= {ADD_TOKEN_MIN}) in {elapsed:.0f}s")
    assert ok


def test_c09_data_scaling(report):
    small, large = [], []
    for seed in ADD_SEEDS:
        for n, out in ((512, small), (4096, large)):
            data = addition_splits(2, 5, seed, {"train": n, "val": 512, "test": 1024})
            out.append(_best_of_grid(seed, data, SCALING_REG_GRID, "seq_acc")[2].seq_acc)
    a, b = statistics.median(small), statistics.median(large)
    ok = b - a >= SCALING_MARGIN
    report(9, ok, f"median sequential accuracy n=512 {a:.3f}, n=4096 {b:.3f}, "
                  f"difference {b - a:.3f} (>= {SCALING_MARGIN})")
    assert ok


def test_c10_dataset_correctness(report, tmp_path):
    identity = True
    for base in (2, 3, 5):
        ds = gen_addition(base, 8, IDENTITY_SAMPLES, seed=base)
        a = digits_to_int(ds.extras["a_digits"], base)
        b = digits_to_int(ds.extras["b_digits"], base)
        identity &= digits_to_int(ds.extras["sum"], base) == [x + y for x, y in zip(a, b)]
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(50, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=50, dtype=np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lbl", labels)
    write_idx(tmp_path / "img2", read_idx(tmp_path / "img"))
    write_idx(tmp_path / "lbl2", read_idx(tmp_path / "lbl"))
    round_trip = ((tmp_path / "img").read_bytes() == (tmp_path / "img2").read_bytes()
                  and (tmp_path / "lbl").read_bytes() == (tmp_path / "lbl2").read_bytes()
                  and np.array_equal(read_idx(tmp_path / "img"), images))
    ok = identity and round_trip
    report(10, ok, f"addition identity on {IDENTITY_SAMPLES} samples for b in (2, 3, 5): {identity}; "
                   f"IDX round-trip byte-exact: {round_trip}")
    assert ok
