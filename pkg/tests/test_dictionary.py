import numpy as np
import pytest

from cvxsnn import bitpack
from cvxsnn.arrangement import BudgetExceeded, exact_enumerate_arrangement
from cvxsnn.dictionary import (
    LifGrid,
    build_sampled_dictionary,
    build_trajectory_dictionary,
    exact_enumerate_snn_dictionary,
    load_dictionary,
    save_dictionary,
    verify_dictionary,
)
from cvxsnn.lif import LifLayerParams, LifWitness, lif_rescale, lif_rollout
from cvxsnn.witness import LifArch, WitnessStore, gaussian_witness, sample_gaussian_witnesses


def store_of(witnesses, arch):
    return WitnessStore(witnesses, [{}] * len(witnesses), arch)


class TestBitpack:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for rows in (1, 63, 64, 65, 200):
            B = rng.random((rows, 7)) < 0.5
            np.testing.assert_array_equal(bitpack.unpack_columns(bitpack.pack_columns(B), rows), B)

    def test_popcount_products_match_dense(self):
        rng = np.random.default_rng(1)
        B = rng.random((130, 9)) < 0.4
        v = rng.random(130) < 0.5
        words = bitpack.pack_columns(B)
        mask = bitpack.pack_columns(v[:, None])[0]
        np.testing.assert_array_equal(bitpack.packed_rmatvec_binary(words, mask), B.T.astype(int) @ v)
        np.testing.assert_array_equal(bitpack.binary_gram(words), B.T.astype(int) @ B.astype(int))
        np.testing.assert_array_equal(bitpack.column_counts(words), B.sum(axis=0))

    def test_unique_keeps_first(self):
        B = np.array([[1, 0, 1, 0], [0, 1, 0, 1]], dtype=bool)
        keep, inv = bitpack.unique_columns(bitpack.pack_columns(B))
        assert keep.tolist() == [0, 1]
        assert inv.tolist() == [0, 1, 0, 1]


class TestArrangement:
    def test_opposite_rows(self):
        assert exact_enumerate_arrangement([[1.0], [-1.0]]) == {(1, 0), (0, 1), (1, 1)}

    def test_equal_rows(self):
        assert exact_enumerate_arrangement([[1.0], [1.0]]) == {(1, 1), (0, 0)}

    def test_all_ones_present(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            Z = rng.integers(-3, 4, size=(5, 3)) / 2.0
            assert (1,) * 5 in exact_enumerate_arrangement(Z)

    def test_matches_random_sweep(self):
        rng = np.random.default_rng(5)
        Z = rng.integers(-4, 5, size=(6, 2)) / 4.0
        found = exact_enumerate_arrangement(Z)
        U = rng.normal(size=(20000, 2))
        sampled = {tuple(int(v) for v in row) for row in (U @ Z.T >= 0)}
        assert sampled <= found

    def test_budget(self):
        with pytest.raises(BudgetExceeded, match="exact enumeration out of budget"):
            exact_enumerate_arrangement(np.ones((3, 4)))


class TestSampled:
    def test_rescaled_witnesses_dedup(self):
        arch = LifArch(2, (1,), 3)
        w = gaussian_witness(arch, 0, 0)
        w2 = lif_rescale(w, [[3.7]])
        X = np.random.default_rng(0).normal(size=(3, 10, 2))
        d = build_sampled_dictionary(store_of([w, w2], arch), X)
        assert d.P == 1
        assert d.witness_of.tolist() == [[0, 0]]

    def test_t1_zero_inputs_collapse(self):
        arch = LifArch(2, (4,), 1)
        store = sample_gaussian_witnesses(arch, 5, seed=0)
        d = build_sampled_dictionary(store, np.zeros((1, 6, 2)))
        assert d.P == 1
        assert d.columns.all()

    def test_dedup_bound(self):
        arch = LifArch(1, (1,), 2)
        store = sample_gaussian_witnesses(arch, 8, seed=2)
        X = np.random.default_rng(1).normal(size=(2, 4, 1))
        d = build_sampled_dictionary(store, X)
        assert d.P <= 8 and d.P <= 2 ** 4
        assert verify_dictionary(d, X)

    def test_trajectory_t1_equals_final(self):
        arch = LifArch(2, (4,), 1)
        store = sample_gaussian_witnesses(arch, 6, seed=4)
        X = np.random.default_rng(2).normal(size=(1, 20, 2))
        a, b = build_sampled_dictionary(store, X), build_trajectory_dictionary(store, X)
        np.testing.assert_array_equal(a.columns, b.columns)

    def test_trajectory_separates_final_duplicates(self):
        # both neurons end silent at t=2, only one fires at t=1
        arch = LifArch(1, (1,), 2)
        fire = LifWitness((LifLayerParams([[1.0]], [0.0], [5.0]),))
        quiet = LifWitness((LifLayerParams([[-1.0]], [0.0], [5.0]),))
        X = np.array([[[1.0]], [[0.5]]])
        store = store_of([fire, quiet], arch)
        assert build_sampled_dictionary(store, X).P == 1
        assert build_trajectory_dictionary(store, X).P == 2

    def test_trajectory_blocks(self):
        arch = LifArch(2, (3, 2), 4)
        store = sample_gaussian_witnesses(arch, 3, seed=9)
        X = np.random.default_rng(3).normal(size=(4, 5, 2))
        d = build_trajectory_dictionary(store, X)
        for i in range(d.P):
            w, j = d.witness(i)
            S = lif_rollout(w, X).spikes[-1]
            for t in range(1, 5):
                np.testing.assert_array_equal(d.block(t)[:, i], S[t - 1, :, j])

    def test_persistence(self, tmp_path):
        arch = LifArch(2, (3,), 3)
        store = sample_gaussian_witnesses(arch, 4, seed=1)
        X = np.random.default_rng(0).normal(size=(3, 70, 2))
        for d in (build_sampled_dictionary(store, X), build_trajectory_dictionary(store, X)):
            save_dictionary(d, tmp_path / "d.bin")
            e = load_dictionary(tmp_path / "d.bin")
            assert type(e) is type(d)
            np.testing.assert_array_equal(e.words, d.words)
            np.testing.assert_array_equal(e.witness_of, d.witness_of)
            assert all(a.equals(b) for a, b in zip(e.witnesses, d.witnesses))
            assert verify_dictionary(e, X)

    def test_not_a_container(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"garbage!" * 4)
        with pytest.raises(ValueError, match="not a spike dictionary container"):
            load_dictionary(tmp_path / "x.bin")


class TestExact:
    def test_t1_reduces_to_arrangement(self):
        X = np.array([[[0.5], [-0.25], [1.0]]])
        d = exact_enumerate_snn_dictionary(LifArch(1, (1,), 1), X)
        # no reset history at t=1, so the patterns are those of X^1 alone
        expected = exact_enumerate_arrangement(X[0])
        assert {tuple(int(v) for v in c) for c in d.columns.T} == expected

    def test_grid_refinement_monotone(self):
        X = np.random.default_rng(0).integers(-4, 5, size=(3, 4, 1)) / 4.0
        arch = LifArch(1, (1,), 3)
        coarse = exact_enumerate_snn_dictionary(arch, X, LifGrid(leaks=(0.5,)))
        fine = exact_enumerate_snn_dictionary(arch, X, LifGrid(leaks=(0.0, 0.5, 0.75)))
        cset = {c.tobytes() for c in coarse.columns.T}
        fset = {c.tobytes() for c in fine.columns.T}
        assert cset <= fset

    def test_random_witness_containment(self):
        rng = np.random.default_rng(7)
        grid = LifGrid()
        X = rng.integers(-4, 5, size=(2, 4, 2)) / 4.0
        arch = LifArch(2, (2, 1), 2)
        d = exact_enumerate_snn_dictionary(arch, X, grid)
        found = {c.tobytes() for c in d.columns.T}
        leaks = np.asarray(grid.leaks)
        for _ in range(2000):
            layers = []
            fan = 2
            for m in (2, 1):
                layers.append(LifLayerParams(rng.normal(size=(fan, m)), rng.choice(leaks, m),
                                             np.abs(rng.normal(size=m)) + 0.01))
                fan = m
            col = lif_rollout(LifWitness(tuple(layers)), X).spikes[-1][-1, :, 0]
            assert col.tobytes() in found

    def test_budget(self):
        with pytest.raises(BudgetExceeded):
            exact_enumerate_snn_dictionary(LifArch(1, (1,), 1), np.zeros((1, 20, 1)))
