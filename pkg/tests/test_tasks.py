import gzip

import numpy as np
import pytest

from cvxsnn.losses import LossBlock, LossSpec
from cvxsnn.tasks import (
    IDX_IMAGES,
    IDX_LABELS,
    add_digits,
    addition_from_digits,
    addition_splits,
    digits_to_int,
    gen_addition,
    gen_first_last_xor,
    images_to_patches,
    load_dataset,
    load_mnist_seq,
    patches_to_images,
    ramp_weights,
    read_idx,
    save_dataset,
    write_idx,
)


class TestAddition:
    def test_worked_example(self):
        s, cin, cout = add_digits(np.array([[1, 0, 1]]), np.array([[1, 1, 0]]), 2)
        assert list(zip(s[0], cout[0])) == [(0, 1), (0, 1), (0, 1), (1, 0)]
        assert digits_to_int(s, 2) == [8]
        assert cin[0].tolist() == [0, 1, 1, 1]

    def test_zero_operands(self):
        s, _, cout = add_digits(np.zeros((3, 4), int), np.zeros((3, 4), int), 5)
        assert not s.any() and not cout.any()

    @pytest.mark.parametrize("base", [2, 3, 5])
    def test_integer_identity(self, base):
        ds = gen_addition(base, 6, 10_000, seed=base)
        a = digits_to_int(ds.extras["a_digits"], base)
        b = digits_to_int(ds.extras["b_digits"], base)
        assert digits_to_int(ds.extras["sum"], base) == [x + y for x, y in zip(a, b)]

    def test_encoding(self):
        ds = addition_from_digits([[1, 0, 1]], [[1, 1, 0]], 2)
        assert ds.inputs.shape == (4, 1, 3)
        assert ds.inputs[:, 0, 2].tolist() == [0, 1, 1, 1]
        # t-major one-hot targets: sum digit block then carry block
        assert ds.Y.shape == (4, 4)
        assert ds.Y[3].tolist() == [0, 1, 1, 0]

    def test_ramp(self):
        w = ramp_weights(6)
        assert np.all(np.diff(w) > 0)
        assert w.mean() == pytest.approx(1.0, abs=1e-15)
        assert w[-1] / w[0] == pytest.approx(3.0)

    def test_zero_carry_weight(self):
        rng = np.random.default_rng(0)
        ds = gen_addition(2, 4, 20, 0, lam_carry=0.0)
        Z = rng.normal(size=ds.Y.shape)
        spec = ds.loss_spec()
        sum_only = LossSpec((LossBlock("softmax", 0, 2),), spec.row_weights)
        assert spec.value(Z, ds.Y) == pytest.approx(sum_only.value(Z[:, :2], ds.Y[:, :2]), abs=1e-12)

    def test_splits_sizes_and_determinism(self):
        sizes = {"train": 50, "val": 20, "test": 30}
        splits = addition_splits(3, 4, 0, sizes)
        assert {k: v.n for k, v in splits.items()} == sizes
        again = addition_splits(3, 4, 0, sizes)
        np.testing.assert_array_equal(again["val"].inputs, splits["val"].inputs)
        assert not np.array_equal(addition_splits(3, 4, 1, sizes)["val"].inputs, splits["val"].inputs)


class TestXor:
    def test_labels(self):
        ds = gen_first_last_xor(7, 101, 3)
        bits, labels = ds.extras["bits"], ds.extras["labels"]
        np.testing.assert_array_equal(labels, bits[:, 0] ^ bits[:, -1])
        assert abs(int(labels.sum()) - (101 - int(labels.sum()))) <= 1
        np.testing.assert_array_equal(ds.Y[:, 0], 2 * labels - 1)

    def test_first_one_last_zero(self):
        ds = gen_first_last_xor(5, 200, 0)
        bits, labels = ds.extras["bits"], ds.extras["labels"]
        sel = (bits[:, 0] == 1) & (bits[:, -1] == 0)
        assert sel.any() and labels[sel].all()
        assert not labels[bits[:, 0] == bits[:, -1]].any()

    def test_deterministic(self):
        a, b = gen_first_last_xor(6, 64, 9), gen_first_last_xor(6, 64, 9)
        np.testing.assert_array_equal(a.inputs, b.inputs)

    def test_short_horizon(self):
        with pytest.raises(ValueError):
            gen_first_last_xor(1, 4, 0)


class TestIdx:
    @pytest.fixture
    def files(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=12, dtype=np.uint8)
        write_idx(tmp_path / "img", images)
        write_idx(tmp_path / "lbl.gz", labels, compress=True)
        return tmp_path, images, labels

    def test_magic(self, files):
        path, _, _ = files
        assert (path / "img").read_bytes()[:4] == IDX_IMAGES.to_bytes(4, "big")
        assert gzip.decompress((path / "lbl.gz").read_bytes())[:4] == IDX_LABELS.to_bytes(4, "big")

    def test_round_trip(self, files):
        path, images, labels = files
        np.testing.assert_array_equal(read_idx(path / "img"), images)
        np.testing.assert_array_equal(read_idx(path / "lbl.gz"), labels)
        write_idx(path / "again", read_idx(path / "img"))
        assert (path / "again").read_bytes() == (path / "img").read_bytes()

    def test_corrupt(self, files):
        path, _, _ = files
        raw = (path / "img").read_bytes()
        (path / "short").write_bytes(raw[:-1])
        (path / "magic").write_bytes(b"\x00\x00\x09\x03" + raw[4:])
        for name in ("short", "magic"):
            with pytest.raises(ValueError, match="corrupt IDX file"):
                read_idx(path / name)

    @pytest.mark.parametrize("T,width", [(2, 392), (28, 28), (784, 1)])
    def test_patches(self, files, T, width):
        path, images, _ = files
        X = images_to_patches(images, T)
        assert X.shape == (T, 12, width)
        np.testing.assert_array_equal(patches_to_images(X), images)

    def test_sequence_loader(self, files):
        path, images, labels = files
        ds = load_mnist_seq(path / "img", path / "lbl.gz", T=4, n_samples=5)
        assert ds.inputs.shape == (4, 5, 196)
        np.testing.assert_array_equal(ds.extras["labels"], labels[:5])

    def test_patch_width(self, files):
        with pytest.raises(ValueError, match="T must divide"):
            images_to_patches(files[1], 5)


def test_cache_round_trip(tmp_path):
    ds = gen_addition(3, 4, 30, 1)
    save_dataset(ds, tmp_path / "ds.bin")
    back = load_dataset(tmp_path / "ds.bin")
    np.testing.assert_array_equal(back.inputs, ds.inputs.astype(np.float32))
    np.testing.assert_array_equal(back.Y, ds.Y)
    for k in ds.extras:
        np.testing.assert_array_equal(back.extras[k], ds.extras[k])
    assert back.blocks == ds.blocks and back.readout_rule == ds.readout_rule
