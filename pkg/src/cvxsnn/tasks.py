"""Datasets: carry-augmented addition, first/last XOR, sequential MNIST.

Inputs are ``(T, n, d)`` float arrays.  Per-timestep targets are stacked
t-major into ``(T*n, d_out)`` so they line up with trajectory dictionaries.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossBlock, LossSpec

LAMBDA_CARRY_GRID = (0.125, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 4.0, 6.0, 8.0, 10.0)
ADDITION_SPLITS = {"train": 2304, "val": 512, "finetune": 2304, "finetune_val": 512, "test": 1024}
OOD_DIGITS = {2: (10, 20, 50), 3: (10, 25, 50), 5: (10, 25, 50)}

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(eq=False)
class TaskDataset:
    inputs: np.ndarray
    Y: np.ndarray
    blocks: tuple
    readout_rule: str = "final_time"
    timestep_weights: np.ndarray = None
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def n(self) -> int:
        return self.inputs.shape[1]

    @property
    def d(self) -> int:
        return self.inputs.shape[2]

    @property
    def d_out(self) -> int:
        return self.Y.shape[1]

    @property
    def task(self) -> str:
        return self.meta.get("task", "")

    def row_weights(self) -> np.ndarray:
        rows = self.Y.shape[0]
        if self.timestep_weights is None:
            return np.ones(rows)
        return np.repeat(np.asarray(self.timestep_weights, dtype=np.float64), rows // self.T)

    def loss_spec(self, reduction: str = "mean") -> LossSpec:
        r = self.row_weights()
        if reduction == "mean":
            r = r / self.n
        return LossSpec(self.blocks, r)

    def rows_for(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if self.readout_rule == "per_timestep":
            return (np.arange(self.T)[:, None] * self.n + idx[None, :]).reshape(-1)
        return idx

    def subset(self, idx) -> "TaskDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return TaskDataset(
            self.inputs[:, idx], self.Y[self.rows_for(idx)], self.blocks, self.readout_rule,
            self.timestep_weights, {**self.meta, "n": int(idx.size)},
            {k: v[idx] for k, v in self.extras.items()},
        )

    def with_blocks(self, blocks) -> "TaskDataset":
        return TaskDataset(self.inputs, self.Y, tuple(blocks), self.readout_rule, self.timestep_weights,
                           dict(self.meta), dict(self.extras))


def ramp_weights(T: int) -> np.ndarray:
    """Linear ramp 0.5 -> 1.5 over ``T`` steps, rescaled to mean 1."""
    if T == 1:
        return np.ones(1)
    w = np.linspace(0.5, 1.5, T)
    return w / w.mean()


# -- addition ----------------------------------------------------------------


def joint_loss_spec(lam_sum: float = 1.0, lam_carry: float = 1.0, base: int = 2, kind: str = "softmax",
                    row_weights=None) -> LossSpec:
    """Sum-digit block (``base`` columns) plus carry block (2 columns)."""
    if lam_sum < 0 or lam_carry < 0:
        raise ValueError("loss weights must be nonnegative")
    return LossSpec((LossBlock(kind, 0, base, float(lam_sum)),
                     LossBlock(kind, base, base + 2, float(lam_carry))), row_weights)


def add_digits(a_digits: np.ndarray, b_digits: np.ndarray, base: int):
    """Grade-school addition on LSB-first digit arrays ``(n, n_digits)``.

    Returns ``(sum, carry_in, carry_out)`` each of shape ``(n, n_digits + 1)``.
    """
    n, nd = a_digits.shape
    T = nd + 1
    a = np.zeros((n, T), dtype=np.int64)
    b = np.zeros((n, T), dtype=np.int64)
    a[:, :nd], b[:, :nd] = a_digits, b_digits
    s = np.zeros((n, T), dtype=np.int64)
    cin = np.zeros((n, T), dtype=np.int64)
    cout = np.zeros((n, T), dtype=np.int64)
    carry = np.zeros(n, dtype=np.int64)
    for t in range(T):
        cin[:, t] = carry
        tot = a[:, t] + b[:, t] + carry
        s[:, t] = tot % base
        carry = tot // base
        cout[:, t] = carry
    return s, cin, cout


def digits_to_int(digits, base: int) -> list:
    """LSB-first digit rows to Python integers."""
    out = []
    for row in np.asarray(digits):
        v = 0
        for dgt in reversed(row.tolist()):
            v = v * base + int(dgt)
        out.append(v)
    return out


def addition_from_digits(a_digits, b_digits, base: int, lam_sum=1.0, lam_carry=1.0, ramp=True,
                         loss_kind="softmax", meta=None) -> TaskDataset:
    a_digits = np.asarray(a_digits, dtype=np.int64)
    b_digits = np.asarray(b_digits, dtype=np.int64)
    n, nd = a_digits.shape
    T = nd + 1
    s, cin, cout = add_digits(a_digits, b_digits, base)
    X = np.zeros((T, n, 3))
    X[:nd, :, 0] = a_digits.T / (base - 1)
    X[:nd, :, 1] = b_digits.T / (base - 1)
    X[:, :, 2] = cin.T
    Y = np.zeros((T * n, base + 2))
    rows = np.arange(T * n)
    Y[rows, s.T.reshape(-1)] = 1.0
    Y[rows, base + cout.T.reshape(-1)] = 1.0
    if loss_kind == "logistic":
        raise ValueError("addition targets are one-hot; use softmax or squared")
    spec = joint_loss_spec(lam_sum, lam_carry, base, loss_kind)
    md = {"task": "addition", "base": int(base), "n_digits": int(nd), "T": T, "n": n,
          "lam_sum": lam_sum, "lam_carry": lam_carry, "loss": loss_kind, **(meta or {})}
    return TaskDataset(X, Y, spec.blocks, "per_timestep", ramp_weights(T) if ramp else None, md,
                       {"a_digits": a_digits, "b_digits": b_digits, "sum": s, "carry_in": cin, "carry_out": cout})


def gen_addition(base: int, n_digits: int, n_samples: int, seed: int, lam_sum: float = 1.0,
                 lam_carry: float = 1.0, ramp: bool = True, loss_kind: str = "softmax") -> TaskDataset:
    """Uniform operands in ``[0, base^n_digits)`` (i.i.d. digits), LSB first."""
    if base < 2 or n_digits < 1:
        raise ValueError("need base >= 2 and n_digits >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(base), int(n_digits), 1]))
    a = rng.integers(0, base, size=(n_samples, n_digits))
    b = rng.integers(0, base, size=(n_samples, n_digits))
    return addition_from_digits(a, b, base, lam_sum, lam_carry, ramp, loss_kind, {"seed": int(seed)})


def addition_splits(base: int, n_digits: int, seed: int, sizes: dict | None = None, **kw) -> dict:
    """Disjoint index splits of one generated pool.

    Default names and sizes: pretraining ``train``/``val`` (2304/512), finetuning
    ``finetune``/``finetune_val`` (2304/512) and ``test`` (1024).
    """
    sizes = dict(ADDITION_SPLITS if sizes is None else sizes)
    total = sum(sizes.values())
    pool = gen_addition(base, n_digits, total, seed, **kw)
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 2])).permutation(total)
    out, start = {}, 0
    for name, size in sizes.items():
        out[name] = pool.subset(perm[start:start + size])
        out[name].meta["split"] = name
        start += size
    return out


def gen_addition_ood(base: int, n_digits: int, n_samples: int, seed: int, **kw) -> TaskDataset:
    ds = gen_addition(base, n_digits, n_samples, seed + 7_000_003, **kw)
    ds.meta["split"] = f"ood{n_digits}"
    return ds


# -- first/last XOR ----------------------------------------------------------


def gen_first_last_xor(T: int, n_samples: int, seed: int, encoding: str = "scalar",
                       loss_kind: str = "squared") -> TaskDataset:
    """Random bit streams; label ``x_1 XOR x_T`` with exactly balanced classes (±1)."""
    if T < 2:
        raise ValueError("need T >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(T), 3]))
    n1 = n_samples // 2 + (int(rng.integers(0, 2)) if n_samples % 2 else 0)
    labels = np.zeros(n_samples, dtype=np.int64)
    labels[:n1] = 1
    rng.shuffle(labels)
    bits = rng.integers(0, 2, size=(n_samples, T))
    bits[:, -1] = bits[:, 0] ^ labels
    if encoding == "scalar":
        X = bits.T[:, :, None].astype(np.float64)
    elif encoding == "onehot":
        X = np.stack([1 - bits.T, bits.T], axis=2).astype(np.float64)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    if loss_kind == "softmax":
        Y = np.eye(2)[labels]
    else:
        Y = (2.0 * labels - 1.0).reshape(-1, 1)
    blocks = (LossBlock(loss_kind, 0, Y.shape[1]),)
    meta = {"task": "xor", "T": T, "n": n_samples, "seed": int(seed), "encoding": encoding, "loss": loss_kind}
    return TaskDataset(X, Y, blocks, "final_time", None, meta, {"labels": labels, "bits": bits})


def xor_splits(T: int, seed: int, n_train: int = 512, n_val: int = 256, n_test: int = 1024, **kw) -> dict:
    return {
        "train": gen_first_last_xor(T, n_train, seed, **kw),
        "val": gen_first_last_xor(T, n_val, seed + 1_000_003, **kw),
        "test": gen_first_last_xor(T, n_test, seed + 2_000_003, **kw),
    }


# -- MNIST (IDX) -------------------------------------------------------------


def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an (optionally gzipped) IDX file of unsigned bytes."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise ValueError("corrupt IDX file")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise ValueError("corrupt IDX file")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ValueError("corrupt IDX file")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head != count:
        raise ValueError("corrupt IDX file")
    return np.frombuffer(raw[head:], dtype=np.uint8).reshape(dims).copy()


def write_idx(path, array: np.ndarray, compress: bool = False) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    if a.ndim == 3:
        magic = IDX_IMAGES
    elif a.ndim == 1:
        magic = IDX_LABELS
    else:
        raise ValueError("IDX writer supports image (3D) or label (1D) arrays")
    blob = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    Path(path).write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


def images_to_patches(images: np.ndarray, T: int) -> np.ndarray:
    """``(n, 28, 28)`` bytes to ``(T, n, 784 // T)`` patches scaled to [0, 1]."""
    n = images.shape[0]
    flat = images.reshape(n, -1)
    if flat.shape[1] % T:
        raise ValueError("T must divide the pixel count")
    return (flat.reshape(n, T, -1).transpose(1, 0, 2) / 255.0).astype(np.float64)


def patches_to_images(X: np.ndarray, shape=(28, 28)) -> np.ndarray:
    T, n, w = X.shape
    return np.rint(X.transpose(1, 0, 2).reshape(n, *shape) * 255.0).astype(np.uint8)


def load_mnist_seq(images_path, labels_path, T: int, n_samples: int | None = None, split: str = "train",
                   offset: int = 0, loss_kind: str = "softmax") -> TaskDataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError("corrupt IDX file")
    stop = images.shape[0] if n_samples is None else offset + n_samples
    images, labels = images[offset:stop], labels[offset:stop].astype(np.int64)
    X = images_to_patches(images, T)
    Y = np.eye(10)[labels]
    meta = {"task": "mnist", "T": T, "n": int(labels.size), "split": split}
    return TaskDataset(X, Y, (LossBlock(loss_kind, 0, 10),), "final_time", None, meta, {"labels": labels})


# -- cache container ---------------------------------------------------------


def save_dataset(ds: TaskDataset, path) -> None:
    """``uint32`` header length, header JSON, then float32 little-endian tensors."""
    tensors = [("inputs", ds.inputs), ("Y", ds.Y)]
    if ds.timestep_weights is not None:
        tensors.append(("timestep_weights", ds.timestep_weights))
    tensors += [(f"extra:{k}", v) for k, v in sorted(ds.extras.items())]
    header = {
        "meta": ds.meta,
        "blocks": [[b.kind, b.start, b.stop, b.weight] for b in ds.blocks],
        "readout_rule": ds.readout_rule,
        "tensors": [[name, list(np.shape(arr))] for name, arr in tensors],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [struct.pack("<I", len(hb)), hb]
    parts += [np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in tensors]
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> TaskDataset:
    raw = Path(path).read_bytes()
    hlen = struct.unpack("<I", raw[:4])[0]
    header = json.loads(raw[4:4 + hlen].decode())
    pos = 4 + hlen
    arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw[pos:pos + 4 * count], dtype="<f4").reshape(shape).astype(np.float64)
        pos += 4 * count
    extras = {k[6:]: v.astype(np.int64) for k, v in arrays.items() if k.startswith("extra:")}
    blocks = tuple(LossBlock(k, s, e, w) for k, s, e, w in header["blocks"])
    return TaskDataset(arrays["inputs"], arrays["Y"], blocks, header["readout_rule"],
                       arrays.get("timestep_weights"), header["meta"], extras)
