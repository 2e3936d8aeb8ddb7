"""Dense and sparse float32 kernels, deterministic RNG, and the binary tensor format.

Storage is float32 everywhere; matrix products accumulate in float64 and round
back, which keeps checkpoints small while making oracle comparisons stable.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse
from numpy.random import Generator, Philox

F32 = np.float32

TENSOR_MAGIC = b"SHRT"
TENSOR_VERSION = 1


class Rng:
    """Counter-based (Philox) generator: identical seed, identical stream, any platform."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = Generator(Philox(key=self.seed))

    def split(self, tag: str) -> "Rng":
        """Independent stream keyed by (seed, tag); stable across runs and platforms."""
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape).astype(F32)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, size=None):
        return self._gen.random(size=size)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def accum_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product with float64 accumulation rounded to float32.

    Accepts numpy-style stacked operands (used for batched attention).
    """
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(F32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product; float64 accumulation, float32 result."""
    a = np.asarray(a, dtype=F32)
    b = np.asarray(b, dtype=F32)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return accum_matmul(a, b)


def column_l2_norms(x: np.ndarray) -> np.ndarray:
    """Per-column L2 norm over all rows, accumulated in float64.

    out[j] = sqrt(sum_i x[i][j]^2); rows are flattened (batch x token) samples.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"column_l2_norms expects a 2-D input, got shape {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("column_l2_norms requires at least one row")
    return np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=0))


@dataclass
class CsrMatrix:
    """Compressed sparse row matrix over float32 values.

    Invariants: row_ptr non-decreasing with row_ptr[0] == 0 and
    row_ptr[rows] == nnz; column indices strictly increasing within each row;
    no stored exact zeros.
    """

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=F32)
        rows = np.repeat(np.arange(self.rows), np.diff(self.row_ptr))
        out[rows, self.col_idx] = self.values
        return out

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix(
            (self.values, self.col_idx, self.row_ptr), shape=(self.rows, self.cols)
        )


def csr_from_dense(m: np.ndarray) -> CsrMatrix:
    """Build a CSR matrix dropping exact zeros only (both bit patterns of 0.0).

    A dropped -0.0 round-trips back as +0.0; no epsilon thresholding happens,
    so pruning's exact zeros are the only entries removed.
    """
    m = np.asarray(m, dtype=F32)
    if m.ndim != 2:
        raise ValueError(f"csr_from_dense expects a 2-D input, got shape {m.shape}")
    mask = m != 0
    counts = mask.sum(axis=1, dtype=np.int64)
    row_ptr = np.zeros(m.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    _, col_idx = np.nonzero(mask)
    return CsrMatrix(
        rows=m.shape[0],
        cols=m.shape[1],
        row_ptr=row_ptr,
        col_idx=col_idx.astype(np.int64),
        values=m[mask],
    )


def csr_matmul(s: CsrMatrix, d: np.ndarray) -> np.ndarray:
    """Sparse x dense product; agrees with matmul(s.to_dense(), d) within 1e-5."""
    d = np.asarray(d, dtype=F32)
    if d.ndim != 2:
        raise ValueError(f"csr_matmul expects a 2-D dense operand, got shape {d.shape}")
    if s.cols != d.shape[0]:
        raise ValueError(f"csr_matmul shape mismatch: {s.rows}x{s.cols} x {d.shape}")
    out = s.to_scipy() @ d
    return np.ascontiguousarray(out, dtype=F32)


def save_tensor(path: Path | str, arr: np.ndarray) -> None:
    """Write a tensor: magic 'SHRT', version u32 LE, rank u32, dims u64 LE, f32 LE payload."""
    arr = np.ascontiguousarray(arr, dtype=F32)
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += b"".join(struct.pack("<Q", dim) for dim in arr.shape)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes(order="C"))


def load_tensor(path: Path | str) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {TENSOR_MAGIC!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported tensor format version {version}")
    dims = struct.unpack_from(f"<{rank}Q", blob, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {4 * count}")
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.reshape(dims).astype(F32)
