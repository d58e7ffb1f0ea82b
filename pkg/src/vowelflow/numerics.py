"""Dense linear algebra, convolution, and RNG primitives.

Conventions used throughout the package:

* tensors are ``numpy.ndarray`` of float64, row-major (C order);
* convolution means cross-correlation (no kernel flip) with "same"
  zero padding and odd kernel extents;
* every public operation returns finite values unless its contract
  says otherwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

PIVOT_TOL = 1e-12

FSTN_MAGIC = b"FSTN"
FSTN_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes violate an operation's precondition."""


class SingularMatrixError(ValueError):
    """Matrix is singular to working precision (pivot below PIVOT_TOL)."""


# ---------------------------------------------------------------------------
# random numbers


class Rng:
    """Counter-based random generator (Philox) with an explicit 64-bit seed.

    A fixed seed yields an identical sample stream on every platform.
    Instances are single-owner: never share one across threads; use
    :meth:`spawn` to derive independent child streams instead.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed))
        )

    @classmethod
    def _from_seq(cls, seed: int, seq: np.random.SeedSequence) -> "Rng":
        rng = cls.__new__(cls)
        rng.seed = seed
        rng._gen = np.random.Generator(np.random.Philox(seq))
        return rng

    def spawn(self, index: int) -> "Rng":
        """Child stream `index`, independent of draws made from self."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(int(index),))
        return Rng._from_seq(self.seed, seq)

    def standard_normal(self, shape=None) -> np.ndarray | float:
        return self._gen.standard_normal(size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray | float:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None) -> int | np.ndarray:
        out = self._gen.integers(low, high, size=size)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def state(self) -> dict:
        """JSON-serializable snapshot of the generator state."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @state.setter
    def state(self, snap: dict) -> None:
        self.seed = int(snap["seed"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(snap["counter"], dtype=np.uint64),
                "key": np.array(snap["key"], dtype=np.uint64),
            },
            "buffer": np.array(snap["buffer"], dtype=np.uint64),
            "buffer_pos": int(snap["buffer_pos"]),
            "has_uint32": int(snap["has_uint32"]),
            "uinteger": int(snap["uinteger"]),
        }


def randn(rng: Rng, shape) -> np.ndarray:
    """I.i.d. standard normal tensor of the given shape."""
    return np.asarray(rng.standard_normal(shape), dtype=np.float64)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


@dataclass
class LuFactors:
    """Partial-pivoting LU factorization P A = L U.

    `perm` maps output rows to input rows: (P A)[i] == A[perm[i]].
    `lower` is unit lower triangular, `upper` upper triangular and
    `sign` the parity of the row permutation.
    """

    perm: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sign: int

    @property
    def log_abs_det(self) -> float:
        """ln |det A| = sum of ln |U_ii|."""
        return float(np.sum(np.log(np.abs(np.diag(self.upper)))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve A x = b for one or many right-hand sides."""
        b = np.asarray(b, dtype=np.float64)
        squeeze = b.ndim == 1
        if squeeze:
            b = b[:, None]
        n = self.upper.shape[0]
        if b.shape[0] != n:
            raise ShapeError(f"rhs has {b.shape[0]} rows, expected {n}")
        y = b[self.perm].copy()
        for i in range(1, n):  # forward substitution, L unit diagonal
            y[i] -= self.lower[i, :i] @ y[:i]
        x = y
        for i in range(n - 1, -1, -1):  # back substitution
            x[i] -= self.upper[i, i + 1:] @ x[i + 1:]
            x[i] /= self.upper[i, i]
        return x[:, 0] if squeeze else x


def lu_decompose(a: np.ndarray) -> LuFactors:
    """LU factorization with partial (row) pivoting.

    Raises SingularMatrixError when the best available pivot falls
    below PIVOT_TOL in absolute value.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"lu_decompose expects a square matrix, got {a.shape}")
    n = a.shape[0]
    perm = np.arange(n)
    sign = 1
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < PIVOT_TOL:
            raise SingularMatrixError(f"pivot {a[p, k]:.3e} below {PIVOT_TOL} at column {k}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            sign = -sign
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    lower = np.tril(a, -1) + np.eye(n)
    upper = np.triu(a)
    return LuFactors(perm=perm, lower=lower, upper=upper, sign=sign)


def mat_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of a nonsingular square matrix via LU solves."""
    lu = lu_decompose(a)
    return lu.solve(np.eye(lu.upper.shape[0]))


# ---------------------------------------------------------------------------
# convolution


def _check_kernel(kernel: np.ndarray, bias: np.ndarray) -> None:
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be OxCxKHxKW, got {kernel.shape}")
    _, _, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernel.shape[0]} outputs")


def _im2col(x_padded: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H+kh-1, W+kw-1) -> (B, C*kh*kw, H*W) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    b, c, h, w = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, h * w)


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray,
    padding: str = "same",
) -> np.ndarray:
    """Cross-correlation with "same" zero padding plus per-channel bias.

    Accepts a single image (C, H, W) or a batch (B, C, H, W); the
    output keeps the input's layout with O channels.
    """
    if padding != "same":
        raise ValueError(f"only 'same' padding is supported, got {padding!r}")
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    _check_kernel(kernel, bias)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input {x.shape} does not match kernel {kernel.shape}")
    o, c, kh, kw = kernel.shape
    bsz, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    cols = _im2col(xp, kh, kw)
    y = (kernel.reshape(o, c * kh * kw) @ cols).reshape(bsz, o, h, w)
    y += bias[:, None, None]
    return y[0] if single else y


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of conv2d w.r.t. input, kernel and bias.

    `grad_out` is the cotangent of the output; shapes must match the
    corresponding forward call.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
        grad_out = grad_out[None]
    o, c, kh, kw = kernel.shape
    if grad_out.shape != (x.shape[0], o, x.shape[2], x.shape[3]):
        raise ShapeError(
            f"grad_out {grad_out.shape} inconsistent with input {x.shape} "
            f"and kernel {kernel.shape}"
        )
    bsz, _, h, w = x.shape

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    cols = _im2col(xp, kh, kw)  # (B, C*kh*kw, H*W)
    gmat = grad_out.reshape(bsz, o, h * w)
    grad_kernel = np.einsum("boq,bkq->ok", gmat, cols).reshape(o, c, kh, kw)

    # For stride-1 "same" correlation with odd kernels the input gradient
    # is itself a "same" correlation with the channel-swapped, spatially
    # flipped kernel.
    kflip = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x = conv2d(grad_out, np.ascontiguousarray(kflip), np.zeros(c))

    if single:
        return grad_x[0], grad_kernel, grad_bias
    return grad_x, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# tensor file format (FSTN)


def write_tensor_to(fp: BinaryIO, arr: np.ndarray) -> int:
    """Append one FSTN record to a binary stream; returns bytes written."""
    arr = np.asarray(arr, dtype=np.float64)
    header = FSTN_MAGIC + struct.pack("<II", FSTN_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f8").tobytes(order="C")
    fp.write(header)
    fp.write(payload)
    return len(header) + len(payload)


def read_tensor_from(fp: BinaryIO) -> np.ndarray:
    """Read one FSTN record from the current stream position."""
    magic = fp.read(4)
    if magic != FSTN_MAGIC:
        raise ValueError(f"bad FSTN magic {magic!r}")
    version, rank = struct.unpack("<II", fp.read(8))
    if version != FSTN_VERSION:
        raise ValueError(f"unsupported FSTN version {version}")
    if rank > 32:
        raise ValueError(f"implausible FSTN rank {rank}")
    shape = struct.unpack(f"<{rank}I", fp.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    raw = fp.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated FSTN payload")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor_to(fp, arr)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_tensor_from(fp)
