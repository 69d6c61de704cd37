"""Dense float64 tensor type and the small numeric op set the engine runs on.

Everything downstream (checkpoints, models, training) moves data around as
``Tensor`` values: immutable, C-contiguous, always finite. Checkpoints store
float32 on disk; in memory we widen to float64 so finite-difference gradient
checks are meaningful.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InvariantViolation, KOutOfRange

_debug_checks = os.environ.get("MOEFUSE_DEBUG", "") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    """Toggle finite-scans on the result of every op (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """Immutable named array of float64.

    Construction copies the input, coerces to C-order float64, and rejects
    NaN/Inf. The backing array is marked read-only; "mutation" elsewhere in
    the engine always means building a new Tensor.
    """

    __slots__ = ("_data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0 or any(s <= 0 for s in arr.shape):
            raise InvariantViolation(f"tensor dims must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvariantViolation(f"non-finite values in tensor {name or '<unnamed>'}")
        arr.setflags(write=False)
        self._data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, name: str | None = None) -> "Tensor":
        """Adopt an array the engine just computed, skipping the copy.

        Runs the finite scan only in debug mode; internal ops on finite
        inputs are trusted in release mode.
        """
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if _debug_checks and not np.all(np.isfinite(arr)):
            raise InvariantViolation(f"non-finite values in tensor {name or '<unnamed>'}")
        arr.setflags(write=False)
        t._data = arr
        t.name = name
        return t

    @property
    def data(self) -> np.ndarray:
        """Read-only backing array (row-major float64)."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def tolist(self):
        return self._data.tolist()

    def with_name(self, name: str) -> "Tensor":
        t = object.__new__(Tensor)
        t._data = self._data
        t.name = name
        return t

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label} shape={self.shape}"


def as_array(x) -> np.ndarray:
    """Coerce Tensor or array-like to a float64 ndarray (no copy if possible)."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _vector(x, op: str) -> np.ndarray:
    v = as_array(x)
    if v.ndim != 1:
        raise DimensionMismatch(f"{op} expects a 1-d vector, got shape {v.shape}")
    return v


def matmul(a, b) -> Tensor:
    """Row-major matrix product of a [m,k] and b [k,n]."""
    am, bm = as_array(a), as_array(b)
    if am.ndim != 2 or bm.ndim != 2:
        raise DimensionMismatch(f"matmul expects 2-d operands, got {am.shape} and {bm.shape}")
    if am.shape[1] != bm.shape[0]:
        raise DimensionMismatch(f"matmul inner dims differ: {am.shape} vs {bm.shape}")
    return Tensor._wrap(am @ bm)


def softmax(v) -> Tensor:
    """Normalized exponentials of a vector, computed with max-subtraction."""
    x = _vector(v, "softmax")
    if x.size == 0:
        raise EmptyInput("softmax of empty vector")
    e = np.exp(x - np.max(x))
    return Tensor._wrap(e / np.sum(e))


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(v) -> Tensor:
    """Elementwise logistic function; exact 0.5 at 0, saturates without overflow."""
    return Tensor._wrap(_sigmoid_array(as_array(v)))


def silu(v) -> Tensor:
    """x * sigmoid(x), the gated-FFN nonlinearity."""
    x = as_array(v)
    return Tensor._wrap(x * _sigmoid_array(x))


def rms_norm(x, gain, eps: float = 0.0) -> Tensor:
    """x * gain / sqrt(mean(x^2) + eps) over a single d-vector."""
    xv = _vector(x, "rms_norm")
    gv = _vector(gain, "rms_norm")
    if xv.shape != gv.shape:
        raise DimensionMismatch(f"rms_norm shapes differ: {xv.shape} vs {gv.shape}")
    r = np.sqrt(np.mean(xv * xv) + eps)
    return Tensor._wrap(xv * gv / r)


def add(a, b) -> Tensor:
    am, bm = as_array(a), as_array(b)
    if am.shape != bm.shape:
        raise DimensionMismatch(f"add shapes differ: {am.shape} vs {bm.shape}")
    return Tensor._wrap(am + bm)


def mul(a, b) -> Tensor:
    am, bm = as_array(a), as_array(b)
    if am.shape != bm.shape:
        raise DimensionMismatch(f"mul shapes differ: {am.shape} vs {bm.shape}")
    return Tensor._wrap(am * bm)


def scale(a, c: float) -> Tensor:
    return Tensor._wrap(as_array(a) * float(c))


def argmax(v) -> int:
    """Index of the largest entry; ties resolve to the lowest index."""
    x = _vector(v, "argmax")
    if x.size == 0:
        raise EmptyInput("argmax of empty vector")
    return int(np.argmax(x))


def top_k_indices(v, k: int) -> list[int]:
    """Indices of the k largest entries, descending by value.

    Equal values resolve to ascending index order, so the result is
    deterministic and routing traces are reproducible.
    """
    x = _vector(v, "top_k_indices")
    if not 1 <= k <= x.size:
        raise KOutOfRange(f"k={k} outside 1..{x.size}")
    order = np.argsort(-x, kind="stable")
    return [int(i) for i in order[:k]]


def gaussian_init(shape, mean: float = 0.0, std: float = 1.0, seed=0,
                  name: str | None = None) -> Tensor:
    """Seeded normal draw; bit-reproducible for the same seed."""
    rng = np.random.default_rng(seed)
    return Tensor._wrap(rng.normal(mean, std, size=tuple(shape)), name=name)
