"""Dense 5-D tensors in (n, c, t, h, w) layout.

Tensors are plain ``numpy.ndarray`` objects with five axes. Production code
stores them as float32; float64 is accepted everywhere so gradients can be
checked in a higher-precision shadow mode. No operation in this module
mutates its inputs.

The ``.t5b`` binary format is::

    b"T5B1" | 5 x uint64 little-endian extents (n, c, t, h, w) | float32 LE data
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DTYPE = np.float32
MAGIC = b"T5B1"
_HEADER = struct.Struct("<4s5Q")

Shape5 = tuple[int, int, int, int, int]


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or disagree."""


def check_shape(shape: Sequence[int]) -> Shape5:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ShapeError(f"expected 5 extents, got {len(shape)}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape  # type: ignore[return-value]


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a 5-D tensor and return it as a contiguous array.

    Float64 input keeps its precision unless ``dtype`` says otherwise; any
    other input becomes float32.
    """
    arr = np.asarray(x)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else DTYPE
    arr = np.ascontiguousarray(arr, dtype=dtype)
    check_shape(arr.shape)
    return arr


def zeros(shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=dtype)


def pad_zero(x: np.ndarray, pads: Sequence[int]) -> np.ndarray:
    """Zero-pad the (t, h, w) axes by ``pads`` samples on each side."""
    pt, ph, pw = (int(p) for p in pads)
    if min(pt, ph, pw) < 0:
        raise ValueError(f"pads must be >= 0, got {tuple(pads)}")
    x = as_tensor(x)
    if pt == ph == pw == 0:
        return x.copy()
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def crop(x: np.ndarray, pads: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`pad_zero`."""
    pt, ph, pw = (int(p) for p in pads)
    _, _, t, h, w = x.shape
    if 2 * pt >= t or 2 * ph >= h or 2 * pw >= w:
        raise ShapeError(f"cannot crop {tuple(pads)} from {x.shape}")
    return np.ascontiguousarray(x[:, :, pt:t - pt, ph:h - ph, pw:w - pw])


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact-shape elementwise sum.

    Each element is a single IEEE addition, so the result is commutative
    bit-for-bit; ``add(add(a, b), c)`` evaluates left to right.
    """
    _same_shape(a, b)
    return np.add(a, b)


_relu_calls = 0
_gate_log: list[np.ndarray] | None = None
_gate_replay: Iterator[np.ndarray] | None = None


def relu(x: np.ndarray) -> np.ndarray:
    global _relu_calls
    _relu_calls += 1
    if _gate_replay is not None:
        gate = next(_gate_replay)
        if gate.shape != x.shape:
            raise ShapeError(f"frozen gate {gate.shape} does not fit activation {x.shape}")
        return np.where(gate, x, 0).astype(x.dtype, copy=False)
    if _gate_log is not None:
        _gate_log.append(x > 0)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


@contextlib.contextmanager
def record_gates() -> Iterator[list[np.ndarray]]:
    """Collect the on/off pattern of every :func:`relu` call in the body."""
    global _gate_log
    prev, _gate_log = _gate_log, []
    try:
        yield _gate_log
    finally:
        _gate_log = prev


@contextlib.contextmanager
def frozen_gates(gates: list[np.ndarray]) -> Iterator[None]:
    """Make :func:`relu` reuse a recorded on/off pattern instead of the sign of its input.

    Inside the body the network is the linear map of one activation region,
    which is what finite differences need to avoid stepping across kinks.
    """
    global _gate_replay
    prev, _gate_replay = _gate_replay, iter(gates)
    try:
        yield
    finally:
        _gate_replay = prev


@contextlib.contextmanager
def count_relu() -> Iterator[list[int]]:
    """Count :func:`relu` applications inside the ``with`` body.

    Yields a one-element list that holds the count once the block exits.
    """
    box = [0]
    start = _relu_calls
    try:
        yield box
    finally:
        box[0] = _relu_calls - start


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    _same_shape(a, b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def max_rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Max over elements of ``|a-b| / max(|a|, |b|, 1e-12)``."""
    _same_shape(a, b)
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(a64), np.abs(b64)), 1e-12)
    return float(np.max(np.abs(a64 - b64) / denom))


def save_t5b(path: str | Path, x: np.ndarray) -> None:
    x = as_tensor(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *x.shape))
        fh.write(x.tobytes(order="C"))


def load_t5b(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, *shape = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    shape = check_shape(shape)
    count = int(np.prod(shape))
    body = raw[_HEADER.size:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").astype(DTYPE).reshape(shape)
