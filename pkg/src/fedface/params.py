"""Flat parameter-vector algebra.

Every model quantity exchanged in the simulator (backbones, heads, momentum
buffers, gradients) is a 1-D float64 numpy array.  Arrays produced here are
marked read-only so they can be shared between trainers and the server
without defensive copies.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

_LEN = struct.Struct("<Q")


class ParamError(ValueError):
    """Raised on shape mismatches or non-finite parameter values."""


def as_paramvec(values, copy: bool = True) -> np.ndarray:
    """Return ``values`` as a finite, read-only, 1-D float64 array."""
    if copy:
        arr = np.array(values, dtype=np.float64).reshape(-1)
    else:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ParamError("parameter vector must have positive length")
    if not np.all(np.isfinite(arr)):
        raise ParamError("parameter vector contains non-finite entries")
    arr.flags.writeable = False
    return arr


def zeros(n: int) -> np.ndarray:
    return as_paramvec(np.zeros(n), copy=False)


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ParamError(f"length mismatch: {x.shape[0]} != {y.shape[0]}")


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Element-wise ``a * x + y``; neither input is modified."""
    if not np.isfinite(a):
        raise ParamError("scalar coefficient must be finite")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    return as_paramvec(a * x + y, copy=False)


def weighted_sum(vs: Sequence[np.ndarray], w: Sequence[float]) -> np.ndarray:
    """Convex combination ``sum_i w[i] * vs[i]``.

    Terms are accumulated in ascending index order so results are bit-stable
    across runs regardless of how the inputs were produced.
    """
    if len(vs) == 0:
        raise ParamError("weighted_sum of an empty list")
    if len(vs) != len(w):
        raise ParamError(f"{len(vs)} vectors but {len(w)} weights")
    first = np.asarray(vs[0], dtype=np.float64)
    out = float(w[0]) * first
    for v, wi in zip(vs[1:], w[1:]):
        v = np.asarray(v, dtype=np.float64)
        _check_pair(first, v)
        out = out + float(wi) * v
    return as_paramvec(out, copy=False)


def dist_inf(x: np.ndarray, y: np.ndarray) -> float:
    """Max absolute element-wise difference."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    return float(np.max(np.abs(x - y)))


def write_record(fh: BinaryIO, v: np.ndarray) -> None:
    """Write a length-prefixed little-endian float64 record."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    fh.write(_LEN.pack(v.size))
    fh.write(v.astype("<f8").tobytes())


def read_record(fh: BinaryIO) -> np.ndarray:
    head = fh.read(_LEN.size)
    if len(head) != _LEN.size:
        raise EOFError("truncated record header")
    (n,) = _LEN.unpack(head)
    body = fh.read(8 * n)
    if len(body) != 8 * n:
        raise EOFError("truncated record payload")
    return as_paramvec(np.frombuffer(body, dtype="<f8").astype(np.float64), copy=False)
