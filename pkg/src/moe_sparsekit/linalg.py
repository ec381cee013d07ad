"""Dense float32 linear algebra with a fixed reduction order and MAC counting.

Matrices are plain C-contiguous ``float32`` numpy arrays.  Every reduction
runs in ascending index order so repeated calls, backends and thread
counts all give identical bits.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not line up."""


CATEGORIES = ("gate", "up", "down", "other")


@dataclass
class MacCounter:
    """Multiply-accumulate tallies, split by projection role.

    ``other`` collects router and shared-expert work so that
    ``gate + up + down`` is exactly the routed-expert cost.
    """

    gate_macs: int = 0
    up_macs: int = 0
    down_macs: int = 0
    other_macs: int = 0

    def add(self, category: str, n: int) -> None:
        if category not in CATEGORIES:
            raise ValueError(f"unknown MAC category {category!r}")
        if n < 0:
            raise ValueError("MAC increments must be non-negative")
        name = f"{category}_macs"
        setattr(self, name, getattr(self, name) + int(n))

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)

    def merge(self, other: MacCounter) -> MacCounter:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    @property
    def routed(self) -> int:
        return self.gate_macs + self.up_macs + self.down_macs

    @property
    def total(self) -> int:
        return self.routed + self.other_macs

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)} | {
            "routed_macs": self.routed,
            "total_macs": self.total,
        }


def as_matrix(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float32 matrix, checking shape and finiteness."""
    m = np.ascontiguousarray(a, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite values")
    return m


def _as_vector(x, length: int, what: str) -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=np.float32)
    if v.ndim != 1 or v.shape[0] != length:
        raise ShapeError(f"{what} must be a vector of length {length}, got shape {v.shape}")
    return v


def _as_index(idx, bound: int) -> np.ndarray:
    ix = np.asarray(idx, dtype=np.int64).reshape(-1)
    if ix.size and (ix.min() < 0 or ix.max() >= bound):
        raise IndexError(f"index out of range [0, {bound})")
    return ix


def matvec(w, x, counter: MacCounter | None = None, category: str = "other") -> np.ndarray:
    """``y[i] = sum_j w[i, j] * x[j]``, summed in ascending ``j``."""
    w = as_matrix(w)
    x = _as_vector(x, w.shape[1], "x")
    y = kernels.backend.batched_matvec(w, x[None, :])[0]
    if counter is not None:
        counter.add(category, w.shape[0] * w.shape[1])
    return y


def batched_matvec(w, x, counter: MacCounter | None = None, category: str = "other") -> np.ndarray:
    """Row-wise :func:`matvec` for a ``[B, D]`` batch; returns ``[B, N]``."""
    w = as_matrix(w)
    x = as_matrix(x, cols=w.shape[1])
    y = kernels.backend.batched_matvec(w, x)
    if counter is not None:
        counter.add(category, x.shape[0] * w.shape[0] * w.shape[1])
    return y


def gather_rows(w, idx) -> np.ndarray:
    """Rows ``w[idx[k]]`` packed into a new ``[m, D]`` matrix (no MACs)."""
    w = as_matrix(w)
    ix = _as_index(idx, w.shape[0])
    return np.ascontiguousarray(w[ix])


def gathered_matvec_t(w_t, idx, h, counter: MacCounter | None = None,
                      category: str = "down") -> np.ndarray:
    """Down projection over a gathered subset of neurons.

    ``w_t`` is the transposed ``[N, D]`` storage of a ``D x N`` down matrix,
    so ``y[d] = sum_k w_t[idx[k], d] * h[k]`` in ascending ``k``.
    """
    w_t = as_matrix(w_t)
    ix = _as_index(idx, w_t.shape[0])
    h = _as_vector(h, ix.size, "h")
    y = kernels.backend.gathered_matvec_t(w_t, ix, h)
    if counter is not None:
        counter.add(category, ix.size * w_t.shape[1])
    return y
