"""SwiGLU math, the two masking rules, and active-index compaction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

SENTINEL = -1


def round_half_up(x: float) -> int:
    # Nudge absorbs binary error in products like 0.35 * 10.
    return int(math.floor(x + 0.5 + 1e-9))


def silu(x):
    """``x * sigmoid(x)``, evaluated in float64 and rounded to float32.

    Scalars come back as Python floats, arrays as float32 arrays.  Every
    masking decision in the package goes through this one function.
    """
    a = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = (a / (1.0 + np.exp(-a))).astype(np.float32)
    return float(out) if out.ndim == 0 else out


def swiglu_rows(gate_out, up_out) -> np.ndarray:
    g = np.asarray(gate_out, dtype=np.float32)
    u = np.asarray(up_out, dtype=np.float32)
    if g.shape != u.shape:
        raise ValueError(f"gate {g.shape} and up {u.shape} differ in shape")
    return silu(g) * u


def topk_mask(h, sparsity: float) -> np.ndarray:
    """Mask off the ``round_half_up(s * N)`` smallest ``|h|`` entries.

    Among equal magnitudes the lower index is masked first.  Works on the
    last axis, so ``h`` may be ``[..., N]``.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must be in [0, 1]")
    h = np.asarray(h, dtype=np.float32)
    n = h.shape[-1]
    n_off = round_half_up(sparsity * n)
    return _mask_smallest(h, n_off)


def _mask_smallest(h: np.ndarray, n_off) -> np.ndarray:
    """Mask the ``n_off`` smallest ``|h|`` (scalar or per-row array)."""
    order = np.argsort(np.abs(h), axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(h.shape[-1]), axis=-1)
    return rank >= np.asarray(n_off)[..., None]


def threshold_mask(gate_out, tau: float) -> np.ndarray:
    """Single pass: keep neuron ``i`` iff ``|silu(gate_out[i])| >= tau``."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    # Compare in float64 so a float64 tau is never rounded toward the data.
    return np.abs(silu(gate_out)).astype(np.float64) >= float(tau)


@dataclass(frozen=True)
class ActiveIndexBuffer:
    """Per-token compacted ``expert_id * N + neuron`` indices, sentinel padded."""

    flat_indices: np.ndarray  # int64 [B, capacity]
    active_per_slot: np.ndarray  # int64 [B, K]
    total_active: np.ndarray  # int64 [B]

    @property
    def capacity(self) -> int:
        return int(self.flat_indices.shape[1])

    def to_masks(self, topk_ids, n: int) -> np.ndarray:
        """Re-expand into ``[B, K, N]`` boolean masks."""
        ids = np.asarray(topk_ids, dtype=np.int64)
        masks = np.zeros(ids.shape + (n,), dtype=bool)
        for t in range(self.flat_indices.shape[0]):
            fr = self.flat_indices[t, :self.total_active[t]]
            e, i = np.divmod(fr, n)
            slot = np.argmax(ids[t][None, :] == e[:, None], axis=1)
            masks[t, slot, i] = True
        return masks


def compact_active(masks, topk_ids, capacity: int) -> ActiveIndexBuffer:
    """Write active (slot, neuron) pairs slot-major into a fixed-size buffer.

    ``masks`` is ``[K, N]`` for one token or ``[B, K, N]`` for a batch.  When
    the buffer overflows, later entries are dropped and per-slot counts are
    clamped to what was written.
    """
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    m = np.asarray(masks, dtype=bool)
    ids = np.asarray(topk_ids, dtype=np.int64)
    if m.ndim == 2:
        m, ids = m[None], ids[None]
    if m.shape[:2] != ids.shape:
        raise ValueError(f"masks {m.shape} do not match topk_ids {ids.shape}")
    flat, active, total = kernels.backend.compact(np.ascontiguousarray(m), ids, int(capacity))
    return ActiveIndexBuffer(flat, active, total)
