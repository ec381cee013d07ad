"""Top-k softmax routing, expert-major block alignment, weighted combine."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigError

SENTINEL = -1


@dataclass(frozen=True)
class RouteResult:
    topk_ids: np.ndarray  # int64 [B, K], descending weight per row
    topk_weights: np.ndarray  # float32 [B, K]

    @property
    def batch(self) -> int:
        return self.topk_ids.shape[0]

    @property
    def top_k(self) -> int:
        return self.topk_ids.shape[1]


@dataclass(frozen=True)
class DispatchPlan:
    sorted_token_slots: np.ndarray  # int64, token*K+slot, sentinel-padded per expert
    expert_of_block: np.ndarray  # int64, one expert id per block of ``block`` entries
    block: int

    @property
    def n_padded(self) -> int:
        return int(self.sorted_token_slots.shape[0])


def route(logits, top_k: int, renormalize: bool = True) -> RouteResult:
    """Softmax over experts, then the ``top_k`` largest probabilities.

    Equal probabilities rank the lower expert id first.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"logits must be [B, E] with B >= 1, got shape {z.shape}")
    if top_k < 1 or top_k > z.shape[1]:
        raise ConfigError(f"top_k={top_k} must be in [1, {z.shape[1]}]")
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    ids = np.argsort(-p, axis=1, kind="stable")[:, :top_k]
    w = np.take_along_axis(p, ids, axis=1)
    if renormalize:
        w = w / w.sum(axis=1, keepdims=True)
    return RouteResult(ids.astype(np.int64), w.astype(np.float32))


def align_dispatch(result: RouteResult, n_experts: int, block: int) -> DispatchPlan:
    """Group token-slots by expert and pad each group to a multiple of ``block``.

    Experts with no tokens get no block.
    """
    if block < 1:
        raise ConfigError("block must be >= 1")
    flat_ids = result.topk_ids.reshape(-1)
    order = np.argsort(flat_ids, kind="stable")
    counts = np.bincount(flat_ids, minlength=n_experts)
    slots, experts = [], []
    start = 0
    for e in range(n_experts):
        c = int(counts[e])
        if c == 0:
            continue
        n_blocks = -(-c // block)
        group = np.full(n_blocks * block, SENTINEL, dtype=np.int64)
        group[:c] = order[start:start + c]
        slots.append(group)
        experts.extend([e] * n_blocks)
        start += c
    sorted_slots = np.concatenate(slots) if slots else np.zeros(0, dtype=np.int64)
    return DispatchPlan(sorted_slots, np.asarray(experts, dtype=np.int64), block)


def combine(expert_outputs, result: RouteResult) -> np.ndarray:
    """``y[t] = sum_slot w[t, slot] * out[t, slot]``, ascending slot."""
    out = np.asarray(expert_outputs, dtype=np.float32)
    b, k = result.topk_ids.shape
    if out.ndim != 3 or out.shape[:2] != (b, k):
        raise RuntimeError(f"need one output per token-slot ({b}x{k}), got shape {out.shape}")
    y = np.zeros((b, out.shape[2]), dtype=np.float32)
    for slot in range(k):
        y += result.topk_weights[:, slot, None] * out[:, slot]
    return y
