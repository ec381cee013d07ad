"""Router-weight neuron budgeting across the active routed experts.

Experts are ranked by router weight and split into three groups.  A total
budget of ``s_active * K * D_ffn`` neurons is shared out so that every
expert in group ``x`` receives ``budget * r_x / sum_x(r_x * |g_x|)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .activation import _mask_smallest, round_half_up
from .model import ConfigError


@dataclass(frozen=True)
class BudgetRatios:
    r0: float
    r1: float
    r2: float

    def __post_init__(self):
        rs = (self.r0, self.r1, self.r2)
        if any(r < 0 for r in rs):
            raise ConfigError("budget ratios must be non-negative")
        if max(rs) <= 0:
            raise ConfigError("budget ratios must not all be zero")

    @classmethod
    def parse(cls, text: str) -> BudgetRatios:
        """Parse ``"3:2:1"``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"expected r0:r1:r2, got {text!r}")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError:
            raise ConfigError(f"non-numeric budget ratio in {text!r}") from None

    def as_tuple(self) -> tuple[float, float, float]:
        return self.r0, self.r1, self.r2


def group_experts(topk_weights) -> tuple[list[int], list[int], list[int]]:
    """Slot indices of groups g0, g1, g2 by descending router weight.

    g0 and g1 get ``K // 3`` slots each; the remainder lands in g2.
    """
    w = np.asarray(topk_weights, dtype=np.float64).reshape(-1)
    if w.size < 1:
        raise ValueError("need at least one active expert")
    order = np.argsort(-w, kind="stable").tolist()
    third = w.size // 3
    return order[:third], order[third:2 * third], order[2 * third:]


def allocate_budget(k: int, d_ffn: int, s_active: float, groups, ratios: BudgetRatios) -> np.ndarray:
    """Per-slot neuron counts, clamped to ``[0, d_ffn]``.

    ``s_active`` is the fraction of neurons kept.  Before clamping each
    count is off by at most 1/2 from its real-valued share, so
    ``|sum(counts) - s_active*K*D| <= K/2``.
    """
    if not 0.0 <= s_active <= 1.0:
        raise ValueError("s_active must be in [0, 1]")
    members = sorted(i for g in groups for i in g)
    if members != list(range(k)):
        raise ValueError("groups must partition the slots 0..K-1")
    rs = ratios.as_tuple()
    denom = sum(r * len(g) for r, g in zip(rs, groups))
    if denom <= 0:
        raise ConfigError("budget ratios give zero weight to every populated group")
    total = s_active * k * d_ffn
    counts = np.zeros(k, dtype=np.int64)
    for r, g in zip(rs, groups):
        n = min(max(round_half_up(total * r / denom), 0), d_ffn)
        counts[list(g)] = n
    return counts


def apply_budget(h, counts) -> np.ndarray:
    """Keep the ``counts[slot]`` largest-``|h|`` neurons of each slot.

    ``h`` is ``[K, N]`` (or ``[..., K, N]``).  The neurons dropped are
    exactly the ones :func:`~moe_sparsekit.activation.topk_mask` would drop
    for the same number of removals, tie order included.
    """
    h = np.asarray(h, dtype=np.float32)
    c = np.asarray(counts, dtype=np.int64)
    n = h.shape[-1]
    if np.any(c < 0) or np.any(c > n):
        raise ValueError(f"counts must lie in [0, {n}]")
    return _mask_smallest(h, n - c)
