"""Dense, masked-dense and gather-based sparse execution of one MoE layer.

All three paths share the router and the expert-major gate projection.

* ``forward_dense``: grouped SwiGLU per (token, slot), then combine.
* ``forward_masked_dense``: same, with ``h`` zeroed under a mask.  Charges
  the full dense cost; it is the analysis-mode oracle.
* ``forward_sparse``: threshold the gate activations, compact the
  survivors into a padded index buffer, and run the fused up/down stage
  over 64-neuron tiles, skipping tiles that hold only padding.

Work is split over contiguous token chunks when ``threads > 1``.  Each
token's arithmetic is independent of the chunking, so outputs do not
depend on the worker count.
"""
from __future__ import annotations

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .activation import ActiveIndexBuffer, silu
from .linalg import MacCounter, as_matrix
from .model import ConfigError, MoEConfig, MoELayerWeights
from .router import RouteResult, align_dispatch, combine, route

INF = math.inf


@dataclass
class ForwardReport:
    outputs: np.ndarray
    macs: MacCounter
    path_used: str
    achieved_routed_sparsity: float = 0.0
    tiles_total: int = 0
    tiles_skipped: int = 0
    active_neurons: int = 0  # sum over tokens of total_active (unpadded)
    padded_active: int = 0  # same, rounded up to whole tiles per token
    routing: RouteResult | None = field(default=None, repr=False)
    buffer: ActiveIndexBuffer | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "path": self.path_used,
            "batch": int(self.outputs.shape[0]),
            "achieved_routed_sparsity": self.achieved_routed_sparsity,
            "tiles_total": self.tiles_total,
            "tiles_skipped": self.tiles_skipped,
            "active_neurons": self.active_neurons,
            "padded_active": self.padded_active,
            **self.macs.as_dict(),
        }


@dataclass(frozen=True)
class SwitchTable:
    """Batch sizes ``>= tipping_batch`` run dense; ``inf`` means always sparse."""

    tipping_batch: float = INF

    def __post_init__(self):
        if not (self.tipping_batch == INF or self.tipping_batch >= 1):
            raise ConfigError("tipping_batch must be >= 1 or inf")

    def path_for(self, batch: int) -> str:
        return "dense" if batch >= self.tipping_batch else "sparse"


def tile_counts(total_active, capacity: int, tile: int = 64) -> tuple[int, int]:
    """``(tiles_total, tiles_skipped)`` for a batch of per-token active counts."""
    ta = np.asarray(total_active, dtype=np.int64)
    per_token = -(-capacity // tile)
    run = -(-ta // tile)
    return int(ta.size * per_token), int(np.sum(per_token - run))


# -- shared stages ---------------------------------------------------------

def _prepare(weights: MoELayerWeights, x) -> np.ndarray:
    return as_matrix(x, cols=weights.config.d_model)


def _route(weights: MoELayerWeights, x: np.ndarray, counter: MacCounter) -> RouteResult:
    c = weights.config
    logits = kernels.backend.batched_matvec(weights.router, x)
    counter.add("other", x.shape[0] * c.n_experts * c.d_model)
    return route(logits, c.top_k, c.renormalize)


def _grouped(weights: MoELayerWeights, w: np.ndarray, x: np.ndarray, r: RouteResult) -> np.ndarray:
    """Expert-major projection, returned as ``[B, K, N]``."""
    c = weights.config
    plan = align_dispatch(r, c.n_experts, c.align_block)
    out = kernels.backend.grouped_proj(w, x, plan.sorted_token_slots, plan.expert_of_block,
                                       plan.block, c.top_k)
    return out.reshape(x.shape[0], c.top_k, c.d_ffn)


def gate_stage(weights: MoELayerWeights, x, counter: MacCounter | None = None):
    """Route and run the dense gate projection.

    Returns ``(routing, gate_raw [B, K, N], activations [B, K, N])`` where
    activations are ``silu(gate_raw)``.
    """
    counter = counter if counter is not None else MacCounter()
    x = _prepare(weights, x)
    r = _route(weights, x, counter)
    g = _grouped(weights, weights.gate, x, r)
    c = weights.config
    counter.add("gate", x.shape[0] * c.top_k * c.d_model * c.d_ffn)
    return r, g, silu(g)


def routed_activations(weights: MoELayerWeights, x):
    """Routing plus the full SwiGLU output ``[B, K, N]`` of every routed slot."""
    x = _prepare(weights, x)
    r, _, a = gate_stage(weights, x)
    return r, a * _grouped(weights, weights.up, x, r)


def _shared(weights: MoELayerWeights, x: np.ndarray, counter: MacCounter,
            mask: np.ndarray | None = None) -> np.ndarray:
    c = weights.config
    g = kernels.backend.batched_matvec(weights.shared_gate, x)
    u = kernels.backend.batched_matvec(weights.shared_up, x)
    h = silu(g) * u
    if mask is not None:
        h = np.where(mask, h, np.float32(0.0))
    ids = np.zeros(x.shape[0], dtype=np.int64)
    out = kernels.backend.down_proj(weights.shared_down_t[None], h, ids)
    counter.add("other", 3 * x.shape[0] * c.d_model * c.d_shared)
    return out


def _chunks(b: int, threads: int) -> list[slice]:
    n = max(1, min(int(threads), b))
    edges = np.linspace(0, b, n + 1).astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(n)]


def _run_chunked(fn, b: int, threads: int, *arrays):
    """Apply ``fn(*array_slices)`` per token chunk and return the parts."""
    parts = _chunks(b, threads)
    if len(parts) == 1:
        return [fn(*arrays)]
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        futures = [pool.submit(fn, *(a[s] if a is not None else None for a in arrays))
                   for s in parts]
        return [f.result() for f in futures]


# -- dense and masked-dense ------------------------------------------------

def _dense_chunk(weights: MoELayerWeights, x: np.ndarray, masks, shared_masks):
    counter = MacCounter()
    c = weights.config
    b = x.shape[0]
    r, g, a = gate_stage(weights, x, counter)
    u = _grouped(weights, weights.up, x, r)
    h = a * u
    if masks is not None:
        h = np.where(masks, h, np.float32(0.0))
    per_slot = kernels.backend.down_proj(weights.down_t, h.reshape(b * c.top_k, c.d_ffn),
                                         r.topk_ids.reshape(-1))
    counter.add("up", b * c.top_k * c.d_model * c.d_ffn)
    counter.add("down", b * c.top_k * c.d_model * c.d_ffn)
    y = combine(per_slot.reshape(b, c.top_k, c.d_model), r)
    if c.has_shared:
        y = y + _shared(weights, x, counter, shared_masks)
    return y, counter, r


def _merge_routes(parts: list[RouteResult]) -> RouteResult:
    return RouteResult(np.concatenate([p.topk_ids for p in parts]),
                       np.concatenate([p.topk_weights for p in parts]))


def forward_dense(weights: MoELayerWeights, x, threads: int = 1) -> ForwardReport:
    x = _prepare(weights, x)
    parts = _run_chunked(lambda xs: _dense_chunk(weights, xs, None, None), x.shape[0], threads, x)
    return _dense_report(parts, "dense", None, weights.config)


def forward_masked_dense(weights: MoELayerWeights, x, masks, shared_masks=None,
                         threads: int = 1) -> ForwardReport:
    """Dense forward with ``h`` zeroed where ``masks`` is False.

    ``masks`` is ``[B, K, N]`` in routed-slot order.  ``shared_masks``
    (``[B, d_shared]``) additionally masks the shared expert.
    """
    c = weights.config
    x = _prepare(weights, x)
    b = x.shape[0]
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (b, c.top_k, c.d_ffn):
        raise ValueError(f"masks must be {(b, c.top_k, c.d_ffn)}, got {masks.shape}")
    if shared_masks is not None:
        if not c.has_shared:
            raise ValueError("shared_masks given but the layer has no shared expert")
        shared_masks = np.asarray(shared_masks, dtype=bool)
        if shared_masks.shape != (b, c.d_shared):
            raise ValueError(f"shared_masks must be {(b, c.d_shared)}, got {shared_masks.shape}")
    parts = _run_chunked(lambda xs, ms, ss: _dense_chunk(weights, xs, ms, ss),
                         b, threads, x, masks, shared_masks)
    return _dense_report(parts, "masked_dense", masks, c)


def _dense_report(parts, path: str, masks, c: MoEConfig) -> ForwardReport:
    counter = MacCounter()
    for _, cnt, _ in parts:
        counter.merge(cnt)
    y = np.concatenate([p[0] for p in parts])
    achieved = 0.0 if masks is None else 1.0 - masks.sum() / masks.size
    return ForwardReport(outputs=y, macs=counter, path_used=path,
                         achieved_routed_sparsity=float(achieved),
                         routing=_merge_routes([p[2] for p in parts]))


# -- sparse ----------------------------------------------------------------

def _sparse_chunk(weights: MoELayerWeights, x: np.ndarray, tau: float, capacity: int):
    counter = MacCounter()
    c = weights.config
    r, g, a = gate_stage(weights, x, counter)
    # threshold_mask applied to the already computed silu(gate).
    mask = np.abs(a).astype(np.float64) >= float(tau)
    flat, active, total = kernels.backend.compact(mask, r.topk_ids, capacity)
    y, tiles_run = kernels.backend.fused_updown(
        x, weights.up, weights.down_t, a, r.topk_ids, r.topk_weights, flat, total, c.tile)
    padded = int(tiles_run.sum()) * c.tile
    counter.add("up", c.d_model * padded)
    counter.add("down", c.d_model * padded)
    if c.has_shared:
        y = y + _shared(weights, x, counter)
    return y, counter, r, ActiveIndexBuffer(flat, active, total)


def forward_sparse(weights: MoELayerWeights, x, tau: float, threads: int = 1,
                   capacity: int | None = None) -> ForwardReport:
    """Gather-based sparse forward at threshold ``tau``.

    Routed neurons with ``|silu(gate)| < tau`` are skipped; the shared
    expert always runs dense.  ``capacity`` overrides the index-buffer
    size (default ``K * N`` rounded up to 32).
    """
    if not tau >= 0:
        raise ValueError("tau must be >= 0")
    c = weights.config
    cap = c.capacity if capacity is None else int(capacity)
    if cap < 0:
        raise ValueError("capacity must be >= 0")
    x = _prepare(weights, x)
    b = x.shape[0]
    parts = _run_chunked(lambda xs: _sparse_chunk(weights, xs, tau, cap), b, threads, x)
    counter = MacCounter()
    for p in parts:
        counter.merge(p[1])
    bufs = [p[3] for p in parts]
    buf = ActiveIndexBuffer(np.concatenate([q.flat_indices for q in bufs]),
                            np.concatenate([q.active_per_slot for q in bufs]),
                            np.concatenate([q.total_active for q in bufs]))
    tiles_total, tiles_skipped = tile_counts(buf.total_active, cap, c.tile)
    active = int(buf.total_active.sum())
    padded = int(np.sum(-(-buf.total_active // c.tile))) * c.tile
    return ForwardReport(
        outputs=np.concatenate([p[0] for p in parts]),
        macs=counter,
        path_used="sparse",
        achieved_routed_sparsity=1.0 - active / (b * c.top_k * c.d_ffn),
        tiles_total=tiles_total,
        tiles_skipped=tiles_skipped,
        active_neurons=active,
        padded_active=padded,
        routing=_merge_routes([p[2] for p in parts]),
        buffer=buf,
    )


# -- path switching --------------------------------------------------------

Timer = Callable[[str, int], float]


def wallclock_timer(weights: MoELayerWeights, tau: float, seed: int = 0, threads: int = 1) -> Timer:
    """Timer that runs one forward of ``path`` on a random batch of ``batch`` tokens."""
    rng = np.random.default_rng(seed)
    cache: dict[int, np.ndarray] = {}

    def timer(path: str, batch: int) -> float:
        if batch not in cache:
            cache[batch] = rng.standard_normal((batch, weights.config.d_model)).astype(np.float32)
        x = cache[batch]
        t0 = time.perf_counter()
        if path == "dense":
            forward_dense(weights, x, threads=threads)
        else:
            forward_sparse(weights, x, tau, threads=threads)
        return time.perf_counter() - t0

    return timer


def profile_tipping(weights: MoELayerWeights, tau: float, batch_grid, repeats: int = 5,
                    timer: Timer | None = None) -> SwitchTable:
    """Smallest grid batch where the dense median time is <= the sparse median.

    ``timer(path, batch)`` returns seconds for one run; the default times
    real forwards.  No crossing in the grid gives ``inf``.
    """
    grid = [int(b) for b in batch_grid]
    if not grid:
        raise ConfigError("batch grid is empty")
    if any(b < 1 for b in grid) or grid != sorted(grid):
        raise ConfigError("batch grid must be ascending positive integers")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    timer = timer or wallclock_timer(weights, tau)
    for b in grid:
        dense = statistics.median(timer("dense", b) for _ in range(repeats))
        sparse = statistics.median(timer("sparse", b) for _ in range(repeats))
        if dense <= sparse:
            return SwitchTable(b)
    return SwitchTable(INF)


def step(weights: MoELayerWeights, x, tau: float, switch: SwitchTable,
         threads: int = 1) -> ForwardReport:
    """Run one batch on the path the switch table picks for its size."""
    x = _prepare(weights, x)
    if switch.path_for(x.shape[0]) == "dense":
        return forward_dense(weights, x, threads=threads)
    return forward_sparse(weights, x, tau, threads=threads)
