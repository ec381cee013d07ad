"""Activation statistics and the sparsity-cutoff sweep."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .activation import silu, topk_mask
from .calibrate import CalibrationTable, lookup, routed_to_total
from .engine import forward_dense, forward_masked_dense, forward_sparse, routed_activations
from .model import ConfigError, MoELayerWeights

CSV_HEADER = ["target", "achieved_total", "achieved_routed", "quality", "rel_error", "path"]
ZERO_BIN_WIDTH = 0.006

Metric = Callable[[np.ndarray, np.ndarray], float]


@dataclass
class ActivationProfile:
    bin_width: float
    bins: dict[int, int]  # bin index -> count; bin i covers [(i-.5)w, (i+.5)w)
    per_neuron_counts: np.ndarray
    total_events: int
    bins_kept: dict[int, int] = field(default_factory=dict)

    @property
    def never_activated(self) -> int:
        return int(np.count_nonzero(self.per_neuron_counts == 0))

    def zero_bin_fraction(self) -> float:
        return self.bins.get(0, 0) / self.total_events if self.total_events else 0.0


def _histogram(h: np.ndarray, width: float) -> dict[int, int]:
    idx = np.floor(h.astype(np.float64) / width + 0.5).astype(np.int64)
    keys, counts = np.unique(idx, return_counts=True)
    return dict(zip(keys.tolist(), counts.tolist()))


def profile_expert(weights: MoELayerWeights, expert_id: int, tokens, sparsity: float,
                   bin_width: float = ZERO_BIN_WIDTH, routed_only: bool = False) -> ActivationProfile:
    """Histogram the SwiGLU output of one expert and count top-k survivors.

    Every token is fed through the expert unless ``routed_only``, in which
    case only tokens the router sends to it count.  Each token contributes
    ``d_ffn`` events.  ``per_neuron_counts[i]`` is how many of those tokens
    keep neuron ``i`` under ``topk_mask(h, sparsity)``.
    """
    c = weights.config
    if not 0 <= expert_id < c.n_experts:
        raise ValueError(f"expert_id {expert_id} not in [0, {c.n_experts})")
    x = np.ascontiguousarray(tokens, dtype=np.float32)
    if routed_only:
        r, _ = routed_activations(weights, x)
        x = x[np.any(r.topk_ids == expert_id, axis=1)]
    g = kernels.backend.batched_matvec(weights.gate[expert_id], x)
    u = kernels.backend.batched_matvec(weights.up[expert_id], x)
    h = silu(g) * u
    keep = topk_mask(h, sparsity)
    return ActivationProfile(
        bin_width=bin_width,
        bins=_histogram(h, bin_width),
        per_neuron_counts=keep.sum(axis=0).astype(np.int64),
        total_events=int(h.size),
        bins_kept=_histogram(h[keep], bin_width),
    )


def write_histogram(profile: ActivationProfile, path, kept: bool = False) -> None:
    bins = profile.bins_kept if kept else profile.bins
    with open(path, "w") as fh:
        for i in sorted(bins):
            fh.write(f"{i * profile.bin_width:.9g}\t{bins[i]}\n")


def write_neuron_counts(profile: ActivationProfile, path) -> None:
    with open(path, "w") as fh:
        for i, n in enumerate(profile.per_neuron_counts.tolist()):
            fh.write(f"{i}\t{n}\n")


# -- cutoff sweep ------------------------------------------------------------

def relative_errors(y: np.ndarray, y_dense: np.ndarray) -> np.ndarray:
    """Per-token ``||y - y_dense|| / ||y_dense||``, skipping ``||y_dense|| < 1e-12``."""
    ref = np.linalg.norm(y_dense.astype(np.float64), axis=1)
    diff = np.linalg.norm(y.astype(np.float64) - y_dense.astype(np.float64), axis=1)
    ok = ref >= 1e-12
    return diff[ok] / ref[ok]


def default_quality(y: np.ndarray, y_dense: np.ndarray) -> float:
    errs = relative_errors(y, y_dense)
    return 1.0 - float(errs.mean()) if errs.size else 1.0


@dataclass(frozen=True)
class SweepPoint:
    target: float
    achieved_total: float
    achieved_routed: float
    quality: float
    rel_error: float
    path: str


@dataclass
class SweepResult:
    points: list[SweepPoint]
    cutoff: float
    baseline_quality: float = 1.0


def find_cutoff(points, baseline: float, retention: float) -> float:
    """Largest target whose quality is at least ``retention * baseline``."""
    ok = [p.target for p in points if p.quality >= retention * baseline]
    return max(ok) if ok else 0.0


def sweep_cutoff(weights: MoELayerWeights, eval_tokens, targets, retention: float = 0.95,
                 mode: str = "R", metric: Metric | None = None, path: str = "topk",
                 table: CalibrationTable | None = None, threads: int = 1) -> SweepResult:
    """Quality against target sparsity, and the retention cutoff.

    ``path="topk"`` masks each slot with :func:`topk_mask` through the
    masked-dense forward (mode ``"R+S"`` masks the shared expert too).
    ``path="threshold"`` runs the sparse forward at ``lookup(table, s)``.
    """
    ts = [float(t) for t in targets]
    if not ts:
        raise ConfigError("no sweep targets")
    if ts != sorted(ts):
        raise ConfigError("sweep targets must be ascending")
    if not 0 < retention <= 1:
        raise ConfigError("retention must be in (0, 1]")
    if mode not in ("R", "R+S"):
        raise ConfigError(f"mode must be 'R' or 'R+S', got {mode!r}")
    if path not in ("topk", "threshold"):
        raise ConfigError(f"path must be 'topk' or 'threshold', got {path!r}")
    if path == "threshold" and (table is None or mode != "R"):
        raise ConfigError("the threshold path needs a calibration table and mode 'R'")

    c = weights.config
    metric = metric or default_quality
    x = np.ascontiguousarray(eval_tokens, dtype=np.float32)
    b = x.shape[0]
    y_dense = forward_dense(weights, x, threads=threads).outputs
    baseline = float(metric(y_dense, y_dense))
    routed_total = b * c.top_k * c.d_ffn

    if path == "topk":
        _, h = routed_activations(weights, x)
        h_shared = None
        if mode == "R+S" and c.has_shared:
            g = kernels.backend.batched_matvec(weights.shared_gate, x)
            u = kernels.backend.batched_matvec(weights.shared_up, x)
            h_shared = silu(g) * u

    points = []
    for t in ts:
        if path == "topk":
            masks = topk_mask(h, t)
            smask = topk_mask(h_shared, t) if h_shared is not None else None
            y = forward_masked_dense(weights, x, masks, smask, threads=threads).outputs
            off_r = routed_total - int(masks.sum())
            s_routed = off_r / routed_total
            if smask is not None:
                off_s = smask.size - int(smask.sum())
                s_total = (off_r + off_s) / (b * (c.top_k * c.d_ffn + c.d_shared))
            else:
                s_total = routed_to_total(s_routed, c.top_k, c.d_ffn, c.d_shared)
            label = "masked_dense"
        else:
            rep = forward_sparse(weights, x, lookup(table, t), threads=threads)
            y = rep.outputs
            s_routed = rep.achieved_routed_sparsity
            s_total = routed_to_total(s_routed, c.top_k, c.d_ffn, c.d_shared)
            label = "sparse"
        errs = relative_errors(y, y_dense)
        points.append(SweepPoint(
            target=t,
            achieved_total=s_total,
            achieved_routed=s_routed,
            quality=float(metric(y, y_dense)),
            rel_error=float(errs.mean()) if errs.size else 0.0,
            path=label,
        ))
    return SweepResult(points, find_cutoff(points, baseline, retention), baseline)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def emit_report(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for p in result.points:
            w.writerow([_fmt(p.target), _fmt(p.achieved_total), _fmt(p.achieved_routed),
                        _fmt(p.quality), _fmt(p.rel_error), p.path])
        fh.write(f"# cutoff={_fmt(result.cutoff)}\n")


def parse_report(path) -> SweepResult:
    points, cutoff = [], math.nan
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    for ln in lines:
        if ln.startswith("# cutoff="):
            cutoff = float(ln.split("=", 1)[1])
    rows = list(csv.reader(body))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError("missing or malformed CSV header")
    for row in rows[1:]:
        points.append(SweepPoint(*(float(v) for v in row[:5]), row[5]))
    return SweepResult(points, cutoff)
