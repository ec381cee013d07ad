"""Target-sparsity to threshold lookup table, built at startup from sample tokens.

Only routed experts are masked, so a requested *total* sparsity ``s`` has
to be met by a higher *routed* sparsity once the always-dense shared
expert's ``d_shared`` neurons are counted in::

    s_routed = min(1, s_total * (K*N + d_shared) / (K*N))
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .engine import gate_stage
from .model import ConfigError, MoELayerWeights

TABLE_HEADER = "# moe-sparsekit calib v1"
DEFAULT_TARGETS = (0.60, 0.70, 0.80, 0.85, 0.87)


class CalibrationError(ValueError):
    """Calibration input or table file is unusable."""


def _exact(x: float) -> Fraction:
    # Shortest decimal repr, so 0.85 means 17/20 rather than its binary neighbour.
    return Fraction(repr(float(x)))


def total_to_routed(s_total: float, k: int, d_ffn: int, d_shared: int = 0) -> float:
    routed = k * d_ffn
    if routed <= 0:
        raise ConfigError("K * d_ffn must be positive")
    if d_shared < 0:
        raise ConfigError("d_shared must be >= 0")
    return float(min(Fraction(1), _exact(s_total) * Fraction(routed + d_shared, routed)))


def routed_to_total(s_routed: float, k: int, d_ffn: int, d_shared: int = 0) -> float:
    """Inverse of :func:`total_to_routed` below its clamp."""
    routed = k * d_ffn
    if routed <= 0:
        raise ConfigError("K * d_ffn must be positive")
    return float(_exact(s_routed) * Fraction(routed, routed + d_shared))


@dataclass(frozen=True)
class CalibrationTable:
    targets: np.ndarray  # float64, strictly increasing total sparsity
    thresholds: np.ndarray  # float32, non-decreasing

    def __post_init__(self):
        t = np.array([float(f"{v:.9g}") for v in np.asarray(self.targets, dtype=np.float64)])
        tau = np.asarray(self.thresholds, dtype=np.float32).copy()
        if t.size == 0 or t.shape != tau.shape:
            raise CalibrationError("table needs matching, non-empty targets and thresholds")
        if np.any(np.diff(t) <= 0):
            raise CalibrationError("targets must be strictly increasing")
        if np.any(np.diff(tau) < 0) or np.any(tau < 0) or not np.all(np.isfinite(tau)):
            raise CalibrationError("thresholds must be finite, >= 0 and non-decreasing")
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "thresholds", tau)

    def __len__(self) -> int:
        return int(self.targets.size)

    def entries(self) -> list[tuple[float, float]]:
        return list(zip(self.targets.tolist(), self.thresholds.astype(np.float64).tolist()))


def lookup(table: CalibrationTable, target: float) -> float:
    """Linear interpolation between entries, clamped to the end entries."""
    return float(np.interp(float(target), table.targets, table.thresholds.astype(np.float64)))


def _reservoir(chunks, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Algorithm R over a stream of 1-D chunks, vectorized per chunk."""
    res = np.empty(cap, dtype=np.float32)
    seen = 0
    for chunk in chunks:
        m = chunk.size
        fill = max(0, min(m, cap - seen))
        res[seen:seen + fill] = chunk[:fill]
        rest = chunk[fill:]
        if rest.size:
            idx = np.arange(seen + fill, seen + m)
            j = rng.integers(0, idx + 1)
            hit = np.flatnonzero(j < cap)
            # Sequential semantics: the last replacement of a slot wins.
            slots, last = np.unique(j[hit][::-1], return_index=True)
            res[slots] = rest[hit[::-1][last]]
        seen += m
    return res[:min(seen, cap)]


def collect_magnitudes(weights: MoELayerWeights, tokens, sample_cap: int = 1 << 17,
                       seed: int = 0, chunk_tokens: int = 256) -> np.ndarray:
    """``|silu(gate)|`` for every routed (token, slot, neuron), reservoir-sampled.

    Returns the sample sorted ascending.
    """
    x = np.asarray(tokens, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("tokens must be a non-empty [B, D] matrix")
    if sample_cap < 1:
        raise ValueError("sample_cap must be >= 1")

    def stream():
        for s in range(0, x.shape[0], chunk_tokens):
            _, _, act = gate_stage(weights, x[s:s + chunk_tokens])
            yield np.abs(act).reshape(-1)

    sample = _reservoir(stream(), sample_cap, np.random.default_rng(seed))
    return np.sort(sample)


def build_table(sample, targets, k: int, d_ffn: int, d_shared: int = 0) -> CalibrationTable:
    """Nearest-rank upper quantile per target.

    For routed target ``s`` over a sorted sample of size ``n`` the threshold
    is ``sample[min(n - 1, ceil(s * n))]``, so masking ``|a| < tau`` drops
    about a fraction ``s`` of the sample.  A routed target of exactly 0 maps
    to ``tau = 0`` (nothing masked).
    """
    a = np.asarray(sample, dtype=np.float32)
    if a.size == 0:
        raise CalibrationError("empty magnitude sample")
    if np.any(np.diff(a) < 0):
        a = np.sort(a)
    ts = [float(t) for t in targets]
    if not ts:
        raise CalibrationError("no targets")
    if any(not 0.0 <= t < 1.0 for t in ts):
        raise CalibrationError("targets must lie in [0, 1)")
    if any(b <= a_ for a_, b in zip(ts, ts[1:])):
        raise CalibrationError("targets must be strictly increasing")
    n = a.size
    taus = []
    for t in ts:
        s = total_to_routed(t, k, d_ffn, d_shared)
        if s == 0.0:
            taus.append(0.0)
            continue
        rank = min(n - 1, math.ceil(s * n - 1e-9))
        taus.append(a[rank])
    return CalibrationTable(np.array(ts), np.array(taus, dtype=np.float32))


def calibrate(weights: MoELayerWeights, tokens, targets=DEFAULT_TARGETS,
              sample_cap: int = 1 << 17, seed: int = 0) -> CalibrationTable:
    c = weights.config
    sample = collect_magnitudes(weights, tokens, sample_cap, seed)
    return build_table(sample, targets, c.top_k, c.d_ffn, c.d_shared)


def save_table(table: CalibrationTable, path) -> None:
    lines = [TABLE_HEADER]
    lines += [f"{t:.9g}\t{float(tau):.9g}" for t, tau in zip(table.targets, table.thresholds)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_table(path) -> CalibrationTable:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != TABLE_HEADER:
        raise CalibrationError(f"missing header {TABLE_HEADER!r}")
    targets, taus = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CalibrationError(f"line {lineno}: expected '<target>\\t<threshold>'")
        try:
            targets.append(float(parts[0]))
            taus.append(float(parts[1]))
        except ValueError:
            raise CalibrationError(f"line {lineno}: not a number") from None
    return CalibrationTable(np.array(targets), np.array(taus, dtype=np.float32))
