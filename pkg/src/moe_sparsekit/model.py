"""MoE layer shapes, synthetic weights and the ``MOE1`` weight file.

Synthetic weights come from splitmix64 (Steele, Lea & Flood's 64-bit
mixer, the seeding generator of xoshiro):

    state += 0x9E3779B97F4A7C15
    z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

all modulo 2**64, starting from ``state = seed``.  The top 24 bits of each
output give ``u = (out >> 40) / 2**24`` in [0, 1) and the weight is
``float32((2u - 1) * scale)``.  One stream fills the matrices in file
order: router, then gate, up, down_T for each expert, then the shared
gate, up, down_T.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TILE = 64
MAGIC = b"MOE1"
_HEADER = struct.Struct("<4s6I")
HEADER_SIZE = _HEADER.size

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class ConfigError(ValueError):
    """Invalid layer configuration or parameter."""


class WeightFormatError(ValueError):
    """A weight file that cannot be decoded; ``offset`` is where it broke."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int
    top_k: int
    d_model: int
    d_ffn: int
    d_shared: int = 0
    renormalize: bool = True
    align_block: int = 64
    tile: int = TILE

    def __post_init__(self):
        for name in ("n_experts", "top_k", "d_model", "d_ffn", "align_block"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.top_k > self.n_experts:
            raise ConfigError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.d_shared < 0:
            raise ConfigError("d_shared must be >= 0")
        if self.tile != TILE:
            raise ConfigError(f"tile is fixed at {TILE}")

    @property
    def has_shared(self) -> bool:
        return self.d_shared > 0

    @property
    def capacity(self) -> int:
        """Default active-index capacity: ``K * N`` rounded up to 32."""
        k = self.top_k * self.d_ffn
        return (k + 31) // 32 * 32


@dataclass
class MoELayerWeights:
    """Router plus stacked expert matrices, all float32 and row-major.

    ``gate``, ``up`` and ``down_t`` are ``[E, N, D]``; ``down_t[e]`` is the
    transpose of expert ``e``'s ``D x N`` down projection.
    """

    config: MoEConfig
    router: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    down_t: np.ndarray
    shared_gate: np.ndarray | None = None
    shared_up: np.ndarray | None = None
    shared_down_t: np.ndarray | None = None

    def __post_init__(self):
        c = self.config
        e, n, d, s = c.n_experts, c.d_ffn, c.d_model, c.d_shared
        want = {"router": (e, d), "gate": (e, n, d), "up": (e, n, d), "down_t": (e, n, d)}
        if c.has_shared:
            want |= {"shared_gate": (s, d), "shared_up": (s, d), "shared_down_t": (s, d)}
        elif any(m is not None for m in (self.shared_gate, self.shared_up, self.shared_down_t)):
            raise ConfigError("shared matrices given but config.d_shared == 0")
        for name, shape in want.items():
            arr = getattr(self, name)
            if arr is None:
                raise ConfigError(f"missing {name}")
            arr = np.array(arr, dtype=np.float32, order="C")
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")
            arr.flags.writeable = False
            setattr(self, name, arr)

    def matrices(self) -> list[np.ndarray]:
        """All matrices in file order, each as a 2-D view."""
        out = [self.router]
        for e in range(self.config.n_experts):
            out += [self.gate[e], self.up[e], self.down_t[e]]
        if self.config.has_shared:
            out += [self.shared_gate, self.shared_up, self.shared_down_t]
        return out

    def equals(self, other: MoELayerWeights) -> bool:
        """Bitwise equality of config and every matrix."""
        if self.config != other.config:
            return False
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.matrices(), other.matrices()))


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` splitmix64 outputs for ``seed`` as uint64."""
    steps = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed % 2**64) + steps * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _shapes(config: MoEConfig) -> list[tuple[int, int]]:
    c = config
    shapes = [(c.n_experts, c.d_model)] + [(c.d_ffn, c.d_model)] * (3 * c.n_experts)
    if c.has_shared:
        shapes += [(c.d_shared, c.d_model)] * 3
    return shapes


def _assemble(config: MoEConfig, mats: list[np.ndarray]) -> MoELayerWeights:
    e = config.n_experts
    experts = mats[1:1 + 3 * e]
    kw = {}
    if config.has_shared:
        kw = dict(shared_gate=mats[-3], shared_up=mats[-2], shared_down_t=mats[-1])
    return MoELayerWeights(
        config=config,
        router=mats[0],
        gate=np.stack(experts[0::3]),
        up=np.stack(experts[1::3]),
        down_t=np.stack(experts[2::3]),
        **kw,
    )


def generate_synthetic(config: MoEConfig, seed: int, scale: float = 0.1) -> MoELayerWeights:
    """Deterministic uniform ``[-scale, scale]`` weights from one splitmix64 stream."""
    if not scale > 0:
        raise ConfigError("scale must be > 0")
    shapes = _shapes(config)
    total = sum(r * c for r, c in shapes)
    u = (splitmix64(seed, total) >> np.uint64(40)).astype(np.float64) / 2.0**24
    values = ((2.0 * u - 1.0) * scale).astype(np.float32)
    mats, pos = [], 0
    for r, c in shapes:
        mats.append(values[pos:pos + r * c].reshape(r, c))
        pos += r * c
    return _assemble(config, mats)


def file_size(config: MoEConfig) -> int:
    return HEADER_SIZE + 4 * sum(r * c for r, c in _shapes(config))


def save_weights(w: MoELayerWeights, path) -> None:
    c = w.config
    flags = (1 if c.has_shared else 0) | (2 if c.renormalize else 0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, c.n_experts, c.top_k, c.d_model, c.d_ffn, c.d_shared, flags))
        for m in w.matrices():
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_weights(path) -> MoELayerWeights:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise WeightFormatError("truncated header", len(data))
    magic, e, k, d, n, s, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}", 0)
    if flags & ~3:
        raise WeightFormatError(f"unknown flag bits {flags:#x}", 24)
    if bool(flags & 1) != (s > 0):
        raise WeightFormatError("has_shared flag disagrees with d_shared", 24)
    try:
        config = MoEConfig(n_experts=e, top_k=k, d_model=d, d_ffn=n, d_shared=s,
                           renormalize=bool(flags & 2))
    except ConfigError as exc:
        raise WeightFormatError(f"invalid header: {exc}", 4) from None
    mats, pos = [], HEADER_SIZE
    for r, cols in _shapes(config):
        nbytes = 4 * r * cols
        if pos + nbytes > len(data):
            raise WeightFormatError(f"truncated: need {nbytes} bytes for a {r}x{cols} matrix", pos)
        mats.append(np.frombuffer(data, dtype="<f4", count=r * cols, offset=pos)
                    .astype(np.float32).reshape(r, cols))
        pos += nbytes
    if pos != len(data):
        raise WeightFormatError(f"{len(data) - pos} trailing bytes", pos)
    for m in mats:
        if not np.all(np.isfinite(m)):
            raise WeightFormatError("non-finite weight value", HEADER_SIZE)
    return _assemble(config, mats)
