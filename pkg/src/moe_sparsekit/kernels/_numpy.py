"""Pure-numpy kernels.

Vectorized over the independent axes (tokens, rows, output lanes) and
looped over the reduction axis, so each output element sees the same
float32 add sequence as the compiled kernels.
"""
import numpy as np

# Bounds the gathered [tokens, tile, D] scratch in fused_updown.
_TOKEN_CHUNK = 256


def batched_matvec(w, x):
    out = np.zeros((x.shape[0], w.shape[0]), dtype=np.float32)
    for j in range(w.shape[1]):
        out += x[:, j, None] * w[None, :, j]
    return out


def grouped_proj(w, x, sorted_slots, expert_of_block, block, top_k):
    out = np.zeros((x.shape[0] * top_k, w.shape[1]), dtype=np.float32)
    for blk, e in enumerate(expert_of_block):
        slots = sorted_slots[blk * block:(blk + 1) * block]
        slots = slots[slots >= 0]
        if slots.size == 0:
            continue
        out[slots] = batched_matvec(w[e], x[slots // top_k])
    return out


def down_proj(w_t, h, expert_ids):
    out = np.zeros((h.shape[0], w_t.shape[2]), dtype=np.float32)
    for e in np.unique(expert_ids):
        rows = np.flatnonzero(expert_ids == e)
        acc = np.zeros((rows.size, w_t.shape[2]), dtype=np.float32)
        he = h[rows]
        for k in range(h.shape[1]):
            acc += w_t[e, k][None, :] * he[:, k, None]
        out[rows] = acc
    return out


def gathered_matvec_t(w_t, idx, h):
    out = np.zeros(w_t.shape[1], dtype=np.float32)
    for k in range(idx.shape[0]):
        out += w_t[idx[k]] * h[k]
    return out


def compact(mask, topk_ids, capacity):
    b, k_slots, n = mask.shape
    counts = mask.sum(axis=2, dtype=np.int64)
    incl = np.minimum(np.cumsum(counts, axis=1), capacity)
    excl = np.minimum(np.cumsum(counts, axis=1) - counts, capacity)
    active = incl - excl
    total = incl[:, -1].copy() if k_slots else np.zeros(b, dtype=np.int64)

    flat_mask = mask.reshape(b, k_slots * n)
    pos = np.cumsum(flat_mask, axis=1) - 1
    values = (topk_ids[:, :, None] * n + np.arange(n)[None, None, :]).reshape(b, k_slots * n)
    keep = flat_mask & (pos < capacity)
    flat = np.full((b, capacity), -1, dtype=np.int64)
    rows, cols = np.nonzero(keep)
    flat[rows, pos[rows, cols]] = values[rows, cols]
    return flat, active, total


def fused_updown(x, w_up, w_down_t, act, topk_ids, topk_w, flat, total, tile):
    b, d = x.shape
    n = w_up.shape[1]
    y = np.zeros((b, d), dtype=np.float32)
    tiles_run = (total + tile - 1) // tile
    for c0 in range(0, b, _TOKEN_CHUNK):
        c1 = min(b, c0 + _TOKEN_CHUNK)
        _fused_chunk(x[c0:c1], w_up, w_down_t, act[c0:c1], topk_ids[c0:c1],
                     topk_w[c0:c1], flat[c0:c1], total[c0:c1], tile, n, y[c0:c1])
    return y, tiles_run.astype(np.int64)


def _fused_chunk(x, w_up, w_down_t, act, topk_ids, topk_w, flat, total, tile, n, y):
    d = x.shape[1]
    capacity = flat.shape[1]
    for start in range(0, capacity, tile):
        sel = np.flatnonzero(total > start)
        if sel.size == 0:
            break
        stop = min(start + tile, capacity)
        lanes = np.arange(start, stop)
        valid = lanes[None, :] < total[sel, None]
        fr = np.where(valid, flat[sel, start:stop], 0)
        e = fr // n
        i = fr - e * n
        slot = np.argmax(topk_ids[sel, None, :] == e[:, :, None], axis=2)
        rw = np.take_along_axis(topk_w[sel], slot, axis=1)
        ag = act[sel[:, None], slot, i]

        wu = w_up[e, i]
        acc = np.zeros(fr.shape, dtype=np.float32)
        xs = x[sel]
        for j in range(d):
            acc += wu[:, :, j] * xs[:, j, None]
        h = np.where(valid, rw * ag * acc, np.float32(0.0))

        wd = w_down_t[e, i]
        partial = np.zeros((sel.size, d), dtype=np.float32)
        for lane in range(stop - start):
            partial += wd[:, lane, :] * h[:, lane, None]
        y[sel] += partial
