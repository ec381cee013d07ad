import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from moe_sparsekit.activation import (
    SENTINEL,
    compact_active,
    round_half_up,
    silu,
    swiglu_rows,
    threshold_mask,
    topk_mask,
)


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def test_silu():
    assert silu(0.0) == 0.0
    assert abs(silu(30.0) / 30.0 - 1) < 1e-7
    for v in (-3.0, -0.7, 0.25, 4.0):
        assert silu(v) == pytest.approx(v * sigmoid(v), rel=1e-6)
    assert silu(-1e4) == 0.0 and np.isfinite(silu(np.float32(-1e4)))


def test_swiglu_rows():
    np.testing.assert_array_equal(swiglu_rows([1, 2, 3], [0, 0, 0]), [0, 0, 0])
    np.testing.assert_array_equal(swiglu_rows([0, 0], [5, 6]), [0, 0])
    assert swiglu_rows([1.0], [2.0])[0] == pytest.approx(2 * sigmoid(1.0), rel=1e-6)
    assert swiglu_rows([1.0], [2.0])[0] == pytest.approx(1.4621, abs=1e-4)
    with pytest.raises(ValueError):
        swiglu_rows([1, 2], [1])


def test_round_half_up():
    assert [round_half_up(v) for v in (0.5, 1.5, 2.5, 0.35 * 10, 2.4999)] == [1, 2, 3, 4, 2]


def test_topk_mask_examples():
    assert topk_mask([1, 2, 3], 0).all()
    assert not topk_mask([1, 2, 3], 1).any()
    m = topk_mask([0.1, -0.5, 0.3, 0.05], 0.5)
    assert m.tolist() == [False, True, True, False]
    # Equal magnitudes: the lower index is masked first.
    assert topk_mask([1.0, -1.0, 1.0, 2.0], 0.5).tolist() == [False, False, True, True]


@pytest.mark.parametrize("s", [0, 0.25, 0.5, 0.9, 1])
def test_topk_mask_count(s):
    rng = np.random.default_rng(3)
    for n in range(1, 65):
        m = topk_mask(rng.standard_normal(n), s)
        assert (n - m.sum()) == round_half_up(s * n)


@given(arrays(np.float32, st.integers(1, 40), elements=st.floats(-5, 5, width=32)),
       st.floats(0, 1))
def test_topk_mask_keeps_largest(h, s):
    m = topk_mask(h, s)
    if m.any() and (~m).any():
        assert np.abs(h[m]).min() >= np.abs(h[~m]).max()


def test_threshold_mask_examples():
    assert threshold_mask([-3.0, 0.0, 2.0], 0).all()
    g = np.array([2.0, -2.0, 0.01])
    assert not threshold_mask(g, float(np.abs(silu(g)).max()) + 1e-3).any()
    assert threshold_mask(g, 0.5).tolist() == [True, False, False]
    with pytest.raises(ValueError):
        threshold_mask(g, -1)


def test_threshold_inclusive_at_tau():
    g = np.array([1.0], dtype=np.float32)
    assert threshold_mask(g, float(silu(g)[0]))[0]


@given(arrays(np.float32, st.integers(1, 40), elements=st.floats(-6, 6, width=32)),
       st.lists(st.floats(0, 3), min_size=2, max_size=6))
def test_threshold_active_count_monotone(g, taus):
    counts = [threshold_mask(g, t).sum() for t in sorted(taus)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_compact_examples():
    b = compact_active(np.zeros((2, 4), bool), [0, 1], 8)
    assert b.total_active.tolist() == [0] and np.all(b.flat_indices == SENTINEL)
    b = compact_active([[True, False, True, False]], [2], 4)
    assert b.flat_indices[0].tolist() == [8, 10, -1, -1]
    assert b.active_per_slot.tolist() == [[2]]
    b = compact_active([[True, True, True]], [0], 1)
    assert b.total_active.tolist() == [1] and b.flat_indices[0].tolist() == [0]
    assert b.active_per_slot.tolist() == [[1]]
    with pytest.raises(ValueError):
        compact_active([[True]], [0], -1)


def test_compact_overflow_clamps_per_slot():
    m = np.ones((3, 4), bool)
    b = compact_active(m, [5, 0, 2], 6)
    assert b.active_per_slot.tolist() == [[4, 2, 0]]
    assert b.flat_indices[0].tolist() == [20, 21, 22, 23, 0, 1]


@given(st.integers(1, 4), st.integers(1, 20), st.integers(0, 2**31))
def test_compact_round_trip(k, n, seed):
    rng = np.random.default_rng(seed)
    b_tok = 3
    masks = rng.random((b_tok, k, n)) < rng.random()
    ids = np.stack([rng.permutation(8)[:k] for _ in range(b_tok)])
    buf = compact_active(masks, ids, k * n)
    np.testing.assert_array_equal(buf.to_masks(ids, n), masks)
    for t in range(b_tok):
        ta = buf.total_active[t]
        assert ta == buf.active_per_slot[t].sum() == masks[t].sum()
        assert np.all(buf.flat_indices[t, :ta] >= 0) and np.all(buf.flat_indices[t, ta:] == SENTINEL)
        # Slot-major, neuron ascending within a slot.
        pos = 0
        for slot in range(k):
            cnt = buf.active_per_slot[t, slot]
            got = buf.flat_indices[t, pos:pos + cnt]
            np.testing.assert_array_equal(got, ids[t, slot] * n + np.flatnonzero(masks[t, slot]))
            pos += cnt
