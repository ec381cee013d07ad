import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moe_sparsekit.model import ConfigError
from moe_sparsekit.router import SENTINEL, RouteResult, align_dispatch, combine, route


def test_symmetric_tie_goes_to_lower_id():
    r = route([[0.0, 0.0]], 2)
    assert r.topk_ids.tolist() == [[0, 1]]
    np.testing.assert_allclose(r.topk_weights, [[0.5, 0.5]])


def test_argmax_renormalized():
    r = route([[1.0, 3.0, 2.0]], 1)
    assert r.topk_ids.tolist() == [[1]] and r.topk_weights.tolist() == [[1.0]]


def test_hand_softmax():
    r = route([[0.0, math.log(2), 0.0, 0.0]], 2)
    assert r.topk_ids.tolist() == [[1, 0]]
    np.testing.assert_allclose(r.topk_weights, [[2 / 3, 1 / 3]], rtol=1e-6)
    raw = route([[0.0, math.log(2), 0.0, 0.0]], 2, renormalize=False)
    np.testing.assert_allclose(raw.topk_weights, [[0.4, 0.2]], rtol=1e-6)


def test_route_errors():
    with pytest.raises(ConfigError):
        route([[0.0, 1.0]], 3)
    with pytest.raises(ValueError):
        route(np.zeros((0, 3)), 1)


def test_softmax_is_stable_for_large_logits():
    r = route([[1000.0, 999.0, -1000.0]], 2, renormalize=False)
    assert np.all(np.isfinite(r.topk_weights)) and r.topk_ids.tolist() == [[0, 1]]


@given(st.integers(1, 8), st.integers(1, 10), st.integers(0, 2**31), st.booleans())
def test_route_invariants(b, e, seed, renorm):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, e + 1))
    logits = rng.standard_normal((b, e)) * 3
    r = route(logits, k, renorm)
    for row_ids, row_w in zip(r.topk_ids, r.topk_weights):
        assert len(set(row_ids.tolist())) == k
        assert np.all(row_w > 0) and np.all(row_w <= 1)
        assert np.all(np.diff(row_w.astype(np.float64)) <= 1e-7)
        if renorm:
            assert abs(float(row_w.astype(np.float64).sum()) - 1) <= 1e-5


def test_align_examples():
    p = align_dispatch(RouteResult(np.array([[3]]), np.ones((1, 1), np.float32)), 4, 4)
    assert p.sorted_token_slots.tolist() == [0, SENTINEL, SENTINEL, SENTINEL]
    assert p.expert_of_block.tolist() == [3]
    p = align_dispatch(RouteResult(np.array([[1], [1]]), np.ones((2, 1), np.float32)), 4, 2)
    assert p.sorted_token_slots.tolist() == [0, 1] and p.expert_of_block.tolist() == [1]
    with pytest.raises(ConfigError):
        align_dispatch(RouteResult(np.array([[1]]), np.ones((1, 1), np.float32)), 4, 0)


def test_align_permutation_200_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        b, e = int(rng.integers(1, 20)), int(rng.integers(1, 9))
        k, m = int(rng.integers(1, e + 1)), int(rng.integers(1, 9))
        r = route(rng.standard_normal((b, e)), k)
        p = align_dispatch(r, e, m)
        s = p.sorted_token_slots
        assert p.n_padded % m == 0 and p.n_padded <= b * k + e * (m - 1)
        real = s[s != SENTINEL]
        assert sorted(real.tolist()) == list(range(b * k))
        flat = r.topk_ids.reshape(-1)
        for blk, expert in enumerate(p.expert_of_block):
            ent = s[blk * m:(blk + 1) * m]
            assert np.all(flat[ent[ent != SENTINEL]] == expert)
        assert np.all(np.diff(p.expert_of_block) >= 0)
        assert set(p.expert_of_block.tolist()) == set(flat.tolist())


def test_combine_examples():
    v = np.array([1.0, -2.0, 3.0], dtype=np.float32)
    one = RouteResult(np.array([[0]]), np.ones((1, 1), np.float32))
    np.testing.assert_array_equal(combine(v[None, None], one), v[None])
    half = RouteResult(np.array([[0, 1]]), np.full((1, 2), 0.5, np.float32))
    np.testing.assert_array_equal(combine(np.stack([v, -v])[None], half), [[0, 0, 0]])
    thirds = RouteResult(np.array([[0, 1]]), np.array([[2 / 3, 1 / 3]], np.float32))
    np.testing.assert_allclose(combine(np.array([[[3, 0], [0, 3]]], np.float32), thirds), [[2, 1]], rtol=1e-6)
    with pytest.raises(RuntimeError):
        combine(np.zeros((1, 1, 2)), half)
