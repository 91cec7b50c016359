import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import mask_rule, random_kinds, rotate_reference
from upix.attention import AttentionMask, RopeParams, apply_rope, attention_forward, build_hybrid_mask
from upix.autodiff import ShapeError
from upix.tokens import SegmentKind as K


@given(st.integers(0, 2**32 - 1))
def test_mask_matches_rule(seed):
    kinds = random_kinds(np.random.default_rng(seed))
    np.testing.assert_array_equal(build_hybrid_mask(kinds).allowed, mask_rule(kinds))


def test_mask_examples():
    m = build_hybrid_mask([K.TEXT, K.TEXT, K.TIMESTEP, K.GENERATION, K.GENERATION]).allowed
    assert not m[0, 1]  # text is causal
    assert not m[2, 3]  # the timestep row is causal too
    assert m[3, 4] and m[3, 0]  # generation rows see everything
    assert build_hybrid_mask([K.GENERATION] * 3).allowed.all()


def test_mask_rejects_bad_input():
    with pytest.raises(ValueError):
        build_hybrid_mask([])
    with pytest.raises(ValueError):
        build_hybrid_mask([K.GENERATION, K.TEXT])
    with pytest.raises(ValueError):
        AttentionMask(np.zeros((2, 2), dtype=bool))


def test_rope_split_default():
    assert RopeParams.default(16).split == (8, 4, 4)
    with pytest.raises(ValueError):
        RopeParams(10000.0, (3, 4, 4))


def test_rope_identity_at_origin():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2, 5, 16))
    out = apply_rope(v, np.zeros((5, 3)), RopeParams.default(16))
    np.testing.assert_array_equal(out.data, v)


def test_rope_matches_pairwise_reference():
    rng = np.random.default_rng(1)
    params = RopeParams.default(16)
    v = rng.normal(size=(4, 16))
    pos = np.array([[0, -1, -1], [3, 1, 2], [7, 0, 5], [11, 4, 4]])
    out = apply_rope(v, pos, params).data
    for i in range(4):
        np.testing.assert_allclose(out[i], rotate_reference(v[i], pos[i], params.base, params.split), atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_rope_relative_shift(seed):
    rng = np.random.default_rng(seed)
    params = RopeParams.default(8)
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    pq, pk = rng.integers(0, 20, size=(1, 3)), rng.integers(0, 20, size=(1, 3))
    shift = rng.integers(0, 20, size=(1, 3))
    a = apply_rope(q, pq, params).data @ apply_rope(k, pk, params).data.T
    b = apply_rope(q, pq + shift, params).data @ apply_rope(k, pk + shift, params).data.T
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_attention_masked_keys_have_no_influence():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
    mask = build_hybrid_mask([K.TEXT, K.TEXT, K.TEXT])
    out = attention_forward(q, k, v, mask).data
    v2 = v.copy()
    v2[2] += 100.0
    np.testing.assert_array_equal(out[:2], attention_forward(q, k, v2, mask).data[:2])
    np.testing.assert_allclose(out[0], v[0])


def test_attention_shape_checks():
    with pytest.raises(ShapeError):
        attention_forward(np.ones((3, 4)), np.ones((3, 4)), np.ones((3, 4)), np.ones((2, 2), dtype=bool))
