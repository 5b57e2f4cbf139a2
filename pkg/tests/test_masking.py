import numpy as np
import pytest

from melanchor import tensor as tc
from melanchor.masking import MaskSpec, MaskVector, apply_mask, sample_block_mask


def test_mask_fraction_in_range_t1000():
    spec = MaskSpec()
    for seed in range(1000):
        mv = sample_block_mask(1000, spec, np.random.default_rng(seed))
        assert 0.40 <= mv.fraction <= 0.65, (seed, mv.fraction)
        for _, length in mv.spans:
            assert 10 <= length <= 25


def test_mask_full_coverage():
    spec = MaskSpec(span_min=1, span_max=50, ratio_min=1.0, ratio_max=1.0)
    mv = sample_block_mask(30, spec, np.random.default_rng(0))
    assert mv.n_masked == 30


def test_mask_degenerate_short_t():
    spec = MaskSpec()
    for seed in range(50):
        rng = np.random.default_rng(seed)
        r_preview = np.random.default_rng(seed).uniform(0.40, 0.65)
        mv = sample_block_mask(5, spec, rng)
        assert mv.n_masked == int(np.ceil(r_preview * 5))
        idx = mv.masked_idx
        assert np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size))


def test_mask_spans_contiguous_union():
    spec = MaskSpec()
    mv = sample_block_mask(500, spec, np.random.default_rng(3))
    union = np.zeros(500, dtype=bool)
    for start, length in mv.spans:
        union[start:min(500, start + length)] = True
    # final mask is the union minus whatever the last span trimmed
    assert np.all(union[~mv.keep])


def test_mask_deterministic():
    spec = MaskSpec()
    a = sample_block_mask(200, spec, np.random.default_rng(7))
    b = sample_block_mask(200, spec, np.random.default_rng(7))
    assert np.array_equal(a.keep, b.keep)


def test_apply_mask_all_kept():
    z = tc.constant(np.random.default_rng(0).normal(size=(6, 4)))
    t_mask = tc.constant(np.ones(4))
    out = apply_mask(z, np.ones(6, dtype=bool), t_mask)
    assert np.array_equal(out.value, z.value)


def test_apply_mask_all_masked():
    z = tc.constant(np.random.default_rng(1).normal(size=(6, 4)))
    tm = np.random.default_rng(2).normal(size=4)
    out = apply_mask(z, np.zeros(6, dtype=bool), tc.constant(tm))
    assert np.allclose(out.value, np.tile(tm, (6, 1)))


def test_apply_mask_rowwise():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(10, 5))
    tm = rng.normal(size=5)
    keep = rng.random(10) < 0.5
    out = apply_mask(tc.constant(z), keep, tc.constant(tm))
    for i in range(10):
        expected = z[i] if keep[i] else tm
        assert np.allclose(out.value[i], expected)


def test_apply_mask_gradient_reaches_t_mask_only_when_masked():
    rng = np.random.default_rng(4)
    st = tc.ParamStore()
    z = st.add("z", rng.normal(size=(6, 3)))
    tm = st.add("t_mask", rng.normal(size=3))
    keep = np.array([True, False, True, True, False, True])
    out = apply_mask(z, keep, tm)
    tc.tsum(out).backward()
    assert np.allclose(tm.grad, np.full(3, 2.0))   # two masked rows
    assert np.allclose(z.grad, keep.astype(float)[:, None] * np.ones((6, 3)))


def test_apply_mask_dim_mismatch():
    z = tc.constant(np.zeros((4, 3)))
    with pytest.raises(tc.ShapeError):
        apply_mask(z, np.ones(5, dtype=bool), tc.constant(np.zeros(3)))
    with pytest.raises(tc.ShapeError):
        apply_mask(z, np.ones(4, dtype=bool), tc.constant(np.zeros(2)))
