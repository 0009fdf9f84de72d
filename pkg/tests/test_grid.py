import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalesr.grid import (
    DimensionError, SRFactors, coarsen_blocks, coarsen_spacetime, coarsen_spatial,
    upsample_bicubic, upsample_nearest,
)


def block_mean_oracle(x, s):
    h, w = x.shape
    out = np.zeros((h // s, w // s))
    for n in range(h // s):
        for m in range(w // s):
            acc = 0.0
            for i in range(s):
                for j in range(s):
                    acc += x[s * n + i, s * m + j]
            out[n, m] = acc / s**2
    return out


def test_coarsen_constant():
    x = np.full((12, 12), 3.25)
    for s in (1, 2, 3, 4, 6, 12):
        np.testing.assert_array_equal(coarsen_spatial(x, SRFactors(s, 1)), 3.25)


def test_coarsen_2x2():
    out = coarsen_spatial(np.array([[1.0, 3.0], [5.0, 7.0]]), SRFactors(2, 1))
    assert out.shape == (1, 1) and out[0, 0] == 4.0


def test_coarsen_matches_loop_oracle():
    x = np.random.default_rng(0).random((8, 8))
    np.testing.assert_allclose(coarsen_spatial(x, SRFactors(4, 1)), block_mean_oracle(x, 4),
                               rtol=0, atol=1e-15)


def test_coarsen_non_divisible():
    with pytest.raises(DimensionError):
        coarsen_spatial(np.zeros((10, 10)), SRFactors(3, 1))


def test_spacetime_identical_frames():
    x = np.random.default_rng(1).random((6, 6))
    f = SRFactors(3, 4)
    np.testing.assert_allclose(coarsen_spacetime(np.stack([x] * 4), f),
                               coarsen_spatial(x, f), atol=1e-15)


def test_spacetime_zeros_ones():
    seq = np.stack([np.zeros((4, 4)), np.ones((4, 4))])
    np.testing.assert_array_equal(coarsen_spacetime(seq, SRFactors(1, 2)), 0.5)


def test_spacetime_triple_loop_oracle():
    seq = np.random.default_rng(2).random((3, 6, 6))
    expected = np.zeros((2, 2))
    for n in range(2):
        for m in range(2):
            acc = 0.0
            for k in range(3):
                for i in range(3):
                    for j in range(3):
                        acc += seq[k, 3 * n + i, 3 * m + j]
            expected[n, m] = acc / 27
    np.testing.assert_allclose(coarsen_spacetime(seq, SRFactors(3, 3)), expected, atol=1e-14)


def test_spacetime_wrong_length():
    with pytest.raises(DimensionError):
        coarsen_spacetime(np.zeros((2, 4, 4)), SRFactors(2, 3))


def test_coarsen_blocks_drops_tail():
    seq = np.random.default_rng(3).random((7, 4, 4))
    out = coarsen_blocks(seq, SRFactors(2, 3))
    assert out.shape == (2, 2, 2)
    np.testing.assert_allclose(out[1], coarsen_spacetime(seq[3:6], SRFactors(2, 3)))


@settings(max_examples=50, deadline=None)
@given(s=st.sampled_from([1, 2, 3, 5]), t=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_mass_identity(s, t, seed):
    f = SRFactors(s, t)
    seq = np.random.default_rng(seed).gamma(0.5, 2.0, size=(t, 3 * s, 2 * s))
    lr = coarsen_spacetime(seq, f)
    np.testing.assert_allclose(s * s * t * lr.sum(), seq.sum(), rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_coarsen_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.random((2, 2, 8, 8))
    f = SRFactors(2, 2)
    np.testing.assert_allclose(coarsen_spacetime(a * x + b * y, f),
                               a * coarsen_spacetime(x, f) + b * coarsen_spacetime(y, f),
                               atol=1e-12)


def test_nearest_small():
    np.testing.assert_array_equal(upsample_nearest(np.array([[4.0]]), SRFactors(2, 1)),
                                  [[4, 4], [4, 4]])


def test_nearest_index_oracle():
    x = np.random.default_rng(4).random((4, 4))
    out = upsample_nearest(x, SRFactors(3, 1))
    expected = np.array([[x[i // 3, j // 3] for j in range(12)] for i in range(12)])
    np.testing.assert_array_equal(out, expected)


@settings(max_examples=30, deadline=None)
@given(s=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_nearest_projection(s, seed):
    x = np.random.default_rng(seed).random((3, 5))
    f = SRFactors(s, 1)
    np.testing.assert_allclose(coarsen_spatial(upsample_nearest(x, f), f), x, atol=1e-15)


def test_bicubic_constant():
    for s in (1, 2, 3, 4, 10):
        out = upsample_bicubic(np.full((5, 4), 0.7), SRFactors(s, 1))
        assert out.shape == (5 * s, 4 * s)
        np.testing.assert_allclose(out, 0.7, atol=1e-12)


def test_bicubic_identity():
    x = np.random.default_rng(5).random((6, 7))
    np.testing.assert_array_equal(upsample_bicubic(x, SRFactors(1, 1)), x)


def _keys_1d(samples, pos, a=-0.5):
    # closed-form separable kernel evaluated directly at one coordinate
    total = 0.0
    for k, v in enumerate(samples):
        d = abs(pos - k)
        if d <= 1:
            w = (a + 2) * d**3 - (a + 3) * d**2 + 1
        elif d < 2:
            w = a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a
        else:
            w = 0.0
        total += w * v
    return total


def test_bicubic_linear_ramp():
    s, n = 4, 12
    ramp = 0.5 + 0.25 * np.arange(n)
    field = np.tile(ramp, (6, 1))
    out = upsample_bicubic(field, SRFactors(s, 1))
    fine = (np.arange(n * s) + 0.5) / s - 0.5
    interior = (fine >= 2) & (fine <= n - 3)
    np.testing.assert_allclose(out[:, interior], np.tile(0.5 + 0.25 * fine[interior], (6 * s, 1)),
                               atol=1e-6)
    # matches the direct kernel sum in the interior
    direct = np.array([_keys_1d(ramp, p) for p in fine[interior]])
    np.testing.assert_allclose(out[0, interior], direct, atol=1e-12)


def test_bicubic_nonnegative():
    x = np.zeros((6, 6))
    x[3, 3] = 1.0
    out = upsample_bicubic(x, SRFactors(4, 1))
    assert out.min() >= 0.0
    assert upsample_bicubic(x, SRFactors(4, 1), clamp=False).min() < 0


def test_factors_parse():
    assert SRFactors.parse("10x3") == SRFactors(10, 3)
    with pytest.raises(ValueError):
        SRFactors.parse("10")
    with pytest.raises(ValueError):
        SRFactors(0, 1)
