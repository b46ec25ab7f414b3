import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dicache.errors import (
    BadGrid,
    DegenerateReference,
    DegenerateSequence,
    InvalidRange,
    LengthMismatch,
    ShapeMismatch,
    ZeroReferenceNorm,
)
from dicache.numerics import SplitMix64, average_ranks, l1_rel, psnr, spearman, ssim


def test_splitmix_reference_vectors():
    rng = SplitMix64(0)
    assert rng.next_u64() == 0xE220A8397B1DCDAF
    assert rng.next_u64() == 0x6E789E6AA1B965F4


def test_splitmix_block_matches_scalar():
    a, b = SplitMix64(12345), SplitMix64(12345)
    block = a.u64_array(1000)
    assert [int(v) for v in block] == [b.next_u64() for _ in range(1000)]
    assert a.state == b.state
    assert a.next_u64() == b.next_u64()


def test_uniform_block_and_gaussian_block_match_scalar():
    a, b = SplitMix64(9), SplitMix64(9)
    assert a.uniform_array(50, -2.0, 3.0).tolist() == [b.uniform(-2.0, 3.0) for _ in range(50)]
    assert a.gaussian_array(25).tolist() == [b.gaussian() for _ in range(25)]


def test_uniform_range():
    rng = SplitMix64(1)
    assert rng.uniform(3.0, 3.0) == 3.0
    vals = [rng.uniform(0.0, 1.0) for _ in range(2000)]
    assert all(0.0 <= v < 1.0 for v in vals)
    with pytest.raises(InvalidRange):
        rng.uniform(1.0, 0.0)


def test_prng_determinism():
    assert [SplitMix64(5).uniform() for _ in range(3)] == [SplitMix64(5).uniform() for _ in range(3)]
    a, b = SplitMix64(77), SplitMix64(77)
    assert [a.gaussian() for _ in range(10)] == [b.gaussian() for _ in range(10)]


def test_gaussian_moments():
    draws = SplitMix64(2024).gaussian_array(100_000)
    assert abs(draws.mean()) < 0.02
    assert abs(draws.var() - 1.0) < 0.03


# --- l1_rel -------------------------------------------------------------------

def test_l1_rel_examples():
    a = np.ones((2, 2), np.float32)
    assert l1_rel(a, a) == 0.0
    # 4 * |1 - 2| / (4 * 2)
    assert l1_rel(a, 2 * a) == 0.5
    with pytest.raises(ZeroReferenceNorm):
        l1_rel(a, np.zeros_like(a))
    with pytest.raises(ShapeMismatch):
        l1_rel(a, np.ones((4, 1), np.float32))


finite = st.floats(-100, 100, allow_nan=False, width=32)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=20),
       st.sampled_from([-3.0, -0.5, 0.25, 2.0, 8.0]))
def test_l1_rel_scale_covariant(pairs, k):
    a = np.array([p[0] for p in pairs], np.float64)[None, :]
    b = np.array([p[1] for p in pairs], np.float64)[None, :]
    if np.abs(b).sum() == 0:
        return
    if np.abs(a).sum() > 0:
        assert l1_rel(a, a) == 0.0
    assert math.isclose(l1_rel(k * a, k * b), l1_rel(a, b), rel_tol=1e-12, abs_tol=1e-15)


# --- spearman -----------------------------------------------------------------

def brute_ranks(x):
    # rank = (# strictly smaller) + (# equal + 1) / 2
    return [sum(v < xi for v in x) + (sum(v == xi for v in x) + 1) / 2 for xi in x]


def brute_spearman(x, y):
    return statistics.correlation(brute_ranks(x), brute_ranks(y))


def test_average_ranks_with_ties():
    assert average_ranks([1, 2, 2, 3]).tolist() == [1.0, 2.5, 2.5, 4.0]
    assert average_ranks([5, 5, 5]).tolist() == [2.0, 2.0, 2.0]


def test_spearman_examples():
    x = [0.3, 1.2, -4.0, 7.5, 2.2]
    assert spearman(x, x) == 1.0
    assert spearman(x, [-v for v in x]) == -1.0
    expected = brute_spearman([1, 2, 2, 3], [1, 3, 2, 4])
    assert spearman([1, 2, 2, 3], [1, 3, 2, 4]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(stats.spearmanr([1, 2, 2, 3], [1, 3, 2, 4]).statistic, abs=1e-12)


def test_spearman_errors():
    with pytest.raises(LengthMismatch):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(DegenerateSequence):
        spearman([1, 1, 1], [1, 2, 3])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.floats(-10, 10, allow_nan=False)),
                min_size=3, max_size=12))
def test_spearman_monotone_invariance(pairs):
    x = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    rho = spearman(x, y)
    assert -1.0 <= rho <= 1.0
    assert spearman([v ** 3 + 2 * v for v in x], y) == rho
    assert spearman(x, [math.atan(v) * 5 for v in y]) == rho


# --- psnr / ssim ----------------------------------------------------------------

def test_psnr_examples():
    ref = np.zeros((4, 4), np.float64)
    ref[0, 0] = 1.0  # dynamic range 1
    assert psnr(ref, ref) == math.inf
    a = ref + 0.1   # MSE 0.01
    assert psnr(a, ref) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ShapeMismatch):
        psnr(a, ref[:2])
    with pytest.raises(DegenerateReference):
        psnr(a, np.ones((4, 4)))


def test_psnr_decreasing_in_mse():
    ref = np.linspace(0, 1, 16).reshape(4, 4)
    vals = [psnr(ref + e, ref) for e in (0.01, 0.02, 0.05, 0.1)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def ssim_window_oracle(a, r, L):
    # single window covering the whole 3x3 patch, population statistics
    n = len(a)
    ma, mr = sum(a) / n, sum(r) / n
    va = sum((v - ma) ** 2 for v in a) / n
    vr = sum((v - mr) ** 2 for v in r) / n
    cov = sum((p - ma) * (q - mr) for p, q in zip(a, r)) / n
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    return ((2 * ma * mr + c1) * (2 * cov + c2)) / ((ma ** 2 + mr ** 2 + c1) * (va + vr + c2))


def test_ssim_matches_direct_formula_3x3():
    ref = np.array([[0.1, 1.0], [0.5, -0.2], [0.9, 0.3], [0.0, 0.7], [0.4, 0.4],
                    [1.2, -0.5], [0.6, 0.8], [0.2, 0.1], [0.3, 0.9]])
    a = ref + np.array([[0.05, -0.1], [0.0, 0.2], [-0.1, 0.0], [0.3, 0.1], [0.0, 0.0],
                        [0.1, 0.1], [-0.2, 0.0], [0.0, -0.3], [0.05, 0.05]])
    L = ref.max() - ref.min()
    expected = np.mean([ssim_window_oracle(a[:, c].tolist(), ref[:, c].tolist(), L) for c in range(2)])
    assert ssim(a, ref, 3, 3, 3) == pytest.approx(expected, abs=1e-12)


def test_ssim_identity_shift_and_errors():
    ref = SplitMix64(4).gaussian_array(64 * 4).reshape(64, 4)
    assert ssim(ref, ref, 8, 8) == 1.0
    assert ssim(ref + 0.5, ref, 8, 8) < 1.0
    with pytest.raises(BadGrid):
        ssim(ref, ref, 4, 8)
    with pytest.raises(BadGrid):
        ssim(ref, ref, 8, 8, window=4)
    with pytest.raises(ShapeMismatch):
        ssim(ref[:32], ref, 8, 8)
