"""Deterministic randomness, array helpers and the statistics used across the lab.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 and shape
``(n_tokens, d_model)``. Reductions (norms, means, correlations) are carried
out in float64 so that small relative quantities keep their precision.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import (
    BadGrid,
    DegenerateReference,
    DegenerateSequence,
    InvalidRange,
    LengthMismatch,
    NonFiniteValue,
    ShapeMismatch,
    ZeroReferenceNorm,
)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_POW_M53 = 2.0 ** -53


class SplitMix64:
    """splitmix64 stream.

    The n-th output only depends on ``seed + n * GOLDEN_GAMMA``, which is what
    lets :meth:`u64_array` produce a whole block at once with the exact same
    values as repeated :meth:`next_u64` calls.

    A stream is single-owner: do not share one between threads.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Uniform draw in ``[lo, hi)`` built from the top 53 bits."""
        if lo > hi:
            raise InvalidRange(f"lo={lo} > hi={hi}")
        u = (self.next_u64() >> 11) * _TWO_POW_M53
        return lo + (hi - lo) * u

    def gaussian(self) -> float:
        """Standard normal via Box-Muller (cosine branch).

        Each call consumes exactly two uniforms, in order ``(u1, u2)``.
        """
        u1 = (self.next_u64() >> 11) * _TWO_POW_M53
        u2 = (self.next_u64() >> 11) * _TWO_POW_M53
        return _box_muller(u1, u2)

    # block draws -----------------------------------------------------------

    def u64_array(self, n: int) -> np.ndarray:
        n = int(n)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform_array(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """``n`` float64 uniforms, identical to ``n`` calls of :meth:`uniform`."""
        if lo > hi:
            raise InvalidRange(f"lo={lo} > hi={hi}")
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return lo + (hi - lo) * u

    def gaussian_array(self, n: int) -> np.ndarray:
        # the transcendental part goes through ``math`` so that block and
        # scalar draws agree bit for bit
        u = self.uniform_array(2 * int(n))
        return np.array(
            [_box_muller(u1, u2) for u1, u2 in zip(u[0::2].tolist(), u[1::2].tolist())],
            dtype=np.float64,
        )


def _box_muller(u1: float, u2: float) -> float:
    # 1 - u1 lies in (0, 1], so the log is always finite
    return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)


# ---------------------------------------------------------------------------
# array helpers


def as_tensor(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D tensor, got shape {arr.shape}")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"shape {np.shape(a)} != {np.shape(b)}")


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue(f"{what} contains NaN or Inf")
    return a


# ---------------------------------------------------------------------------
# distances and statistics


def l1_rel(a: np.ndarray, b: np.ndarray) -> float:
    """Relative L1 distance ``sum|a - b| / sum|b|`` over the flattened tensors."""
    check_same_shape(a, b)
    b64 = np.asarray(b, dtype=np.float64)
    denom = float(np.abs(b64).sum())
    if denom == 0.0:
        raise ZeroReferenceNorm("reference tensor has zero L1 norm")
    num = float(np.abs(np.asarray(a, dtype=np.float64) - b64).sum())
    return num / denom


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the positions they span."""
    values = np.asarray(x, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # positions i..j (0-based) share rank mean(i+1 .. j+1)
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if len(xa) != len(ya):
        raise LengthMismatch(f"lengths {len(xa)} != {len(ya)}")
    if len(xa) < 2:
        raise LengthMismatch("need at least two observations")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateSequence("constant sequence has no correlation")
    # sqrt(sxx * syy) rather than sqrt(sxx) * sqrt(syy): exact 1.0 for x == y
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    if len(x) != len(y):
        raise LengthMismatch(f"lengths {len(x)} != {len(y)}")
    if len(x) < 2:
        raise LengthMismatch("need at least two observations")
    return pearson(average_ranks(x), average_ranks(y))


def psnr(a: np.ndarray, ref: np.ndarray) -> float:
    """PSNR in dB with the peak taken as the dynamic range of ``ref``.

    Returns ``math.inf`` when the tensors are identical.
    """
    check_same_shape(a, ref)
    a64 = np.asarray(a, dtype=np.float64)
    r64 = np.asarray(ref, dtype=np.float64)
    mse = float(np.mean((a64 - r64) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(r64.max() - r64.min())
    if peak == 0.0:
        raise DegenerateReference("reference is constant; PSNR peak is zero")
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a: np.ndarray, ref: np.ndarray, grid_h: int, grid_w: int, window: int = 3) -> float:
    """Mean SSIM on the token grid.

    Every channel is viewed as a ``grid_h x grid_w`` image (tokens row-major).
    Statistics use a uniform ``window x window`` patch at every valid position
    (no padding) with population variances. ``L`` is the dynamic range of the
    whole reference tensor. Per-channel means are averaged over channels.
    """
    check_same_shape(a, ref)
    n_tokens, n_channels = np.shape(ref)
    if grid_h * grid_w != n_tokens:
        raise BadGrid(f"grid {grid_h}x{grid_w} does not cover {n_tokens} tokens")
    if window < 1 or window % 2 == 0 or window > min(grid_h, grid_w):
        raise BadGrid(f"window {window} must be odd and fit in {grid_h}x{grid_w}")

    a64 = np.asarray(a, dtype=np.float64)
    r64 = np.asarray(ref, dtype=np.float64)
    if np.array_equal(a64, r64):
        return 1.0
    dyn_range = float(r64.max() - r64.min())
    if dyn_range == 0.0:
        raise DegenerateReference("reference is constant; SSIM constants vanish")
    c1 = (0.01 * dyn_range) ** 2
    c2 = (0.03 * dyn_range) ** 2

    # (channels, h, w) -> (channels, ph, pw, window, window)
    img_a = a64.T.reshape(n_channels, grid_h, grid_w)
    img_r = r64.T.reshape(n_channels, grid_h, grid_w)
    win = np.lib.stride_tricks.sliding_window_view
    pa = win(img_a, (window, window), axis=(1, 2))
    pr = win(img_r, (window, window), axis=(1, 2))

    mu_a = pa.mean(axis=(-2, -1))
    mu_r = pr.mean(axis=(-2, -1))
    var_a = (pa * pa).mean(axis=(-2, -1)) - mu_a**2
    var_r = (pr * pr).mean(axis=(-2, -1)) - mu_r**2
    cov = (pa * pr).mean(axis=(-2, -1)) - mu_a * mu_r

    ssim_map = ((2 * mu_a * mu_r + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_r**2 + c1) * (var_a + var_r + c2)
    )
    per_channel = ssim_map.mean(axis=(1, 2))
    return float(np.clip(per_channel.mean(), -1.0, 1.0))
