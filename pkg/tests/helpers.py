"""Constructors shared by the test modules."""

import itertools

import numpy as np

from bimonn.bise import OPS, AlmostBinaryRange, activation_bounds
from bimonn.lui import KINDS, lui_bounds


def random_mask(rng, side, density=0.5):
    while True:
        mask = rng.random((side, side)) < density
        if mask.any():
            return mask


def activated_bise(rng, se, op):
    """Effective ``(weights, bias, range)`` that activate ``op`` with support ``se``."""
    se = np.asarray(se, dtype=bool)
    weights = np.where(se, rng.uniform(1.0, 2.0, se.shape), 0.0)
    n_off = int((~se).sum())
    min_s = weights[se].min()
    weights[~se] = rng.uniform(0.1, 1.0, n_off) * 0.01 * min_s / (n_off + 1)
    off, in_s = weights[~se].sum(), weights[se].sum()
    if op == "dilation":
        v = rng.uniform(0.6, 1.0)
        u = rng.uniform(0.0, 0.9) * (v * min_s - off) / in_s
    else:
        u = rng.uniform(0.0, 0.4)
        v_min = 1.0 - ((1.0 - u) * min_s - off) / in_s
        v = v_min + rng.uniform(0.1, 1.0) * (1.0 - v_min)
    rng_range = AlmostBinaryRange(u, v)
    lower, upper = activation_bounds(weights, se, op, rng_range)
    assert lower < upper
    bias = lower + rng.uniform(0.05, 0.95) * (upper - lower)
    # the bounds are homogeneous in (weights, bias); keep the bias above the 0.5 offset
    gain = max(1.0, 1.0 / bias)
    return weights * gain, bias * gain, rng_range


def almost_binary(rng, mask, rng_range):
    """Real image whose background lies in ``[0, u]`` and foreground in ``[v, 1]``."""
    low = rng.uniform(0.0, rng_range.u, mask.shape)
    high = rng.uniform(rng_range.v, 1.0, mask.shape)
    return np.where(mask, high, low)


def exhaustive_bise_min(weights, bias, rng_range=None):
    """Minimal dissimilarity over every nonempty support and both operations."""
    w = np.asarray(weights, dtype=np.float64)
    best = np.inf
    for bits in itertools.product([False, True], repeat=w.size):
        if not any(bits):
            continue
        se = np.array(bits).reshape(w.shape)
        for op in OPS:
            lower, upper = activation_bounds(w, se, op, rng_range)
            best = min(best, max(0.0, lower - bias, bias - upper))
    return best


def exhaustive_lui_min(betas, bias, ranges=None):
    n = len(betas)
    best = np.inf
    for size in range(1, n + 1):
        for chosen in itertools.combinations(range(n), size):
            for kind in KINDS:
                lower, upper = lui_bounds(betas, list(chosen), kind, ranges)
                best = min(best, max(0.0, lower - bias, bias - upper))
    return best


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def assert_close_grad(analytic, numeric, rel_tol=1e-4, abs_tol=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (err <= rel_tol * scale) | (err <= abs_tol)
    assert ok.all(), f"max abs err {err.max():.3g}, worst rel {(err / np.maximum(scale, 1e-300)).max():.3g}"
