"""The LUI element: a thresholded positive combination across channels.

``LUI(x) = xi(p * (sum_k softplus(beta_k) x_k - (softplus(b) + 0.5)))`` learns
a union or an intersection of a subset of its input channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._ops import softplus, softplus_grad, xi, xi_grad
from .bise import (
    BIAS_OFFSET,
    BINARY,
    AlmostBinaryRange,
    _select,
    _threshold_candidates,
    inverse_softplus,
    range_from_bounds,
)
from .morphology import BinarySet, complement, intersect_all, union_all

KINDS = ("union", "intersection")
MAX_CHANNELS = 64


@dataclass
class LUIParams:
    betas: np.ndarray
    bias: float
    scale: float

    def __post_init__(self):
        self.betas = np.asarray(self.betas).reshape(-1)
        if not 1 <= self.betas.size <= MAX_CHANNELS:
            raise ValueError(f"LUI supports 1..{MAX_CHANNELS} channels, got {self.betas.size}")
        if not (np.all(np.isfinite(self.betas)) and np.isfinite(self.bias)
                and np.isfinite(self.scale)):
            raise ValueError("LUI parameters must be finite")

    @property
    def n_channels(self) -> int:
        return self.betas.size

    def effective_betas(self) -> np.ndarray:
        return softplus(self.betas.astype(np.float64))

    def effective_bias(self) -> float:
        return float(softplus(float(self.bias))) + BIAS_OFFSET

    @classmethod
    def from_effective(cls, betas, bias: float, scale: float) -> LUIParams:
        return cls(inverse_softplus(np.asarray(betas, dtype=np.float64)),
                   float(inverse_softplus(bias - BIAS_OFFSET)), float(scale))


@dataclass
class LUIGrads:
    betas: np.ndarray
    bias: float
    scale: float
    inputs: list


def _stack(params: LUIParams, channels) -> np.ndarray:
    channels = [np.asarray(c) for c in channels]
    if not channels:
        raise ValueError("LUI needs at least one channel")
    if len(channels) != params.n_channels:
        raise ValueError(f"expected {params.n_channels} channels, got {len(channels)}")
    shape = channels[0].shape
    if any(c.shape != shape for c in channels):
        raise ValueError("all channels must share the same shape")
    return np.stack(channels)


def lui_forward(params: LUIParams, channels) -> np.ndarray:
    x = _stack(params, channels)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    beta = params.effective_betas().astype(dtype)
    t = np.tensordot(beta, x.astype(dtype, copy=False), axes=1) - dtype.type(params.effective_bias())
    return xi(dtype.type(params.scale) * t)


def lui_backward(params: LUIParams, channels, upstream) -> LUIGrads:
    x = _stack(params, channels).astype(np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape[1:]:
        raise ValueError(f"shape mismatch: channels {x.shape[1:]} vs upstream {upstream.shape}")
    beta = params.effective_betas()
    t = np.tensordot(beta, x, axes=1) - params.effective_bias()
    p = float(params.scale)
    slope = xi_grad(p * t) * upstream
    gt = slope * p
    grad_beta = np.tensordot(x, gt, axes=(tuple(range(1, x.ndim)), tuple(range(gt.ndim))))
    grad_beta = grad_beta * softplus_grad(params.betas.astype(np.float64))
    grad_bias = -float(gt.sum()) * float(softplus_grad(float(params.bias)))
    grad_inputs = [gt * bk for bk in beta]
    return LUIGrads(grad_beta, grad_bias, float(np.sum(slope * t)), grad_inputs)


def _ranges(ranges, n: int) -> tuple[np.ndarray, np.ndarray]:
    if ranges is None:
        ranges = [BINARY] * n
    elif isinstance(ranges, AlmostBinaryRange):
        ranges = [ranges] * n
    ranges = [r if isinstance(r, AlmostBinaryRange) else AlmostBinaryRange(*r) for r in ranges]
    if len(ranges) != n:
        raise ValueError(f"expected {n} channel ranges, got {len(ranges)}")
    return (np.array([r.u for r in ranges], dtype=np.float64),
            np.array([r.v for r in ranges], dtype=np.float64))


def lui_bounds(betas, channels, kind: str, ranges=None) -> tuple[float, float]:
    """Bias window ``[lower, upper)`` for aggregating ``channels`` by ``kind``."""
    beta = np.asarray(betas, dtype=np.float64).ravel()
    c = np.zeros(beta.size, dtype=bool)
    c[np.asarray(channels, dtype=np.intp)] = True
    if not c.any():
        raise ValueError("candidate channel set is empty")
    u, v = _ranges(ranges, beta.size)
    pos = beta >= 0
    neg_sum = beta[beta <= 0].sum()
    if kind == "intersection":
        lower = beta[pos].sum() - np.min((1.0 - u[c]) * beta[c])
        upper = (beta * v)[c & pos].sum() + neg_sum
    elif kind == "union":
        lower = (beta * u)[c & pos].sum() + beta[~c & pos].sum()
        upper = np.min(beta[c] * v[c]) + neg_sum
    else:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    return float(lower), float(upper)


def check_lui(betas, bias: float, channels, kind: str, ranges=None) -> bool:
    lower, upper = lui_bounds(betas, channels, kind, ranges)
    return lower <= bias < upper


@dataclass
class LUICertificate:
    kind: str
    channels: np.ndarray
    complemented: bool
    exact: bool
    dissimilarity: float
    lower: float = 0.0
    upper: float = 0.0
    bias: float = 0.0
    scale: float = 0.0

    def apply(self, images) -> BinarySet:
        chosen = [img for img, keep in zip(images, self.channels) if keep]
        out = union_all(chosen) if self.kind == "union" else intersect_all(chosen)
        return complement(out) if self.complemented else out

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "channels": [int(i) for i in np.flatnonzero(self.channels)],
            "complemented": self.complemented,
            "exact": self.exact,
            "dissimilarity": self.dissimilarity,
        }


def lui_dissimilarities(betas, bias: float, ranges=None):
    """Bounds and dissimilarity for every thresholded channel set, both kinds.

    Rows follow :data:`KINDS`.
    """
    beta = np.asarray(betas, dtype=np.float64).ravel()
    u, v = _ranges(ranges, beta.size)
    order, sizes = _threshold_candidates(beta)
    bs, us, vs = beta[order], u[order], v[order]
    pos = bs >= 0
    pos_part = np.where(pos, bs, 0.0)
    total_pos = pos_part.sum()
    neg_sum = bs[bs <= 0].sum()
    idx = sizes - 1
    in_pos = np.cumsum(pos_part)[idx]
    union_lower = np.cumsum(np.where(pos, bs * us, 0.0))[idx] + (total_pos - in_pos)
    union_upper = np.minimum.accumulate(bs * vs)[idx] + neg_sum
    inter_lower = total_pos - np.minimum.accumulate((1.0 - us) * bs)[idx]
    inter_upper = np.cumsum(np.where(pos, bs * vs, 0.0))[idx] + neg_sum
    lower = np.stack([union_lower, inter_lower])
    upper = np.stack([union_upper, inter_upper])
    d = np.maximum(0.0, np.maximum(lower - bias, bias - upper))
    return order, sizes, lower, upper, d


def binarize_lui(params: LUIParams, ranges=None) -> LUICertificate:
    beta = params.effective_betas()
    b = params.effective_bias()
    order, sizes, lower, upper, d = lui_dissimilarities(beta, b, ranges)
    kind, idx = _select(d, sizes, len(KINDS))
    chosen = np.zeros(beta.size, dtype=bool)
    chosen[order[: sizes[idx]]] = True
    lo, up = float(lower[kind, idx]), float(upper[kind, idx])
    exact = bool(lo <= b < up) and params.scale != 0
    return LUICertificate(
        kind=KINDS[kind],
        channels=chosen,
        complemented=bool(params.scale < 0),
        exact=exact,
        dissimilarity=0.0 if exact else float(d[kind, idx]),
        lower=lo,
        upper=up,
        bias=b,
        scale=float(params.scale),
    )


def lui_output_range(params: LUIParams, ranges, certificate: LUICertificate) -> AlmostBinaryRange:
    if not certificate.exact:
        raise ValueError("output range is only defined for exact certificates")
    lower, upper = lui_bounds(params.effective_betas(), np.flatnonzero(certificate.channels),
                              certificate.kind, ranges)
    return range_from_bounds(lower, upper, params.effective_bias(), params.scale,
                             params.scale < 0)
