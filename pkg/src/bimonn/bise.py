"""The BiSE neuron: a softplus-positive thresholded convolution.

Forward pass::

    y = xi(p * (x * softplus(W) - (softplus(b) + 0.5)))

with ``*`` the zero-padded convolution ``sum_i x(k - i) w(i)``. Certification
works on the effective parameters ``softplus(W)`` and ``softplus(b) + 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._ops import FFTConv, softplus, softplus_grad, xi, xi_grad
from .morphology import BinarySet, StructuringElement, complement, dilate, erode

BIAS_OFFSET = 0.5
OPS = ("dilation", "erosion")


@dataclass(frozen=True)
class AlmostBinaryRange:
    """Pixel values of a conforming image avoid the open interval ``(u, v)``."""

    u: float = 0.0
    v: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.u < self.v <= 1.0):
            raise ValueError(f"need 0 <= u < v <= 1, got ({self.u}, {self.v})")

    def contains(self, values, tol: float = 0.0) -> bool:
        """True when no value falls strictly inside ``(u + tol, v - tol)``."""
        values = np.asarray(values)
        return not np.any((values > self.u + tol) & (values < self.v - tol))


BINARY = AlmostBinaryRange(0.0, 1.0)


@dataclass
class BiSEParams:
    """Raw parameters of one neuron; ``weights`` is an odd square grid."""

    weights: np.ndarray
    bias: float
    scale: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.weights.shape[1] \
                or self.weights.shape[0] % 2 == 0:
            raise ValueError(f"weights must be an odd square grid, got {self.weights.shape}")
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)
                and np.isfinite(self.scale)):
            raise ValueError("BiSE parameters must be finite")

    @property
    def side(self) -> int:
        return self.weights.shape[0]

    def effective_weights(self) -> np.ndarray:
        return softplus(self.weights.astype(np.float64))

    def effective_bias(self) -> float:
        return float(softplus(float(self.bias))) + BIAS_OFFSET

    @classmethod
    def from_effective(cls, weights, bias: float, scale: float) -> BiSEParams:
        """Build raw parameters whose effective values are ``weights`` and ``bias``."""
        return cls(inverse_softplus(np.asarray(weights, dtype=np.float64)),
                   float(inverse_softplus(bias - BIAS_OFFSET)), float(scale))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus only reaches strictly positive values")
    # log(expm1(y)) written to stay finite for large y
    return y + np.log(-np.expm1(-y))


@dataclass
class BiSEGrads:
    weights: np.ndarray
    bias: float
    scale: float
    input: np.ndarray


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None, None], True
    if x.ndim == 3:
        return x[:, None], False
    raise ValueError(f"expected (H, W) or (B, H, W) input, got {x.shape}")


def bise_forward(params: BiSEParams, x) -> np.ndarray:
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    xb, single = _as_batch(x.astype(dtype, copy=False))
    conv = FFTConv(xb, params.side)
    w = params.effective_weights().astype(dtype)[None, None]
    z = conv.forward(w)[:, 0, 0] - dtype.type(params.effective_bias())
    out = xi(dtype.type(params.scale) * z)
    return out[0] if single else out


def bise_backward(params: BiSEParams, x, upstream) -> BiSEGrads:
    """Exact gradients of ``sum(upstream * bise_forward(params, x))``."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch: input {x.shape} vs upstream {upstream.shape}")
    xb, single = _as_batch(x)
    gb, _ = _as_batch(upstream)
    conv = FFTConv(xb, params.side)
    w_eff = params.effective_weights()
    z = conv.forward(w_eff[None, None])[:, 0, 0] - params.effective_bias()
    p = float(params.scale)
    slope = xi_grad(p * z) * gb[:, 0]
    grad_scale = float(np.sum(slope * z))
    gz = slope * p
    grad_bias = -float(gz.sum()) * float(softplus_grad(float(params.bias)))
    gw_eff, gx = conv.backward(gz[:, None, None], w_eff[None, None])
    grad_w = gw_eff[0, 0] * softplus_grad(params.weights.astype(np.float64))
    gx = gx[:, 0]
    return BiSEGrads(grad_w, grad_bias, grad_scale, gx[0] if single else gx)


# --- activation checks --------------------------------------------------------

def _check_range(rng) -> AlmostBinaryRange:
    if rng is None:
        return BINARY
    if isinstance(rng, AlmostBinaryRange):
        return rng
    return AlmostBinaryRange(*rng)


def activation_bounds(weights, se, op: str, rng=BINARY) -> tuple[float, float]:
    """Lower and upper bias bounds for ``(se, op)``: activated iff ``lower <= b < upper``."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    s = np.asarray(se.array if isinstance(se, StructuringElement) else se, dtype=bool).ravel()
    if s.shape != w.shape:
        raise ValueError(f"candidate shape {s.shape} does not match weights {w.shape}")
    if not s.any():
        raise ValueError("candidate structuring element is empty")
    rng = _check_range(rng)
    u, v = rng.u, rng.v
    pos = w >= 0
    neg_sum = w[w <= 0].sum()
    min_s = w[s].min()
    if op == "dilation":
        lower = w[~s & pos].sum() + u * w[s & pos].sum()
        upper = v * min_s + neg_sum
    elif op == "erosion":
        lower = w[pos].sum() - (1.0 - u) * min_s
        upper = v * w[s & pos].sum() + neg_sum
    else:
        raise ValueError(f"op must be one of {OPS}, got {op!r}")
    return float(lower), float(upper)


def check_activation(weights, bias: float, se, op: str, rng=BINARY) -> bool:
    lower, upper = activation_bounds(weights, se, op, rng)
    return lower <= bias < upper


def recover_se(weights, bias: float, op: str, rng=BINARY) -> np.ndarray | None:
    """Threshold the weights at the linear-check value and verify the candidate.

    Returns the boolean support mask, or ``None`` when the neuron is not
    activated as ``op``.
    """
    w = np.asarray(weights, dtype=np.float64)
    rng = _check_range(rng)
    if op == "dilation":
        tau = (bias - w[w <= 0].sum()) / rng.v
    elif op == "erosion":
        tau = (w[w >= 0].sum() - bias) / (1.0 - rng.u)
    else:
        raise ValueError(f"op must be one of {OPS}, got {op!r}")
    se = w >= tau
    if not se.any():
        return None
    return se if check_activation(w, bias, se, op, rng) else None


# --- binarization ------------------------------------------------------------

@dataclass
class ActivationCertificate:
    """Nearest morphological operator for a BiSE.

    ``se`` is the thresholded weight support. A dilation certificate computes
    ``dilate(X, se)``; an erosion certificate computes the Minkowski
    subtraction ``X - se``, i.e. ``erode(X, reflect(se))``.
    """

    op: str
    se: np.ndarray
    complemented: bool
    exact: bool
    dissimilarity: float
    lower: float = field(default=0.0)
    upper: float = field(default=0.0)
    bias: float = field(default=0.0)
    scale: float = field(default=0.0)

    @property
    def structuring_element(self) -> StructuringElement:
        return StructuringElement(self.se)

    def morphological_se(self) -> StructuringElement:
        """The element ``S`` such that the neuron computes ``op_S`` in set notation."""
        se = self.structuring_element
        return se if self.op == "dilation" else se.reflect()

    def apply(self, image: BinarySet) -> BinarySet:
        if self.op == "dilation":
            out = dilate(image, self.structuring_element)
        else:
            out = erode(image, self.morphological_se())
        return complement(out) if self.complemented else out

    def to_record(self) -> dict:
        return {
            "op": self.op,
            "complemented": self.complemented,
            "exact": self.exact,
            "dissimilarity": self.dissimilarity,
            "side": int(self.se.shape[0]),
            "card": int(self.se.sum()),
        }


def _threshold_candidates(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descending order of ``w`` and the prefix sizes of the sets ``{w >= tau}``."""
    order = np.argsort(-w, kind="stable")
    ws = w[order]
    # a prefix is a threshold set only where the next value is strictly smaller
    sizes = np.flatnonzero(np.append(ws[1:] < ws[:-1], True)) + 1
    return order, sizes


def _select(d: np.ndarray, sizes: np.ndarray, n_kinds: int) -> tuple[int, int]:
    """Index (kind, candidate) minimizing ``(d, -|S|, kind)``."""
    kinds = np.repeat(np.arange(n_kinds), len(sizes))
    card = np.tile(sizes, n_kinds)
    flat = d.ravel()
    best = np.lexsort((kinds, -card, flat))[0]
    return int(kinds[best]), int(best % len(sizes))


def bise_dissimilarities(weights, bias: float, rng=BINARY):
    """Dissimilarity of every thresholded candidate, for both operations.

    Returns ``(order, sizes, lower, upper, d)`` where rows of the bound
    arrays follow :data:`OPS`.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    rng = _check_range(rng)
    u, v = rng.u, rng.v
    order, sizes = _threshold_candidates(w)
    ws = w[order]
    pos_part = np.where(ws >= 0, ws, 0.0)
    prefix_pos = np.cumsum(pos_part)[sizes - 1]
    total_pos = pos_part.sum()
    neg_sum = ws[ws <= 0].sum()
    min_s = ws[sizes - 1]
    lower = np.stack([
        (total_pos - prefix_pos) + u * prefix_pos,
        total_pos - (1.0 - u) * min_s,
    ])
    upper = np.stack([
        v * min_s + neg_sum,
        v * prefix_pos + neg_sum,
    ])
    d = np.maximum(0.0, np.maximum(lower - bias, bias - upper))
    return order, sizes, lower, upper, d


def binarize_bise(params: BiSEParams, rng=BINARY) -> ActivationCertificate:
    """Nearest ``(S, op)`` among thresholded weight supports."""
    w = params.effective_weights()
    b = params.effective_bias()
    order, sizes, lower, upper, d = bise_dissimilarities(w, b, rng)
    kind, idx = _select(d, sizes, len(OPS))
    se = np.zeros(w.size, dtype=bool)
    se[order[: sizes[idx]]] = True
    se = se.reshape(w.shape)
    lo, up = float(lower[kind, idx]), float(upper[kind, idx])
    exact = bool(lo <= b < up) and params.scale != 0
    return ActivationCertificate(
        op=OPS[kind],
        se=se,
        complemented=bool(params.scale < 0),
        exact=exact,
        dissimilarity=0.0 if exact else float(d[kind, idx]),
        lower=lo,
        upper=up,
        bias=b,
        scale=float(params.scale),
    )


def range_from_bounds(lower: float, upper: float, bias: float, scale: float,
                      complemented: bool) -> AlmostBinaryRange:
    a = abs(scale)
    u = float(xi(a * (lower - bias)))
    v = float(xi(a * (upper - bias)))
    if complemented:
        u, v = 1.0 - v, 1.0 - u
    return AlmostBinaryRange(u, v)


def output_range(params: BiSEParams, input_range, certificate: ActivationCertificate
                 ) -> AlmostBinaryRange:
    """Almost-binary range of the neuron's output for inputs in ``input_range``."""
    if not certificate.exact:
        raise ValueError("output range is only defined for exact certificates")
    lower, upper = activation_bounds(params.effective_weights(), certificate.se,
                                     certificate.op, input_range)
    return range_from_bounds(lower, upper, params.effective_bias(), params.scale,
                             params.scale < 0)
