"""Elementwise activations and zero-padded FFT convolution with its adjoints."""

from __future__ import annotations

import numpy as np
from scipy import fft as sfft
from scipy.special import expit


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    return expit(x)


def xi(x):
    """Smooth threshold ``tanh(x)/2 + 1/2``."""
    return 0.5 * np.tanh(x) + 0.5


def xi_grad(x):
    t = np.tanh(x)
    return 0.5 * (1.0 - t * t)


class FFTConv:
    """'Same' convolution of a batch of channels, zero padded outside the grid.

    ``x`` has shape ``(B, N, H, W)``; kernels have shape ``(K, N, s, s)`` with
    odd ``s`` and the origin at the kernel center. ``forward`` returns the
    ``(B, K, N, H, W)`` array ``out[b, k, n](m) = sum_i x[b, n](m - i) W[k, n](i)``.
    The input spectrum is computed once and reused by ``backward``.
    """

    def __init__(self, x: np.ndarray, side: int):
        if side % 2 == 0:
            raise ValueError(f"kernel side must be odd, got {side}")
        self.x_shape = x.shape
        self.side = side
        self.radius = side // 2
        h, w = x.shape[-2:]
        self.fshape = (
            sfft.next_fast_len(h + side - 1, real=True),
            sfft.next_fast_len(w + side - 1, real=True),
        )
        self.xf = sfft.rfft2(x, s=self.fshape)

    def _crop(self, full: np.ndarray) -> np.ndarray:
        h, w = self.x_shape[-2:]
        r = self.radius
        return full[..., r:r + h, r:r + w]

    def forward(self, kernels: np.ndarray) -> np.ndarray:
        kf = sfft.rfft2(kernels, s=self.fshape)
        prod = self.xf[:, None] * kf[None]
        return self._crop(sfft.irfft2(prod, s=self.fshape))

    def backward(self, grad: np.ndarray, kernels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Adjoints of ``forward``: gradients w.r.t. the kernels and the input."""
        h, w = self.x_shape[-2:]
        r = self.radius
        gpad = np.zeros(grad.shape[:-2] + self.fshape, dtype=grad.dtype)
        gpad[..., :h, :w] = grad
        gf = sfft.rfft2(gpad, s=self.fshape)
        # kernel gradient: sum_b sum_m g(m) x(m - i), a cross-correlation
        corr = sfft.irfft2(np.einsum("bknij,bnij->knij", gf, np.conj(self.xf)), s=self.fshape)
        lags_y = np.arange(-r, r + 1) % self.fshape[0]
        lags_x = np.arange(-r, r + 1) % self.fshape[1]
        grad_k = corr[..., lags_y[:, None], lags_x[None, :]]
        # input gradient: convolution with the reflected kernel
        kf_flip = sfft.rfft2(kernels[..., ::-1, ::-1], s=self.fshape)
        gx_full = sfft.irfft2(np.einsum("bknij,knij->bnij", gf, kf_flip), s=self.fshape)
        grad_x = gx_full[..., r:r + h, r:r + w]
        return grad_k, grad_x
