"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np


def check_images(X, n_channels: int | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a ``(M, C, H, W)`` array of values in ``[0, 1]``.

    A 3-d input is read as single-channel. Boolean arrays are kept boolean.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (M, C, H, W) or (M, H, W), got {X.shape}")
    if X.shape[0] == 0 or 0 in X.shape[2:]:
        raise ValueError(f"{name} is empty: {X.shape}")
    if X.dtype != bool:
        if not np.issubdtype(X.dtype, np.number):
            raise ValueError(f"{name} must be numeric or boolean, got {X.dtype}")
        if not np.all(np.isfinite(X)):
            raise ValueError(f"{name} contains non-finite values")
        if X.min() < 0 or X.max() > 1:
            raise ValueError(f"{name} values must lie in [0, 1]")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"{name} has {X.shape[1]} channels, expected {n_channels}")
    return X


def check_binary(y, name: str = "y") -> np.ndarray:
    y = check_images(y, name=name)
    if y.dtype != bool:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError(f"{name} must be binary")
        y = y.astype(bool)
    return y


def check_architecture(architecture) -> list[tuple[int, int, int]]:
    layers = [tuple(int(v) for v in layer) for layer in architecture]
    if not layers:
        raise ValueError("architecture needs at least one layer")
    for layer in layers:
        if len(layer) != 3:
            raise ValueError(f"each layer is (in_channels, out_channels, kernel_side), got {layer}")
        n_in, n_out, side = layer
        if n_in < 1 or n_out < 1 or side < 1 or side % 2 == 0:
            raise ValueError(f"invalid layer {layer}")
    for prev, nxt in zip(layers, layers[1:]):
        if prev[1] != nxt[0]:
            raise ValueError(f"channel mismatch between layers {prev} and {nxt}")
    return layers
