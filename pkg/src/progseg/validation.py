"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError


def check_images(X, resolution: int | None = None, channels: int = 3) -> np.ndarray:
    """Return ``X`` as a C-contiguous float32 (n, channels, R, R) array in [0, 1].

    Channel-last input (n, R, R, channels) is transposed.
    """
    X = np.asarray(X)
    if X.ndim == 3 and channels == 1:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError(f"expected a 4-d image batch, got shape {X.shape}")
    if X.shape[1] != channels and X.shape[-1] == channels:
        X = X.transpose(0, 3, 1, 2)
    if X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got shape {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ShapeError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if resolution is not None and X.shape[2] != resolution:
        raise ShapeError(f"expected {resolution}px images, got {X.shape[2]}px")
    if X.shape[0] == 0:
        raise ShapeError("empty image batch")
    if X.dtype == np.uint8:
        X = X / np.float32(255.0)
    X = np.ascontiguousarray(X, dtype=np.float32)
    if not np.isfinite(X).all():
        raise ContractError("images contain NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    return X


def check_masks(y, n: int | None = None, resolution: int | None = None) -> np.ndarray:
    """Return ``y`` as uint8 (n, R, R) with values in {0, 1}."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 3:
        raise ShapeError(f"expected masks of shape (n, R, R), got {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} masks for {n} images")
    if resolution is not None and y.shape[1:] != (resolution, resolution):
        raise ShapeError(f"expected {resolution}px masks, got {y.shape[1:]}")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("masks must be binary (0/1)")
    return y.astype(np.uint8)
