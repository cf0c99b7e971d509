"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ConfigError, ShapeError


def check_images(X, channels: int | None = None, hw: tuple[int, int] | None = None) -> np.ndarray:
    """Finite float64 (N, C, H, W) stack; a single (C, H, W) image is promoted."""
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) images, got shape {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {X.shape[1]}")
    if hw is not None and tuple(X.shape[2:]) != tuple(hw):
        raise ShapeError(f"expected {tuple(hw)} images, got {tuple(X.shape[2:])}")
    return X


def check_labels(y, n_samples: int, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ShapeError(f"expected {n_samples} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ConfigError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes})")
    return y


def check_masks(masks, shape: tuple[int, int, int], n_classes: int) -> np.ndarray:
    """Integer (N, H, W) label masks."""
    masks = np.asarray(masks)
    if masks.shape != tuple(shape):
        raise ShapeError(f"expected masks of shape {tuple(shape)}, got {masks.shape}")
    masks = masks.astype(np.int64)
    if masks.size and (masks.min() < 0 or masks.max() >= n_classes):
        raise ConfigError(f"mask labels must lie in [0, {n_classes})")
    return masks


def check_mask_ratio(gamma) -> float:
    g = float(gamma)
    if not 0.0 < g < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {gamma}")
    return g


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or int(value) < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
