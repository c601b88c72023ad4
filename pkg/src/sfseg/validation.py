"""Input checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensorcore import NO_LABEL


def check_images(X, *, channels: int = 3, allow_single: bool = True) -> np.ndarray:
    """Return a finite float64 stack of shape (N, channels, H, W).

    A single (channels, H, W) image is promoted to a batch of one when
    ``allow_single`` is set. Lists of equally sized images are stacked.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3 and allow_single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected images shaped (N, {channels}, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError("no images given")
    if arr.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or infinite values")
    return arr


def check_label_maps(y, n_classes: int, images: np.ndarray | None = None) -> np.ndarray:
    """Return a uint8 (N, H, W) stack with values in [0, n_classes) or NO_LABEL."""
    arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected label maps shaped (N, H, W), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("label maps must hold integer class indices")
    bad = (arr < 0) | ((arr >= n_classes) & (arr != NO_LABEL))
    if np.any(bad):
        raise ValueError(f"label values must lie in [0, {n_classes}) or equal {NO_LABEL}")
    if images is not None and (arr.shape[0] != images.shape[0] or arr.shape[1:] != images.shape[2:]):
        raise ShapeError(f"label maps {arr.shape} do not align with images {images.shape}")
    return arr.astype(np.uint8)


def check_same_size(X: np.ndarray, name: str = "images") -> tuple[int, int]:
    H, W = X.shape[-2:]
    if H < 2 or W < 2:
        raise ShapeError(f"{name} must be at least 2x2, got {H}x{W}")
    return H, W
