"""Input validation helpers shared across modules.

All raise :class:`alforge.errors.DataError` with a short message naming the
offending argument, mirroring sklearn's check_* idiom but for image grids.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def check_image(arr, name="image") -> np.ndarray:
    """Validate a 2-d intensity grid with values in [0, 1]; returns float64."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be a 2-d grid, got shape {arr.shape}")
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(
            f"{name} intensities outside [0, 1]: range "
            f"[{arr.min():.4g}, {arr.max():.4g}]"
        )
    return arr


def check_mask(arr, name="mask") -> np.ndarray:
    """Validate a 2-d binary grid; returns uint8 with values in {0, 1}."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DataError(f"{name} must be a 2-d grid, got shape {arr.shape}")
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise DataError(f"{name} must be binary, found values {uniq[:8]}")
    return arr.astype(np.uint8)


def check_same_shape(a, b, names=("first", "second")):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DataError(
            f"{names[0]} and {names[1]} shapes differ: {a.shape} vs {b.shape}"
        )


def check_nonempty_mask(mask, name="mask") -> np.ndarray:
    mask = check_mask(mask, name)
    if mask.sum() == 0:
        raise DataError(f"{name} has no foreground pixels")
    return mask
