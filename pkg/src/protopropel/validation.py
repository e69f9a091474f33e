"""Input validation helpers shared by the estimators and functional API."""

import numpy as np

from .exceptions import ShapeMismatchError

IGNORE = -1


def check_positions(positions):
    """Return ``positions`` as a float64 (N, 3) array, rejecting non-finite values."""
    arr = np.asarray(positions, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatchError(f"positions must have shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("positions contain non-finite entries")
    return arr


def check_labels(labels, n, n_classes=None):
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ShapeMismatchError(f"labels must have shape ({n},), got {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("labels must be integers")
    arr = arr.astype(np.int64)
    if np.any(arr < IGNORE):
        raise ValueError("labels must be >= 0 or IGNORE (-1)")
    if n_classes is not None and np.any(arr >= n_classes):
        raise ValueError(f"labels must be < {n_classes} or IGNORE")
    return arr


def check_matrix(values, n_cols=None, name="matrix"):
    """Float64 2-D array with finite entries and, optionally, a fixed width."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise ShapeMismatchError(f"{name} must have {n_cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_k(k, minimum, error_cls):
    if int(k) != k or k < minimum:
        raise error_cls(f"k must be an integer >= {minimum}, got {k}")
    return int(k)
