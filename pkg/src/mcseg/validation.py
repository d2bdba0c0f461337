"""Input validation helpers.

Thin checks used at public entry points, in the spirit of scikit-learn's
``check_array``: coerce to the dtype the numerics expect, fail early with a
message that names the offending argument.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def as_float32(x, name: str = "array") -> np.ndarray:
    """Return ``x`` as a contiguous float32 ndarray, requiring finite values."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def as_values_1d(x, name: str = "values") -> np.ndarray:
    """Return ``x`` flattened to a 1-D float64 vector of finite values."""
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size and not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def check_2d(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_same_shape(*named: tuple[str, np.ndarray]) -> None:
    """Require every (name, array) pair to share one shape."""
    ref_name, ref = named[0]
    for name, arr in named[1:]:
        if np.shape(arr) != np.shape(ref):
            raise ShapeError(
                f"{name} shape {np.shape(arr)} != {ref_name} shape {np.shape(ref)}"
            )


def check_binary(x, name: str = "mask") -> np.ndarray:
    """Require every element of ``x`` to be 0 or 1; returns float32 view."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ShapeError(f"{name} must contain only 0/1 values")
    return arr


def check_unit_interval(x, name: str = "probabilities") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ShapeError(f"{name} must lie in [0, 1]")
    return arr


def check_nonempty_roi(roi, name: str = "roi") -> np.ndarray:
    arr = check_binary(roi, name)
    if not np.any(arr == 1):
        raise ShapeError(f"{name} selects no pixels")
    return arr
