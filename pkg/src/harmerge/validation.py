"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np


def check_features(x, *, n_features: int | None = None) -> np.ndarray:
    """Coerce to a finite 2-D float64 matrix."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got ndim={arr.ndim}")
    if arr.shape[0] == 0:
        raise ValueError("empty feature matrix")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature matrix contains NaN or Inf")
    if n_features is not None and arr.shape[1] != n_features:
        raise ValueError(
            f"expected {n_features} features, got {arr.shape[1]}"
        )
    return arr


def check_labels(y, n_rows: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1 or len(arr) != n_rows:
        raise ValueError(f"labels must be 1-D with {n_rows} entries")
    return arr


def check_domains(domains, n_rows: int) -> np.ndarray:
    arr = np.asarray(domains)
    if arr.ndim != 1 or len(arr) != n_rows:
        raise ValueError(f"domains must be 1-D with {n_rows} entries")
    return arr
