"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np


def check_images(X, resolution: int | None = None) -> np.ndarray:
    """Return ``X`` as float32 ``[n, 3, R, R]`` in [0, 1]; channels-last input is transposed."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected a 4-D image batch, got shape {X.shape}")
    if X.shape[1] != 3 and X.shape[-1] == 3:
        X = np.transpose(X, (0, 3, 1, 2))
    if X.shape[1] != 3 or X.shape[2] != X.shape[3]:
        raise ValueError(f"expected square RGB images [n, 3, R, R], got {X.shape}")
    if resolution is not None and X.shape[2] != resolution:
        raise ValueError(f"image resolution {X.shape[2]} does not match the fitted resolution {resolution}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    X = np.ascontiguousarray(X, dtype=np.float32)
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_labels(y, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(classes, encoded)`` for a 1-D label vector of length ``n_samples``."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"y must be 1-D with {n_samples} entries, got shape {y.shape}")
    classes, encoded = np.unique(y, return_inverse=True)
    return classes, encoded.astype(np.int64)


def check_fitted(est, attr: str) -> None:
    from sklearn.exceptions import NotFittedError

    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")
