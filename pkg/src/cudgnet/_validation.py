"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np


def check_images(X, *, copy: bool = False) -> np.ndarray:
    """Return images as float32 ``(N, C, H, W)`` in ``[0, 1]``.

    Accepts uint8 (0..255) or float (0..1) arrays, channels-first or
    channels-last (``C`` in {1, 3} on the last axis and not on axis 1).
    """
    X = np.array(X, copy=copy) if copy else np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"expected a 4-D image batch, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if X.shape[-1] in (1, 3) and X.shape[1] not in (1, 3):
        X = np.moveaxis(X, -1, 1)
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    else:
        X = X.astype(np.float32)
        if not np.isfinite(X).all():
            raise ValueError("images contain NaN or inf")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("float images must lie in [0, 1]")
    return np.ascontiguousarray(X)


def check_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D class labels, got shape {y.shape}")
    if len(y) != n:
        raise ValueError(f"X has {n} samples but y has {len(y)}")
    return y
