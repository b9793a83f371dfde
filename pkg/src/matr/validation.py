"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np


def _features(x, what):
    arr = getattr(x, "features", x)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{what}: expected a nonempty (length, dim) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: contains NaN or infinite values")
    return arr


def check_pairs(X, n_features=None):
    """Validate ``X`` as a sequence of ``(target, query)`` feature matrices.

    Items may be numpy arrays or objects with a ``features`` attribute.
    Returns a list of float64 array pairs.
    """
    if isinstance(X, np.ndarray) and X.dtype != object:
        raise TypeError("X must be a sequence of (target, query) pairs, not a single array")
    pairs = []
    for i, item in enumerate(X):
        if hasattr(item, "target") and hasattr(item, "query"):
            item = (item.target, item.query)
        try:
            t, q = item
        except (TypeError, ValueError) as exc:
            raise ValueError(f"X[{i}] is not a (target, query) pair") from exc
        t = _features(t, f"X[{i}] target")
        q = _features(q, f"X[{i}] query")
        if t.shape[1] != q.shape[1]:
            raise ValueError(f"X[{i}]: target dim {t.shape[1]} != query dim {q.shape[1]}")
        if n_features is not None and t.shape[1] != n_features:
            raise ValueError(f"X[{i}]: expected {n_features} features, got {t.shape[1]}")
        pairs.append((t, q))
    if not pairs:
        raise ValueError("X is empty")
    return pairs


def check_videos(videos, n_features=None):
    out = []
    for i, v in enumerate(videos):
        arr = _features(v, f"videos[{i}]")
        if n_features is not None and arr.shape[1] != n_features:
            raise ValueError(f"videos[{i}]: expected {n_features} features, got {arr.shape[1]}")
        out.append(arr)
    if not out:
        raise ValueError("no videos given")
    return out


def check_moments(y, n_samples):
    """Validate ``y`` as ``n_samples`` rows of ``(start_sec, end_sec)``."""
    y = np.asarray([getattr(m, "moment", m) for m in y], dtype=np.float64)
    if y.shape != (n_samples, 2):
        raise ValueError(f"y must have shape ({n_samples}, 2), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite timestamps")
    bad = np.flatnonzero(~((y[:, 0] >= 0) & (y[:, 1] > y[:, 0])))
    if bad.size:
        raise ValueError(f"y rows {bad[:10].tolist()} are not valid 0 <= start < end moments")
    return y
