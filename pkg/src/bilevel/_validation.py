"""Input checks shared by the estimator wrappers."""

import numpy as np
from sklearn.utils.validation import check_array, check_X_y

from .core import Dataset


def check_dataset(X, y, classification=False, name=""):
    """Validate ``(X, y)`` and wrap it as a :class:`Dataset`.

    Class labels are re-encoded to ``0..C-1``; the original labels are
    returned alongside so predictions can be mapped back.
    """
    X, y = check_X_y(X, y, dtype=np.float64, y_numeric=not classification)
    if not classification:
        return Dataset(X, y.astype(np.float64), name), None
    classes, codes = np.unique(y, return_inverse=True)
    return Dataset(X, codes, name, len(classes)), classes


def check_features(X, n_features):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


def check_positive(value, name):
    if not (np.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value
