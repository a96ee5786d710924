"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

__all__ = ["check_env_labels", "group_indices"]


def check_env_labels(envs, n_samples: int) -> np.ndarray:
    """Validate the per-observation environment labels."""
    envs = np.asarray(envs)
    if envs.ndim != 1 or envs.shape[0] != n_samples:
        raise ValueError(
            f"envs must be a 1-d array with one label per sample "
            f"(got shape {envs.shape} for {n_samples} samples)"
        )
    return envs


def group_indices(envs: np.ndarray):
    """Return (sorted unique env labels, list of index arrays per env)."""
    labels = np.unique(envs)
    return labels, [np.flatnonzero(envs == label) for label in labels]


def check_features(X):
    return check_array(X, dtype=np.float64, ensure_all_finite=True)
