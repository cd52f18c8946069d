"""Input validation helpers shared by the estimator-style API."""

from __future__ import annotations

import numpy as np


def check_feature_matrix(x, feature_dim: int, name: str = "X") -> np.ndarray:
    """Validate one sequence of per-frame feature vectors as (T, D) float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != feature_dim:
        raise ValueError(f"{name} must have shape (T, {feature_dim}), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} must contain at least one frame")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_sequences(x, feature_dim: int) -> list[np.ndarray]:
    """Validate a ragged batch of sequences; returns float64 copies."""
    if len(x) == 0:
        raise ValueError("X must contain at least one sequence")
    return [check_feature_matrix(seq, feature_dim, name=f"X[{i}]") for i, seq in enumerate(x)]


def check_probabilities(p, num_classes: int | None = None, name: str = "probs") -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_samples, n_classes), got {arr.ndim}-D")
    if num_classes is not None and arr.shape[1] != num_classes:
        raise ValueError(f"{name} must have {num_classes} columns, got {arr.shape[1]}")
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} entries must be probabilities in [0, 1]")
    return arr


def check_binary_matrix(y, num_classes: int | None = None, name: str = "targets") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n_samples, n_classes), got {arr.ndim}-D")
    if num_classes is not None and arr.shape[1] != num_classes:
        raise ValueError(f"{name} must have {num_classes} columns, got {arr.shape[1]}")
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1, True, False))):
        raise ValueError(f"{name} must be binary")
    return arr.astype(np.float64)


def check_matching_lengths(a, b, names: tuple[str, str] = ("predictions", "targets")) -> None:
    if len(a) != len(b):
        raise ValueError(f"{names[0]} and {names[1]} must have equal length ({len(a)} vs {len(b)})")


def check_seed_rng(rng) -> np.random.Generator:
    """Accept a Generator or a seed; everything random flows through one stream."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
