"""Input validation helpers shared by the estimators and config loaders."""

from __future__ import annotations

import math

import numpy as np
from sklearn.utils.validation import check_array


def check_probability(value, name: str) -> float:
    v = float(value)
    if not (math.isfinite(v) and 0.0 <= v <= 1.0):
        raise ValueError(f"{name} must be in [0, 1], got {value!r}")
    return v


def check_positive(value, name: str, allow_zero: bool = False) -> float:
    v = float(value)
    ok = v >= 0 if allow_zero else v > 0
    if not (math.isfinite(v) and ok):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")
    return v


def check_kpi_array(X) -> np.ndarray:
    """2-D float array with columns snr_db, bler, latency_ms, throughput_kbps."""
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] != 4:
        raise ValueError(f"expected 4 KPI columns, got {X.shape[1]}")
    return X


def check_feature_array(X, n_features: int) -> np.ndarray:
    X = check_array(X, dtype=float)
    if X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X
