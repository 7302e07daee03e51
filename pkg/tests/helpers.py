"""Shared test utilities."""

import numpy as np


def rel_err(actual, expected) -> float:
    """Max absolute difference scaled by the largest expected magnitude."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = max(np.abs(expected).max(initial=0.0), 1e-12)
    return float(np.abs(actual - expected).max(initial=0.0) / denom)


def random_stochastic_rows(rng, shape) -> np.ndarray:
    """Row-stochastic matrices via normalized exponentials."""
    raw = np.exp(rng.normal(shape))
    return raw / raw.sum(axis=-1, keepdims=True)
