"""Input validation helpers for the estimator-facing API.

These normalize user arrays to the dtypes and shapes the training stack
expects and fail with messages naming the offending argument, in the spirit
of sklearn.utils.validation (which handles the generic length checking).
"""

import numpy as np
from sklearn.utils.validation import check_consistent_length

from .datasets import UNKNOWN_CLASS


def check_spectra(X, name: str = "X", planes: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 (n, planes, F, T) stack."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"{name} must be 4-D (n, planes, freq, time), got {X.shape}")
    if planes is not None and X.shape[1] != planes:
        raise ValueError(f"{name} must have {planes} planes, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X)


def check_class_labels(y, n_items: int, name: str = "y",
                       allow_unknown: bool = False) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_items:
        raise ValueError(f"{name} must be 1-D with {n_items} entries, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"{name} must be integer class labels, got dtype {y.dtype}")
    y = y.astype(np.int64)
    bad = y < 0 if not allow_unknown else (y < 0) & (y != UNKNOWN_CLASS)
    if np.any(bad):
        raise ValueError(f"{name} has negative class labels")
    return y


def check_domain_labels(domain, n_items: int, name: str = "domain") -> np.ndarray:
    domain = np.asarray(domain)
    if domain.ndim != 1 or domain.shape[0] != n_items:
        raise ValueError(
            f"{name} must be 1-D with {n_items} entries, got {domain.shape}"
        )
    if not np.issubdtype(domain.dtype, np.integer):
        raise ValueError(f"{name} must be integer domain labels, got {domain.dtype}")
    domain = domain.astype(np.int64)
    if np.any(domain < 0):
        raise ValueError(f"{name} has negative domain labels")
    return domain


def check_matching_lengths(*arrays) -> None:
    check_consistent_length(*arrays)
