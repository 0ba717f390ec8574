"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .embeddings import EmbeddingBag, RegionBag


def instance_matrix(bag) -> np.ndarray:
    """Instances of a bag-like input as a float32 (N, D) matrix."""
    if isinstance(bag, EmbeddingBag):
        return bag.instances
    if isinstance(bag, RegionBag):
        return bag.embeddings
    arr = np.asarray(bag, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("each bag must be a non-empty (N, D) matrix")
    if not np.all(np.isfinite(arr)):
        raise ValueError("bag contains non-finite values")
    return arr


def check_bags(bags) -> list[np.ndarray]:
    if len(bags) == 0:
        raise ValueError("need at least one bag")
    mats = [instance_matrix(b) for b in bags]
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise ValueError(f"bags disagree on embedding dim: {sorted(dims)}")
    return mats


def check_binary_labels(y, n_bags: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.shape != (n_bags,):
        raise ValueError(f"expected {n_bags} labels, got shape {arr.shape}")
    values = set(np.unique(arr).tolist())
    if not values <= {0, 1}:
        raise ValueError(f"labels must be binary 0/1, got {sorted(values)}")
    return arr.astype(np.int64)
