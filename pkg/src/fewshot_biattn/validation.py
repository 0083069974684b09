"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np


def check_image_array(x, name: str = "X") -> np.ndarray:
    """Coerce to a float64 (batch, channels, height, width) image array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-d (batch, channels, height, width), "
                         f"got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_support_set(x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Validate a support set and group it per class.

    Returns (classes, grouped, k_shot_array) where ``grouped`` has shape
    (n_classes, k_shot, c, h, w) with classes in sorted label order; every
    class must contribute the same number of shots.
    """
    images = check_image_array(x, "support images")
    labels = np.asarray(y)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise ValueError(f"labels must be 1-d with one entry per image, "
                         f"got {labels.shape} for {images.shape[0]} images")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("support set needs at least 2 classes")
    if counts.min() != counts.max():
        raise ValueError(f"unbalanced support set: shot counts {dict(zip(classes, counts))}")
    k = int(counts[0])
    grouped = np.stack([images[labels == c] for c in classes])
    return classes, grouped, np.full(len(classes), k)


def check_seed(seed) -> int:
    s = int(seed)
    if s < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return s
