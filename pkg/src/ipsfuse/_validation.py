"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .shuffle import as_image


def check_images(X) -> list[np.ndarray]:
    """Accept one image, a list of images, or an (n, H, W[, J]) array."""
    if isinstance(X, np.ndarray) and X.ndim in (2, 3) and (X.ndim == 2 or X.shape[-1] in (1, 3)):
        # a single (H, W) or (H, W, J) image; (n, H, W) stacks must be 4-D or lists
        return [as_image(X.astype(np.float64, copy=False))]
    imgs = [as_image(np.asarray(x, dtype=np.float64)) for x in X]
    if not imgs:
        raise ValueError("expected at least one image")
    channels = {i.shape[2] for i in imgs}
    if len(channels) != 1:
        raise ValueError(f"images mix channel counts {sorted(channels)}")
    return imgs


def check_pairs(X) -> list[tuple[np.ndarray, np.ndarray]]:
    """Accept a list of (A, B) pairs or an (n, 2, H, W[, J]) array."""
    pairs = []
    for item in X:
        if len(item) != 2:
            raise ValueError(f"each sample must be a pair of source images, got {len(item)} items")
        a = as_image(np.asarray(item[0], dtype=np.float64))
        b = as_image(np.asarray(item[1], dtype=np.float64))
        if a.shape != b.shape:
            raise ValueError(f"source images differ in shape: {a.shape} vs {b.shape}")
        pairs.append((a, b))
    if not pairs:
        raise ValueError("expected at least one pair")
    return pairs


def stack_if_uniform(imgs: list[np.ndarray]):
    """Stack into one array when all shapes agree, else return the list."""
    if len({i.shape for i in imgs}) == 1:
        return np.stack(imgs)
    return imgs
