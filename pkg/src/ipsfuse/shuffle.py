"""Training-pair synthesis by inter-image pixel shuffling.

A sharp image and a low-pass copy of it form, at every (row, col, channel),
a two-element pixel group. A random binary mask decides per element which
of the two outputs receives the sharp value; the other output receives the
blurred one. The network later learns to pick the sharp member of each group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "FILTER_KINDS",
    "ShuffleConfig",
    "ShuffledSample",
    "as_image",
    "low_pass_filter",
    "sample_mask",
    "recombine",
    "reconstruct_with_mask",
    "draw_kernel_size",
    "synthesize",
    "make_training_sample",
]

FILTER_KINDS = ("mean", "gaussian", "median")
KERNEL_MIN, KERNEL_MAX = 3, 31


@dataclass(frozen=True)
class ShuffleConfig:
    mask_zero_probability: float = 0.5
    filter_kind: str = "mean"
    kernel_range: tuple[int, int] = (KERNEL_MIN, KERNEL_MAX)
    swap: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel_range", tuple(int(k) for k in self.kernel_range))

    def validate(self) -> "ShuffleConfig":
        p = self.mask_zero_probability
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"mask_zero_probability must lie in [0, 1], got {p}")
        if self.filter_kind not in FILTER_KINDS:
            raise ValueError(f"filter_kind must be one of {FILTER_KINDS}, got {self.filter_kind!r}")
        lo, hi = self.kernel_range
        if not (KERNEL_MIN <= lo <= hi <= KERNEL_MAX) or lo % 2 == 0 or hi % 2 == 0:
            raise ValueError(
                f"kernel_range must be odd integers with {KERNEL_MIN} <= k_min <= k_max <= {KERNEL_MAX}, "
                f"got {self.kernel_range}"
            )
        return self


@dataclass
class ShuffledSample:
    shuffled_f: np.ndarray
    shuffled_d: np.ndarray
    target: np.ndarray
    filtered: np.ndarray
    mask: np.ndarray
    kernel: int
    swapped: bool


def as_image(img) -> np.ndarray:
    """Validate and return an (H, W, J) float image with values in [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"image must be (H, W) or (H, W, J) with J in {{1, 3}}, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise TypeError(f"image must hold floating-point intensities, got {arr.dtype}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 or not np.isfinite(arr).all()):
        raise ValueError("image intensities must lie in [0, 1]")
    return arr


def low_pass_filter(img, kind: str = "mean", k: int = 3) -> np.ndarray:
    """Blur every channel independently with a k x k window, mirrored borders.

    ``mean`` averages the window, ``gaussian`` uses sigma = k / 6 truncated to
    the window, ``median`` takes the window median.
    """
    img = as_image(img)
    k = int(k)
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if not KERNEL_MIN <= k <= KERNEL_MAX:
        raise ValueError(f"kernel size must lie in [{KERNEL_MIN}, {KERNEL_MAX}], got {k}")
    h, w = img.shape[:2]
    if k > 2 * min(h, w):
        raise ValueError(f"kernel size {k} too large for a {h}x{w} image")
    if kind == "mean":
        out = ndimage.uniform_filter(img, size=(k, k, 1), mode="mirror")
    elif kind == "gaussian":
        sigma = k / 6.0
        out = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), radius=((k - 1) // 2, (k - 1) // 2, 0), mode="mirror")
    elif kind == "median":
        out = ndimage.median_filter(img, size=(k, k, 1), mode="mirror")
    else:
        raise ValueError(f"filter kind must be one of {FILTER_KINDS}, got {kind!r}")
    return np.clip(out, 0.0, 1.0)


def sample_mask(dims, p: float, rng: np.random.Generator) -> np.ndarray:
    """Binary mask whose entries are 0 with probability ``p``, else 1."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return (rng.random(dims) >= p).astype(np.uint8)


def _check_same(*arrays) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"operands differ in shape: {[a.shape for a in arrays]}")


def recombine(sharp, blurred, mask) -> tuple[np.ndarray, np.ndarray]:
    sharp, blurred, mask = np.asarray(sharp), np.asarray(blurred), np.asarray(mask)
    _check_same(sharp, blurred, mask)
    m = mask.astype(sharp.dtype)
    inv = 1 - m
    return sharp * m + blurred * inv, sharp * inv + blurred * m


def reconstruct_with_mask(shuffled_f, shuffled_d, mask) -> np.ndarray:
    """Undo :func:`recombine`: recover the sharp image from both outputs and the mask."""
    shuffled_f, shuffled_d, mask = np.asarray(shuffled_f), np.asarray(shuffled_d), np.asarray(mask)
    _check_same(shuffled_f, shuffled_d, mask)
    m = mask.astype(shuffled_f.dtype)
    return shuffled_f * m + shuffled_d * (1 - m)


def draw_kernel_size(kernel_range, rng: np.random.Generator) -> int:
    lo, hi = kernel_range
    return int(rng.choice(np.arange(lo, hi + 1, 2)))


def synthesize(src, cfg: ShuffleConfig, rng: np.random.Generator, kernel: int | None = None) -> ShuffledSample:
    """One shuffled pair with every intermediate kept.

    Random draws happen in a fixed order (kernel, mask, swap) so a sample can
    be replayed from its generator seed. A kernel drawn here is overridden by
    ``kernel`` when given, but the draw still happens.
    """
    cfg.validate()
    src = as_image(src)
    k = draw_kernel_size(cfg.kernel_range, rng)
    if kernel is not None:
        k = int(kernel)
    blurred = low_pass_filter(src, cfg.filter_kind, k)
    mask = sample_mask(src.shape, cfg.mask_zero_probability, rng)
    a, b = recombine(src, blurred, mask)
    swapped = bool(cfg.swap and rng.random() < 0.5)
    if swapped:
        a, b = b, a
    return ShuffledSample(a, b, src, blurred, mask, k, swapped)


def make_training_sample(src, cfg: ShuffleConfig, rng: np.random.Generator):
    """Return ``(shuffled_f, shuffled_d, target)``; target is the unfiltered source."""
    s = synthesize(src, cfg, rng)
    return s.shuffled_f, s.shuffled_d, s.target
