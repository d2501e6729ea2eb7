"""Domain types, deterministic randomness, normalization, and class-wise decomposition.

Images are carried as 2D float64 numpy arrays (row-major, H x W); label maps
are 2D integer arrays with class 0 reserved for background. These carriers are
treated as immutable by every public operation: outputs are always fresh arrays.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RandomStream",
    "AugConfig",
    "as_scalar_grid",
    "as_label_grid",
    "minmax_normalize",
    "decompose_by_class",
    "recompose",
    "sample_trunc_gauss",
]


class RandomStream:
    """Counter-based deterministic random stream.

    Built on the Philox bit generator, so an identical seed reproduces the
    identical sample sequence on every platform. Child streams derived by
    ``child(label)`` are independent of each other and of draw order on the
    parent: the child key is a hash of (seed, label), never the parent state.
    """

    def __init__(self, seed: int):
        if not (0 <= int(seed) < 2**64):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, *labels) -> "RandomStream":
        """Derive an independent stream keyed by (seed, labels)."""
        h = hashlib.sha256()
        h.update(self.seed.to_bytes(8, "little"))
        for label in labels:
            h.update(repr(label).encode())
            h.update(b"\x00")
        return RandomStream(int.from_bytes(h.digest()[:8], "little"))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self):
        return f"RandomStream(seed={self.seed})"


@dataclass(frozen=True)
class AugConfig:
    """Sampling hyperparameters for the augmentation engine.

    Defaults follow the reference settings: scale factor std 0.1, location
    factor std 0.5, 2-sigma truncation, background curves always inverted and
    other classes inverted half the time. ``grid_size`` controls saliency
    smoothing granularity; ``lut_samples`` the density of the curve tables.
    The remaining fields parameterize the common augmentation stack.
    """

    sigma1: float = 0.1
    sigma2: float = 0.5
    trunc_k: float = 2.0
    invert_prob_background: float = 1.0
    invert_prob_other: float = 0.5
    grid_size: int = 3
    lut_samples: int = 1000

    # common augmentation ranges
    rotate_deg: float = 20.0
    shift_px: float = 15.0
    shear_deg: float = 20.0
    scale_range: tuple[float, float] = (0.5, 1.5)
    elastic_alpha: float = 20.0
    elastic_sigma: float = 5.0
    brightness_range: tuple[float, float] = (-10.0, 10.0)  # on the 0-255 scale
    contrast_range: tuple[float, float] = (0.6, 1.5)
    gamma_range: tuple[float, float] = (0.2, 1.8)
    noise_std: float = 0.15

    def __post_init__(self):
        for name in ("invert_prob_background", "invert_prob_other"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("sigma1 and sigma2 must be non-negative")
        if self.trunc_k <= 0:
            raise ValueError("trunc_k must be positive")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if self.lut_samples < 2:
            raise ValueError("lut_samples must be >= 2")


def as_scalar_grid(x) -> np.ndarray:
    """Validate and return ``x`` as a float64 H x W grid of finite values."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty 2D grid, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("grid contains NaN or Inf")
    return a


def as_label_grid(m, num_classes: int) -> np.ndarray:
    """Validate and return ``m`` as an integer H x W label grid in [0, C-1]."""
    a = np.asarray(m)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty 2D label grid, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.array_equal(a, a.astype(np.int64)):
            raise ValueError("labels must be integers")
    a = a.astype(np.int64)
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if a.min() < 0 or a.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes - 1}]")
    return a


def minmax_normalize(x) -> np.ndarray:
    """Rescale a grid affinely into [0, 1].

    A constant grid maps to all zeros (featureless slices are treated as
    blank). Value ordering is preserved.
    """
    a = as_scalar_grid(x)
    lo = a.min()
    hi = a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def decompose_by_class(x, m, num_classes: int) -> list[np.ndarray]:
    """Split an image into per-class regions: out[c] = x where labels == c, else 0.

    The supports are disjoint and cover the grid, so summing the parts
    reconstructs the image exactly.
    """
    a = as_scalar_grid(x)
    labels = as_label_grid(m, num_classes)
    if a.shape != labels.shape:
        raise ValueError(f"image shape {a.shape} != label shape {labels.shape}")
    return [np.where(labels == c, a, 0.0) for c in range(num_classes)]


def recompose(parts) -> np.ndarray:
    """Sum per-class regions back into one image (inverse of decompose)."""
    if not parts:
        raise ValueError("no parts to recompose")
    out = np.zeros_like(np.asarray(parts[0], dtype=np.float64))
    for p in parts:
        out = out + np.asarray(p, dtype=np.float64)
    return out


def sample_trunc_gauss(mean: float, sigma: float, k: float, rng: RandomStream) -> float:
    """Draw from a Gaussian truncated to [mean - k*sigma, mean + k*sigma].

    Rejection sampling; with k = 2 the acceptance rate is ~95% so the loop
    terminates almost immediately. sigma = 0 returns the mean exactly.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if k <= 0:
        raise ValueError("k must be positive")
    if sigma == 0.0:
        return float(mean)
    lo = mean - k * sigma
    hi = mean + k * sigma
    while True:
        v = rng.normal(mean, sigma)
        if lo <= v <= hi:
            return float(v)
