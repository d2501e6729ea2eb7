"""Saliency-balancing fusion: gradient magnitude, grid smoothing, and blending.

The raw input-gradient map is reduced to a channel-wise l2 norm, average-pooled
onto a coarse g x g grid, interpolated back to full resolution with a separable
quadratic B-spline kernel, and min-max normalized into [0, 1]. The resulting
map weights a pixelwise convex combination of the globally and locally
augmented images.
"""

from __future__ import annotations

import numpy as np

from .core import as_scalar_grid

__all__ = [
    "gradient_magnitude",
    "smooth_saliency",
    "normalize_saliency",
    "fuse",
    "saliency_map",
]


def gradient_magnitude(grads) -> np.ndarray:
    """Pixelwise Euclidean norm across input channels."""
    grads = [as_scalar_grid(g) for g in grads]
    if not grads:
        raise ValueError("need at least one gradient channel")
    shape = grads[0].shape
    for g in grads:
        if g.shape != shape:
            raise ValueError("gradient channels must share dimensions")
    return np.sqrt(np.sum([g * g for g in grads], axis=0))


def _quadratic_bspline(t: np.ndarray) -> np.ndarray:
    at = np.abs(t)
    out = np.zeros_like(at)
    inner = at <= 0.5
    out[inner] = 0.75 - at[inner] ** 2
    ring = (at > 0.5) & (at <= 1.5)
    out[ring] = 0.5 * (1.5 - at[ring]) ** 2
    return out


def _upsample_weights(n: int, g: int) -> np.ndarray:
    """n x g weight matrix evaluating the quadratic B-spline basis at pixel centers.

    Coarse cell values sit at cell centers; out-of-range basis indices are
    clamped to the edge cells, which keeps every row summing to 1 (so constants
    are reproduced exactly).
    """
    # pixel centers in coarse-cell coordinates, clamped to the cell-center span
    u = (np.arange(n) + 0.5) * g / n - 0.5
    u = np.clip(u, 0.0, g - 1.0)
    w = np.zeros((n, g))
    base = np.floor(u).astype(int)
    for off in range(-2, 3):
        j = base + off
        wt = _quadratic_bspline(u - j)
        jc = np.clip(j, 0, g - 1)
        np.add.at(w, (np.arange(n), jc), wt)
    return w


def smooth_saliency(raw, g: int) -> np.ndarray:
    """Average-pool onto a g x g grid, then B-spline upsample to the input size.

    Linear in the input by construction, and exact on constants.
    """
    a = as_scalar_grid(raw)
    h, w = a.shape
    if g < 1:
        raise ValueError("grid size must be >= 1")
    if g > min(h, w):
        raise ValueError(f"grid size {g} exceeds image extent {min(h, w)}")

    row_edges = np.linspace(0, h, g + 1).astype(int)
    col_edges = np.linspace(0, w, g + 1).astype(int)
    coarse = np.empty((g, g))
    for i in range(g):
        for j in range(g):
            coarse[i, j] = a[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]].mean()

    wr = _upsample_weights(h, g)
    wc = _upsample_weights(w, g)
    return wr @ coarse @ wc.T


def normalize_saliency(smoothed) -> np.ndarray:
    """Min-max normalize into [0, 1]; a (near-)constant map becomes all ones.

    The all-ones degenerate output makes fusion collapse to the GLA image,
    which is the intended behavior when the gradient carries no structure
    (and for grid size 1).
    """
    a = as_scalar_grid(smoothed)
    lo, hi = a.min(), a.max()
    if hi - lo < 1e-12:
        return np.ones_like(a)
    return (a - lo) / (hi - lo)


def fuse(xg, xl, s) -> np.ndarray:
    """Pixelwise convex blend: s * xg + (1 - s) * xl."""
    ag = as_scalar_grid(xg)
    al = as_scalar_grid(xl)
    sm = as_scalar_grid(s)
    if ag.shape != al.shape or ag.shape != sm.shape:
        raise ValueError("fusion inputs must share dimensions")
    return sm * ag + (1.0 - sm) * al


def saliency_map(grads, g: int) -> np.ndarray:
    """Full chain: normalize(smooth(|grad|)) at grid size g."""
    return normalize_saliency(smooth_saliency(gradient_magnitude(grads), g))
