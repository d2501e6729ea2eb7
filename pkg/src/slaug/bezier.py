"""Constrained cubic Bezier intensity mapping, realized as a monotone LUT.

The curve is anchored at (v_low, v_low) and (v_high, v_high) with two control
points drawn uniformly from [v_low, v_high]^2, which keeps mapped intensities
inside the original range. The inverse variant swaps the endpoint outputs to
(v_low, v_high) / (v_high, v_low), producing a non-increasing mapping.

The parametric curve's input coordinate is not guaranteed monotone for
arbitrary control points, so application goes through a dense lookup table:
sample the curve, sort by input coordinate, average duplicate inputs, and run
a monotone (cumulative extremum) pass over the outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RandomStream, as_scalar_grid

__all__ = [
    "BezierControlPoints",
    "IntensityLUT",
    "sample_control_points",
    "build_intensity_lut",
    "map_intensities",
]


@dataclass(frozen=True)
class BezierControlPoints:
    p0: tuple[float, float]
    p1: tuple[float, float]
    p2: tuple[float, float]
    p3: tuple[float, float]
    inverted: bool


@dataclass(frozen=True)
class IntensityLUT:
    """Piecewise-linear table: xs strictly increasing over [v_low, v_high]."""

    xs: np.ndarray
    ys: np.ndarray
    inverted: bool

    @property
    def v_low(self) -> float:
        return float(self.xs[0])

    @property
    def v_high(self) -> float:
        return float(self.xs[-1])

    def __call__(self, values: np.ndarray) -> np.ndarray:
        v = np.clip(values, self.v_low, self.v_high)
        return np.interp(v, self.xs, self.ys)


def sample_control_points(
    v_low: float, v_high: float, invert: bool, rng: RandomStream
) -> BezierControlPoints:
    """Draw control points for one curve over the intensity range [v_low, v_high]."""
    if v_low >= v_high:
        raise ValueError(f"invalid intensity range [{v_low}, {v_high}]")
    if invert:
        p0 = (v_low, v_high)
        p3 = (v_high, v_low)
    else:
        p0 = (v_low, v_low)
        p3 = (v_high, v_high)
    p1 = (rng.uniform(v_low, v_high), rng.uniform(v_low, v_high))
    p2 = (rng.uniform(v_low, v_high), rng.uniform(v_low, v_high))
    return BezierControlPoints(p0=p0, p1=p1, p2=p2, p3=p3, inverted=invert)


def _bernstein_eval(cp: BezierControlPoints, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = np.array([cp.p0, cp.p1, cp.p2, cp.p3], dtype=np.float64)
    u = 1.0 - s
    b = np.stack([u**3, 3 * u**2 * s, 3 * u * s**2, s**3], axis=-1)
    xy = b @ pts
    return xy[:, 0], xy[:, 1]


def build_intensity_lut(cp: BezierControlPoints, n: int = 1000) -> IntensityLUT:
    """Tabulate the curve at n parameter values and force a monotone mapping."""
    if n < 2:
        raise ValueError("need at least 2 LUT samples")
    s = np.linspace(0.0, 1.0, n)
    xs, ys = _bernstein_eval(cp, s)

    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], ys[order]

    # collapse duplicate input coordinates by averaging their outputs
    # (xs is already sorted, so duplicates are adjacent)
    keep = np.empty(len(xs), dtype=bool)
    keep[0] = True
    np.greater(xs[1:], xs[:-1], out=keep[1:])
    if keep.all():
        ux, uy = xs, ys
    else:
        idx = np.cumsum(keep) - 1
        ux = xs[keep]
        uy = np.bincount(idx, weights=ys) / np.bincount(idx)

    v_low = min(cp.p0[0], cp.p3[0])
    v_high = max(cp.p0[0], cp.p3[0])
    if cp.inverted:
        uy = np.minimum.accumulate(uy)  # non-increasing
    else:
        uy = np.maximum.accumulate(uy)  # non-decreasing
    uy = np.clip(uy, v_low, v_high)

    return IntensityLUT(xs=ux, ys=uy, inverted=cp.inverted)


def map_intensities(x, lut: IntensityLUT, region) -> np.ndarray:
    """Apply the LUT inside a binary region; pixels outside pass through untouched."""
    a = as_scalar_grid(x)
    r = np.asarray(region)
    if r.shape != a.shape:
        raise ValueError(f"region shape {r.shape} != image shape {a.shape}")
    out = a.copy()
    mask = r > 0
    if mask.any():
        out[mask] = lut(a[mask])
    return out
