"""Global and local location-scale augmentation, plus the common augmentation stack.

GLA applies one forward Bezier curve to the whole foreground followed by an
affine (alpha, beta) perturbation. LLA does the same per class region with
independent curves (background curve always inverted, others inverted with
probability 0.5) and recombines the disjoint supports. Blank (air) pixels are
never touched by either.

The common stack (affine, elastic, brightness, contrast, gamma, noise) is
sampled once per slice and applied to the GLA image, the LLA image, and the
label map with a single shared parameter draw, so the two intensity-augmented
images stay spatially aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .bezier import (
    BezierControlPoints,
    IntensityLUT,
    build_intensity_lut,
    map_intensities,
    sample_control_points,
)
from .core import AugConfig, RandomStream, as_scalar_grid, sample_trunc_gauss

__all__ = [
    "window_clip",
    "percentile_clip",
    "foreground_mask",
    "CurveRecord",
    "GLAResult",
    "LLAResult",
    "gla",
    "lla",
    "CommonAugParams",
    "sample_common_params",
    "apply_common",
    "common_augment",
]


def window_clip(x, lo: float, hi: float) -> np.ndarray:
    """Clamp intensities to a fixed window (e.g. a CT Hounsfield window)."""
    if lo >= hi:
        raise ValueError(f"invalid window [{lo}, {hi}]")
    return np.clip(as_scalar_grid(x), lo, hi)


def percentile_clip(x, upper_pct: float) -> np.ndarray:
    """Clamp the brightest upper_pct percent of intensities to the cut value.

    The cut is the (100 - upper_pct) percentile taken as an actual data value
    (lower-neighbor method), so exactly the values strictly above it are
    affected.
    """
    if not (0.0 < upper_pct < 100.0):
        raise ValueError(f"upper_pct must be in (0, 100), got {upper_pct}")
    a = as_scalar_grid(x)
    cut = np.percentile(a, 100.0 - upper_pct, method="lower")
    return np.minimum(a, cut)


def foreground_mask(x, threshold: float = 0.0) -> np.ndarray:
    """Binary body mask: 1 where intensity is strictly above the blank level."""
    return (as_scalar_grid(x) > threshold).astype(np.float64)


@dataclass(frozen=True)
class CurveRecord:
    """Everything needed to replay one curve application pixelwise."""

    control_points: BezierControlPoints
    lut: IntensityLUT
    alpha: float
    beta: float
    v_low: float
    v_high: float


@dataclass(frozen=True)
class GLAResult:
    image: np.ndarray
    record: CurveRecord | None
    foreground_empty: bool


@dataclass(frozen=True)
class LLAResult:
    image: np.ndarray
    records: dict[int, CurveRecord]
    foreground_empty: bool


def _curve_apply(a, support, invert, cfg, rng):
    """Fit and apply one curve + (alpha, beta) on a support mask; returns (out, record).

    Returns (None, None) when the support has fewer than 2 distinct values:
    constant regions admit no monotone curve and are passed through.
    """
    vals = a[support]
    v_low = float(vals.min())
    v_high = float(vals.max())
    if v_high - v_low <= 0.0:
        return None, None
    cp = sample_control_points(v_low, v_high, invert, rng)
    lut = build_intensity_lut(cp, n=cfg.lut_samples)
    alpha = sample_trunc_gauss(1.0, cfg.sigma1, cfg.trunc_k, rng)
    beta = sample_trunc_gauss(0.0, cfg.sigma2, cfg.trunc_k, rng)
    mapped = alpha * lut(vals) + beta
    record = CurveRecord(
        control_points=cp, lut=lut, alpha=alpha, beta=beta, v_low=v_low, v_high=v_high
    )
    return mapped, record


def gla(x, fg, cfg: AugConfig, rng: RandomStream) -> GLAResult:
    """Global location-scale augmentation: alpha * F_0(x) + beta on the foreground.

    The curve is always forward (never inverted) so the output keeps a
    source-like appearance. Output values are deliberately not clamped back
    into [0, 1]; the location shift is part of the augmentation.
    """
    a = as_scalar_grid(x)
    mask = np.asarray(fg) > 0
    if mask.shape != a.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {a.shape}")
    if not mask.any():
        return GLAResult(image=a.copy(), record=None, foreground_empty=True)
    mapped, record = _curve_apply(a, mask, invert=False, cfg=cfg, rng=rng)
    out = a.copy()
    if mapped is not None:
        out[mask] = mapped
    return GLAResult(image=out, record=record, foreground_empty=False)


def lla(x, m, num_classes: int, fg, cfg: AugConfig, rng: RandomStream) -> LLAResult:
    """Local location-scale augmentation: independent curves per class region.

    Per class c present in the label map, a curve with inversion probability
    p_c (background: invert_prob_background, others: invert_prob_other) and
    its own (alpha_c, beta_c) is applied to the class support restricted to
    the foreground. The per-class intensity range is computed over that same
    support. Disjoint supports make the recombination a plain write-back.
    """
    a = as_scalar_grid(x)
    labels = np.asarray(m)
    mask = np.asarray(fg) > 0
    if labels.shape != a.shape or mask.shape != a.shape:
        raise ValueError("image, labels and foreground mask must share dimensions")
    if not mask.any():
        return LLAResult(image=a.copy(), records={}, foreground_empty=True)

    out = a.copy()
    records: dict[int, CurveRecord] = {}
    for c in range(num_classes):
        support = (labels == c) & mask
        if not support.any():
            continue
        p_inv = cfg.invert_prob_background if c == 0 else cfg.invert_prob_other
        invert = bool(rng.uniform() < p_inv)
        mapped, record = _curve_apply(a, support, invert=invert, cfg=cfg, rng=rng)
        if mapped is None:
            continue
        out[support] = mapped
        records[c] = record
    return LLAResult(image=out, records=records, foreground_empty=False)


@dataclass
class CommonAugParams:
    """One shared parameter draw for the common augmentation stack."""

    rotate_deg: float
    shift: tuple[float, float]  # (row, col) pixels
    shear_deg: float
    scale: float
    displacement: np.ndarray | None  # (2, H, W) elastic field, or None
    brightness: float  # additive, already rescaled to the [0, 1] domain
    contrast: float
    gamma: float
    noise_std: float

    @classmethod
    def identity(cls) -> "CommonAugParams":
        return cls(
            rotate_deg=0.0,
            shift=(0.0, 0.0),
            shear_deg=0.0,
            scale=1.0,
            displacement=None,
            brightness=0.0,
            contrast=1.0,
            gamma=1.0,
            noise_std=0.0,
        )


def sample_common_params(shape, cfg: AugConfig, rng: RandomStream) -> CommonAugParams:
    """Draw one set of common augmentation parameters for a slice."""
    rotate = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
    shift = (rng.uniform(-cfg.shift_px, cfg.shift_px), rng.uniform(-cfg.shift_px, cfg.shift_px))
    shear = rng.uniform(-cfg.shear_deg, cfg.shear_deg)
    scale = rng.uniform(*cfg.scale_range)

    if cfg.elastic_alpha > 0:
        raw = rng.uniform(-1.0, 1.0, size=(2,) + tuple(shape))
        disp = np.stack(
            [
                ndimage.gaussian_filter(raw[0], cfg.elastic_sigma, mode="reflect"),
                ndimage.gaussian_filter(raw[1], cfg.elastic_sigma, mode="reflect"),
            ]
        ) * cfg.elastic_alpha
    else:
        disp = None

    brightness = rng.uniform(*cfg.brightness_range) / 255.0
    contrast = rng.uniform(*cfg.contrast_range)
    gamma = rng.uniform(*cfg.gamma_range)
    return CommonAugParams(
        rotate_deg=float(rotate),
        shift=(float(shift[0]), float(shift[1])),
        shear_deg=float(shear),
        scale=float(scale),
        displacement=disp,
        brightness=float(brightness),
        contrast=float(contrast),
        gamma=float(gamma),
        noise_std=cfg.noise_std,
    )


def _warp_coordinates(shape, params: CommonAugParams) -> np.ndarray | None:
    """Sampling coordinates for the shared geometric transform, or None if identity."""
    geometric = (
        params.rotate_deg != 0.0
        or params.shift != (0.0, 0.0)
        or params.shear_deg != 0.0
        or params.scale != 1.0
        or params.displacement is not None
    )
    if not geometric:
        return None
    h, w = shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0

    theta = np.deg2rad(params.rotate_deg)
    sh = np.tan(np.deg2rad(params.shear_deg))
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear = np.array([[1.0, sh], [0.0, 1.0]])
    mat = (rot @ shear) / params.scale  # inverse mapping: output -> input

    dr = rows - cr
    dc = cols - cc
    src_r = mat[0, 0] * dr + mat[0, 1] * dc + cr - params.shift[0]
    src_c = mat[1, 0] * dr + mat[1, 1] * dc + cc - params.shift[1]
    if params.displacement is not None:
        src_r = src_r + params.displacement[0]
        src_c = src_c + params.displacement[1]
    return np.stack([src_r, src_c])


def _apply_intensity(a: np.ndarray, params: CommonAugParams) -> np.ndarray:
    out = a + params.brightness
    mean = out.mean()
    out = (out - mean) * params.contrast + mean
    if params.gamma != 1.0:
        lo, hi = out.min(), out.max()
        if hi > lo:
            out = ((out - lo) / (hi - lo)) ** params.gamma * (hi - lo) + lo
    return out


def apply_common(params: CommonAugParams, xg, xl, m, num_classes: int, rng: RandomStream):
    """Apply one common-augmentation draw to the image pair and label map.

    Geometric transforms use the same coordinate field for all three inputs
    (bilinear for intensities, nearest for labels); intensity transforms hit
    only the images; noise is drawn independently per image.
    """
    ag = as_scalar_grid(xg)
    al = as_scalar_grid(xl)
    labels = np.asarray(m).astype(np.int64)
    if ag.shape != al.shape or ag.shape != labels.shape:
        raise ValueError("inputs must share dimensions")

    coords = _warp_coordinates(ag.shape, params)
    if coords is not None:
        ag = ndimage.map_coordinates(ag, coords, order=1, mode="reflect")
        al = ndimage.map_coordinates(al, coords, order=1, mode="reflect")
        labels = ndimage.map_coordinates(labels, coords, order=0, mode="reflect")

    ag = _apply_intensity(ag, params)
    al = _apply_intensity(al, params)

    if params.noise_std > 0:
        std_g = rng.uniform(0.0, params.noise_std)
        ag = ag + rng.normal(0.0, 1.0, size=ag.shape) * std_g
        std_l = rng.uniform(0.0, params.noise_std)
        al = al + rng.normal(0.0, 1.0, size=al.shape) * std_l
    return ag, al, labels


def common_augment(xg, xl, m, num_classes: int, cfg: AugConfig, rng: RandomStream):
    """Sample shared parameters and apply the full common stack to a slice."""
    ag = as_scalar_grid(xg)
    params = sample_common_params(ag.shape, cfg, rng)
    return apply_common(params, xg, xl, m, num_classes, rng)
