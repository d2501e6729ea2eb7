"""Dataset container format, synthetic phantom generation, and image export.

Images and label maps are stored in a minimal binary raster container
("SLAUGIMG") so round trips are bit-exact without any imaging dependency.
A dataset directory holds images/, labels/ and a tab-separated manifest.

Phantoms are multi-class ellipse images with per-class intensity bands; the
domain-shift synthesizer applies an independent affine (alpha, beta) map to
each class region, emulating class-level location-scale shift between domains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RandomStream, as_scalar_grid

__all__ = [
    "RasterFormatError",
    "write_raster",
    "read_raster",
    "ManifestEntry",
    "write_manifest",
    "read_manifest",
    "PhantomSpec",
    "generate_phantom",
    "ShiftResult",
    "shift_domain",
    "export_panel",
]

_MAGIC = b"SLAUGIMG"
_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_TAG_FOR_KIND = {"f": 0, "u": 1, "i": 1}


class RasterFormatError(ValueError):
    """Raised when a raster file is malformed; message names the byte offset."""


def write_raster(grid, path) -> None:
    """Write a 2D (or H x W x C) array as an SLAUGIMG file.

    Float arrays are stored as little-endian f32, integer arrays as u8.
    """
    a = np.asarray(grid)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.size == 0:
        raise ValueError(f"expected a non-empty 2D/3D array, got shape {a.shape}")
    h, w, c = a.shape
    tag = _TAG_FOR_KIND.get(a.dtype.kind)
    if tag is None:
        raise ValueError(f"unsupported dtype {a.dtype}")
    if tag == 1 and (a.min() < 0 or a.max() > 255):
        raise ValueError("integer rasters must fit in u8")
    payload = np.ascontiguousarray(a, dtype=_DTYPE_TAGS[tag]).tobytes()
    header = _MAGIC + struct.pack("<HIIHB", _VERSION, h, w, c, tag)
    Path(path).write_bytes(header + payload)


def read_raster(path) -> np.ndarray:
    """Read an SLAUGIMG file; returns float64 for f32 payloads, int64 for u8.

    Single-channel rasters come back as 2D arrays.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:8] != _MAGIC:
        raise RasterFormatError(f"{path}: bad magic at byte offset 0")
    if len(blob) < 21:
        raise RasterFormatError(f"{path}: truncated header at byte offset {len(blob)}")
    version, h, w, c, tag = struct.unpack("<HIIHB", blob[8:21])
    if version != _VERSION:
        raise RasterFormatError(f"{path}: unknown format version {version} at byte offset 8")
    if tag not in _DTYPE_TAGS:
        raise RasterFormatError(f"{path}: unknown dtype tag {tag} at byte offset 20")
    dtype = _DTYPE_TAGS[tag]
    expected = h * w * c * dtype.itemsize
    if len(blob) - 21 != expected:
        raise RasterFormatError(
            f"{path}: payload length {len(blob) - 21} != expected {expected} at byte offset 21"
        )
    a = np.frombuffer(blob, dtype=dtype, offset=21).reshape(h, w, c)
    a = a.astype(np.float64) if tag == 0 else a.astype(np.int64)
    return a[:, :, 0] if c == 1 else a


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str  # path relative to the dataset root
    label: str
    split: str  # train | val | test

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"bad split tag {self.split!r}")


def write_manifest(entries, root) -> None:
    lines = [f"{e.id}\t{e.image}\t{e.label}\t{e.split}" for e in entries]
    (Path(root) / "manifest.tsv").write_text("\n".join(lines) + "\n")


def read_manifest(root) -> list[ManifestEntry]:
    root = Path(root)
    path = root / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest: {path}")
    entries = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"malformed manifest line: {line!r}")
        e = ManifestEntry(*parts)
        for rel in (e.image, e.label):
            if not (root / rel).exists():
                raise FileNotFoundError(f"manifest entry {e.id}: missing file {root / rel}")
        entries.append(e)
    return entries


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and intensity layout of the synthetic phantom family.

    Class 0 is background (body tissue plus blank air outside the body
    ellipse); classes 1..C-1 are "organ" ellipses rendered inside the body in
    order, later classes overwriting earlier ones where they overlap.
    """

    size: int = 96
    num_classes: int = 5
    body_axes: tuple[float, float] = (0.44, 0.40)  # fractions of the image size
    organ_ring_radius: float = 0.21  # organ anchor distance from the body center
    organ_jitter: float = 0.04  # uniform center jitter, fraction of the image size
    organ_axes_range: tuple[float, float] = (0.09, 0.16)
    intensity_bands: tuple[tuple[float, float], ...] = (
        (0.20, 0.32),  # body tissue (class 0 foreground)
        (0.38, 0.50),
        (0.52, 0.64),
        (0.66, 0.78),
        (0.82, 0.94),
    )
    texture_noise_std: float = 0.02
    shift_alpha_range: tuple[float, float] = (0.4, 1.6)
    shift_beta_range: tuple[float, float] = (-0.25, 0.25)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least background plus one organ class")
        if len(self.intensity_bands) != self.num_classes:
            raise ValueError("need one intensity band per class")
        for lo, hi in self.intensity_bands:
            if not (0.0 <= lo < hi <= 1.0):
                raise ValueError(f"intensity band [{lo}, {hi}] must lie within [0, 1]")


def _ellipse_mask(size, center, axes):
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ((rows - center[0]) / axes[0]) ** 2 + ((cols - center[1]) / axes[1]) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, rng: RandomStream):
    """Render one phantom: returns (image, labels).

    Background air outside the body ellipse is exactly 0; every labeled pixel
    gets an intensity inside its class band (a radial ramp plus clipped
    texture noise).
    """
    n = spec.size
    center = ((n - 1) / 2.0, (n - 1) / 2.0)
    body = _ellipse_mask(n, center, (spec.body_axes[0] * n, spec.body_axes[1] * n))

    # organs anchored on a ring around the body center (one sector per class)
    # with jittered centers and axes, so every class is present in every slice
    labels = np.zeros((n, n), dtype=np.int64)
    n_organs = spec.num_classes - 1
    for c in range(1, spec.num_classes):
        placed = False
        for _ in range(50):
            angle = 2.0 * np.pi * (c - 1) / n_organs + rng.uniform(-0.3, 0.3)
            r = spec.organ_ring_radius * n
            off = (r * np.sin(angle), r * np.cos(angle))
            off = (
                off[0] + rng.uniform(-spec.organ_jitter, spec.organ_jitter) * n,
                off[1] + rng.uniform(-spec.organ_jitter, spec.organ_jitter) * n,
            )
            axes = rng.uniform(*spec.organ_axes_range, size=2) * n
            mask = _ellipse_mask(n, (center[0] + off[0], center[1] + off[1]), axes)
            inside = mask & body & (labels == 0)
            if inside.sum() >= 0.7 * mask.sum() and mask.sum() > 0:
                labels[inside] = c
                placed = True
                break
        if not placed:
            raise RuntimeError(f"could not place class {c} inside the body after 50 tries")

    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    radial = np.sqrt((rows - center[0]) ** 2 + (cols - center[1]) ** 2)
    radial = radial / radial.max()

    image = np.zeros((n, n), dtype=np.float64)
    for c in range(spec.num_classes):
        mask = (labels == c) & body
        if not mask.any():
            continue
        lo, hi = spec.intensity_bands[c]
        ramp = lo + (hi - lo) * radial[mask]
        noisy = ramp + rng.normal(0.0, spec.texture_noise_std, size=ramp.shape)
        image[mask] = np.clip(noisy, lo, hi)
    return image, labels


@dataclass(frozen=True)
class ShiftResult:
    image: np.ndarray
    alphas: dict[int, float]
    betas: dict[int, float]


def shift_domain(x, m, spec: PhantomSpec, rng: RandomStream) -> ShiftResult:
    """Synthesize a target-domain version: per class c, alpha_c * x^c + beta_c.

    Only foreground pixels (intensity > 0) are shifted; blank air stays 0.
    """
    a = as_scalar_grid(x)
    labels = np.asarray(m)
    if labels.shape != a.shape:
        raise ValueError(f"label shape {labels.shape} != image shape {a.shape}")
    fg = a > 0
    out = a.copy()
    alphas: dict[int, float] = {}
    betas: dict[int, float] = {}
    for c in range(spec.num_classes):
        support = (labels == c) & fg
        alpha = float(rng.uniform(*spec.shift_alpha_range))
        beta = float(rng.uniform(*spec.shift_beta_range))
        alphas[c] = alpha
        betas[c] = beta
        if support.any():
            out[support] = alpha * a[support] + beta
    return ShiftResult(image=out, alphas=alphas, betas=betas)


def export_panel(named_grids, path) -> None:
    """Write named grids side by side as one 8-bit binary PGM image.

    Each grid is min-max scaled to 0..255 independently (constant grids render
    mid-gray 128); panels are separated by 2-px black columns.
    """
    items = list(named_grids.items()) if isinstance(named_grids, dict) else list(named_grids)
    if not items:
        raise ValueError("no grids to export")
    grids = [as_scalar_grid(g) for _, g in items]
    h = grids[0].shape[0]
    if any(g.shape[0] != h for g in grids):
        raise ValueError("all panel grids must share the same height")

    panels = []
    for g in grids:
        lo, hi = g.min(), g.max()
        if hi > lo:
            scaled = np.round((g - lo) / (hi - lo) * 255.0)
        else:
            scaled = np.full_like(g, 128.0)
        panels.append(scaled.astype(np.uint8))

    sep = np.zeros((h, 2), dtype=np.uint8)
    cols = []
    for i, p in enumerate(panels):
        if i:
            cols.append(sep)
        cols.append(p)
    out = np.hstack(cols)
    header = f"P5\n{out.shape[1]} {out.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + out.tobytes())
