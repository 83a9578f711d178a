"""Synthetic echo-like videos: a pulsating ellipse with exact, controllable
area-length ejection fraction, plus the proxy-EF computation and a threshold
segmentation oracle.

Geometry convention: pixel (row i, col j) has its center at (x=j, y=i); the
ellipse is centered at ((W-1)/2, (H-1)/2) with constant long semi-axis `a`
along x and short semi-axis b shrinking from b_ed to b_es = b_ed*sqrt(1-ef).
With `a` constant, the area-length volume V = (8/(3*pi)) * A^2 / L gives
EF = 1 - (b_es/b_ed)^2 exactly, so the generator EF is invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "DEFAULT_TAU",
    "EllipseVideoSpec",
    "SegMask",
    "SegmentationError",
    "generate_toy_video",
    "analytic_cavity_mask",
    "ellipse_short_axis",
    "proxy_ef",
    "segment_threshold",
    "area_and_length",
    "dice",
]

BG_LEVEL = 0.05
CAVITY_LEVEL = 0.10
RING_LEVEL = 0.95
EDGE_SOFTNESS = 0.25  # approximate edge blur, in pixels
DEFAULT_TAU = 0.35  # threshold between cavity/background and ring levels


class SegmentationError(RuntimeError):
    """Thresholding found no cavity component."""


@dataclass(frozen=True)
class EllipseVideoSpec:
    """Parameters of one pulsating-ellipse video."""

    ef: float
    f: int
    H: int = 64
    W: int = 64
    a: float = 24.0
    b_ed: float = 20.0
    ring: float = 4.0
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ef < 1.0:
            raise ValueError(f"ef must lie in [0,1), got {self.ef}")
        if self.f < 2:
            raise ValueError("need at least 2 frames (ED and ES)")
        cx, cy = (self.W - 1) / 2.0, (self.H - 1) / 2.0
        if self.a + self.ring > cx or self.b_ed + self.ring > cy:
            raise ValueError("ellipse (with ring) exceeds the frame")

    @property
    def b_es(self) -> float:
        return self.b_ed * np.sqrt(1.0 - self.ef)


@dataclass(frozen=True)
class SegMask:
    """Binary H x W cavity mask with physical pixel area."""

    mask: np.ndarray
    pixel_area: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("mask must be a 2-D grid")
        if not m.any():
            raise ValueError("mask is empty")
        object.__setattr__(self, "mask", m)


def ellipse_short_axis(spec: EllipseVideoSpec, i: int) -> float:
    """Short semi-axis at frame i: cosine-eased shrink from b_ed to b_es."""
    s = i / (spec.f - 1)
    w = 0.5 * (1.0 - np.cos(np.pi * s))
    return spec.b_ed * np.sqrt(1.0 - spec.ef * w)


def _grid(H: int, W: int):
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    ys, xs = np.mgrid[0:H, 0:W]
    return xs - cx, ys - cy


def _render_frame(spec: EllipseVideoSpec, b: float) -> np.ndarray:
    dx, dy = _grid(spec.H, spec.W)
    rho_in = np.sqrt((dx / spec.a) ** 2 + (dy / b) ** 2)
    ao, bo = spec.a + spec.ring, b + spec.ring
    rho_out = np.sqrt((dx / ao) ** 2 + (dy / bo) ** 2)
    # signed pseudo-distance in pixels so the blur width is resolution-free
    d_in = (rho_in - 1.0) * min(spec.a, b)
    d_out = (rho_out - 1.0) * min(ao, bo)
    inside_outer = 1.0 / (1.0 + np.exp(d_out / EDGE_SOFTNESS))
    inside_inner = 1.0 / (1.0 + np.exp(d_in / EDGE_SOFTNESS))
    img = BG_LEVEL + (RING_LEVEL - BG_LEVEL) * inside_outer
    img = img + (CAVITY_LEVEL - RING_LEVEL) * inside_inner
    return img


def generate_toy_video(spec: EllipseVideoSpec) -> tuple[np.ndarray, float]:
    """Render the video and return (frames (f,1,H,W) in [0,1], true EF).

    Frame 0 is end-diastole, frame f-1 end-systole. The returned EF is the
    area-length value on the exact continuous geometry and matches spec.ef.
    """
    rng = np.random.default_rng(spec.seed)
    frames = np.empty((spec.f, 1, spec.H, spec.W), dtype=np.float64)
    for i in range(spec.f):
        img = _render_frame(spec, ellipse_short_axis(spec, i))
        if spec.noise_sigma > 0:
            z = rng.standard_normal(img.shape)
            speckle = np.exp(spec.noise_sigma * z - spec.noise_sigma**2 / 2.0)
            img = img * speckle
        frames[i, 0] = np.clip(img, 0.0, 1.0)

    # exact-geometry areas and lengths through the same proxy formula
    a_ed, a_es = np.pi * spec.a * spec.b_ed, np.pi * spec.a * spec.b_es
    l_ed = l_es = 2.0 * spec.a
    true_ef = 1.0 - (l_ed / l_es) * (a_es / a_ed) ** 2
    return frames, float(true_ef)


def analytic_cavity_mask(spec: EllipseVideoSpec, i: int) -> SegMask:
    """Pixelized exact cavity mask at frame i (centers inside the ellipse)."""
    b = ellipse_short_axis(spec, i)
    dx, dy = _grid(spec.H, spec.W)
    return SegMask((dx / spec.a) ** 2 + (dy / b) ** 2 <= 1.0)


def segment_threshold(frame: np.ndarray, tau: float) -> SegMask:
    """Cavity mask: largest dark connected component enclosed by the ring.

    Pixels below tau are candidates; components touching the image border are
    background and get discarded. Deterministic.
    """
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("frame must be a 2-D image")
    if not np.all(np.isfinite(img)):
        raise ValueError("frame contains non-finite values")
    below = img < tau
    labels, n = ndimage.label(below)
    if n == 0:
        raise SegmentationError("no component below threshold")
    border = np.zeros_like(below)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    border_labels = set(np.unique(labels[border & below]))
    sizes = ndimage.sum_labels(below, labels, index=np.arange(1, n + 1))
    best, best_size = 0, 0
    for lab in range(1, n + 1):
        if lab in border_labels:
            continue
        if sizes[lab - 1] > best_size:
            best, best_size = lab, sizes[lab - 1]
    if best == 0:
        raise SegmentationError("no interior component found")
    return SegMask(labels == best)


def area_and_length(mask: SegMask) -> tuple[float, float]:
    """Cavity area and long-axis length of a pixel mask.

    Area is the pixel count times pixel_area. Length is the spread of pixel
    centers projected on the first principal axis of the pixel coordinates,
    plus one pixel of extent; a near-tie between the principal directions is
    resolved axis-aligned (x wins).
    """
    ys, xs = np.nonzero(mask.mask)
    n = len(xs)
    px = np.sqrt(mask.pixel_area)
    area = n * mask.pixel_area
    if n == 1:
        return area, px
    coords = np.stack([xs, ys], axis=1).astype(np.float64)
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if abs(evals[1] - evals[0]) <= 1e-9 * max(evals[1], 1.0):
        axis = np.array([1.0, 0.0])
    else:
        axis = evecs[:, 1]
    proj = centered @ axis
    length = (proj.max() - proj.min() + 1.0) * px
    return area, length


def proxy_ef(mask_ed: SegMask, mask_es: SegMask) -> float:
    """Area-length EF: 1 - (L_ED/L_ES) * (A_ES/A_ED)^2.

    Equivalent to 1 - V_ES/V_ED with V = (8/(3*pi)) * A^2 / L. The raw value
    is returned; callers clamp for reporting if they need to.
    """
    a_ed, l_ed = area_and_length(mask_ed)
    a_es, l_es = area_and_length(mask_es)
    if l_es <= 0:
        raise ValueError("ES long-axis length must be positive")
    return 1.0 - (l_ed / l_es) * (a_es / a_ed) ** 2


def dice(a: SegMask, b: SegMask) -> float:
    """Dice overlap of two binary masks."""
    inter = np.logical_and(a.mask, b.mask).sum()
    return 2.0 * inter / (a.mask.sum() + b.mask.sum())
