"""Frequency separation: Gaussian low-pass base layer plus residual texture.

The base (diffusion) layer carries the low-frequency subsurface color that
the blemish model is fitted to; the texture layer is the per-pixel
difference and is preserved verbatim through editing, so
``base + texture`` reconstructs the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError
from .pixelcore import PixelPatch


@dataclass
class LayerPair:
    base: PixelPatch
    texture: PixelPatch
    sigma: float


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalized 1D Gaussian taps, truncated at ``ceil(3*sigma)`` by default."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(p: PixelPatch, sigma: float) -> PixelPatch:
    """Separable 2D Gaussian blur with mirrored (reflect-101) borders."""
    k = gaussian_kernel(sigma)
    out = np.empty_like(p.channels)
    for c in range(3):
        tmp = correlate1d(p.channels[c], k, axis=0, mode="mirror")
        out[c] = correlate1d(tmp, k, axis=1, mode="mirror")
    return p.with_channels(out)


def separate(p: PixelPatch, sigma: float) -> LayerPair:
    """Split into ``base = blur(p)`` and ``texture = p - base``."""
    base = gaussian_blur(p, sigma)
    texture = p.with_channels(p.channels - base.channels)
    return LayerPair(base=base, texture=texture, sigma=sigma)


def default_sigma(roi_width: int) -> float:
    """Blur width scaled to the region size, clamped to [2, 12] px."""
    return float(min(12.0, max(2.0, 5.0 * roi_width / 200.0)))
