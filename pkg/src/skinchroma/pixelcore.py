"""Image containers and deterministic color transforms.

Three value spaces are used throughout the pipeline:

* ``Linear``        -- linear reflectance in [0, 1] (inverse-gamma sRGB)
* ``LogAbsorption`` -- per-channel ``-ln(reflectance)``, floored so black
                       pixels stay finite
* ``Chromophore``   -- haemoglobin / melanin / residual concentrations,
                       obtained from log absorption via a mixing matrix

All internal arithmetic is float64; quantization happens only at 8-bit
export.  Every transform is per-pixel and pure.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParameterError, RoiBoundsError, SpaceMismatchError

# Reflectance floor: avoids log(0) on pure-black pixels.  Chosen below the
# linear value of 8-bit code 1 (~3.04e-4) so every nonzero code is unaffected.
DEFAULT_EPS_REFLECTANCE = 1e-4


class ColorSpace(enum.Enum):
    LINEAR = "linear"
    LOG_ABSORPTION = "log_absorption"
    CHROMOPHORE = "chromophore"


@dataclass
class RgbImage8:
    """8-bit sRGB image, row-major, shape (h, w, 3) uint8.

    An alpha plane, when present in the source file, is carried along
    untouched and re-attached on write; it is never edited.
    """

    data: np.ndarray
    alpha: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ParameterError(f"expected (h, w, 3) uint8 data, got shape {self.data.shape}")
        if self.height < 1 or self.width < 1:
            raise ParameterError("image must be at least 1x1")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=np.uint8)
            if self.alpha.shape != self.data.shape[:2]:
                raise ParameterError("alpha plane shape must match image")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def copy(self) -> "RgbImage8":
        return RgbImage8(self.data.copy(), None if self.alpha is None else self.alpha.copy())

    def crop(self, roi: "Roi") -> "RgbImage8":
        d = self.data[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w].copy()
        a = None if self.alpha is None else self.alpha[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w].copy()
        return RgbImage8(d, a)


@dataclass
class PixelPatch:
    """Rectangular float region: 3 channel planes, shape (3, h, w) float64.

    ``origin`` records the (x, y) offset into the parent image the patch was
    cut from, purely for bookkeeping.
    """

    channels: np.ndarray
    space: ColorSpace
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise ParameterError(f"expected (3, h, w) channel planes, got shape {self.channels.shape}")
        if not np.all(np.isfinite(self.channels)):
            raise ParameterError("patch values must be finite")

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    def with_channels(self, channels: np.ndarray, space: ColorSpace | None = None) -> "PixelPatch":
        return PixelPatch(channels, self.space if space is None else space, self.origin)

    def require_space(self, space: ColorSpace) -> None:
        if self.space is not space:
            raise SpaceMismatchError(f"patch is in {self.space.value}, expected {space.value}")


@dataclass(frozen=True)
class Roi:
    """Axis-aligned rectangle in full-image pixel coordinates.

    Minimum size is 8x8: smaller regions cannot support a blemish fit.
    """

    x: int
    y: int
    w: int
    h: int

    MIN_SIDE = 8

    def __post_init__(self):
        if self.w < self.MIN_SIDE or self.h < self.MIN_SIDE:
            raise RoiBoundsError(f"roi must be at least {self.MIN_SIDE}x{self.MIN_SIDE}, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise RoiBoundsError(f"roi origin must be non-negative, got ({self.x}, {self.y})")

    def validate_in(self, width: int, height: int) -> None:
        if self.x + self.w > width or self.y + self.h > height:
            raise RoiBoundsError(
                f"roi {self.x},{self.y},{self.w},{self.h} exceeds image bounds {width}x{height}"
            )

    def expanded(self, margin: int, width: int, height: int) -> "Roi":
        """Grow by ``margin`` on each side, clamped to the image bounds."""
        x0 = max(0, self.x - margin)
        y0 = max(0, self.y - margin)
        x1 = min(width, self.x + self.w + margin)
        y1 = min(height, self.y + self.h + margin)
        return Roi(x0, y0, x1 - x0, y1 - y0)


@dataclass
class ClampStats:
    """Counts of values clamped back into gamut, per RGB channel."""

    absorption: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    linear: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.absorption.sum() + self.linear.sum())

    def as_dict(self) -> dict:
        return {
            "absorption": [int(v) for v in self.absorption],
            "linear": [int(v) for v in self.linear],
            "total": self.total,
        }


# ---------------------------------------------------------------------------
# sRGB <-> linear (IEC 61966-2-1 piecewise transfer functions)

_SRGB_LINEAR_THRESHOLD = 0.04045
_LINEAR_SRGB_THRESHOLD = 0.0031308


def srgb_to_linear(img: RgbImage8) -> PixelPatch:
    """Decode 8-bit sRGB to linear reflectance in [0, 1]."""
    x = img.data.astype(np.float64) / 255.0
    lin = np.where(x <= _SRGB_LINEAR_THRESHOLD, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)
    return PixelPatch(np.moveaxis(lin, 2, 0), ColorSpace.LINEAR)


def linear_to_srgb(p: PixelPatch) -> RgbImage8:
    """Encode linear reflectance as 8-bit sRGB with round-to-nearest."""
    p.require_space(ColorSpace.LINEAR)
    lin = np.clip(p.channels, 0.0, 1.0)
    enc = np.where(lin <= _LINEAR_SRGB_THRESHOLD, lin * 12.92, 1.055 * lin ** (1.0 / 2.4) - 0.055)
    codes = np.rint(enc * 255.0).astype(np.uint8)
    return RgbImage8(np.moveaxis(codes, 0, 2))


# ---------------------------------------------------------------------------
# linear <-> log absorption

def linear_to_log_absorption(p: PixelPatch, eps: float = DEFAULT_EPS_REFLECTANCE) -> PixelPatch:
    """``A = -ln(max(R, eps))`` per pixel and channel; A >= 0."""
    p.require_space(ColorSpace.LINEAR)
    if not (0.0 < eps < 1.0):
        raise ParameterError(f"reflectance floor must be in (0, 1), got {eps}")
    a = -np.log(np.maximum(p.channels, eps))
    return p.with_channels(a, ColorSpace.LOG_ABSORPTION)


def log_absorption_to_linear(
    p: PixelPatch,
    eps: float = DEFAULT_EPS_REFLECTANCE,
    clamp_stats: ClampStats | None = None,
) -> PixelPatch:
    """``R = exp(-A)`` clamped to [eps, 1]; clamps are counted if asked."""
    p.require_space(ColorSpace.LOG_ABSORPTION)
    if not (0.0 < eps < 1.0):
        raise ParameterError(f"reflectance floor must be in (0, 1), got {eps}")
    r = np.exp(-p.channels)
    if clamp_stats is not None:
        clamp_stats.linear += ((r < eps) | (r > 1.0)).sum(axis=(1, 2))
    return p.with_channels(np.clip(r, eps, 1.0), ColorSpace.LINEAR)


# ---------------------------------------------------------------------------
# PNG I/O

def read_png(path: str | Path) -> RgbImage8:
    with Image.open(path) as im:
        return _from_pil(im)


def decode_png(data: bytes) -> RgbImage8:
    with Image.open(io.BytesIO(data)) as im:
        return _from_pil(im)


def _from_pil(im: Image.Image) -> RgbImage8:
    if im.mode == "RGBA":
        arr = np.asarray(im, dtype=np.uint8)
        return RgbImage8(arr[:, :, :3].copy(), arr[:, :, 3].copy())
    arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return RgbImage8(arr.copy())


def _to_pil(img: RgbImage8) -> Image.Image:
    if img.alpha is not None:
        rgba = np.dstack([img.data, img.alpha])
        return Image.fromarray(rgba, mode="RGBA")
    return Image.fromarray(img.data, mode="RGB")


def write_png(img: RgbImage8, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(img))


def encode_png(img: RgbImage8) -> bytes:
    buf = io.BytesIO()
    _to_pil(img).save(buf, format="PNG")
    return buf.getvalue()
