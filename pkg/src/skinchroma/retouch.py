"""Pipeline orchestration: decompose, separate, fit, apply gains, recompose.

The editing chain for a region of interest is

    sRGB -> linear -> log absorption -> chromophore -> base/texture split
         -> per-channel blemish fit -> base + alpha_K * blemish field
         -> + texture -> absorption -> linear -> sRGB

Pixels outside the region are never touched, and an all-zero gain vector
short-circuits to a byte-identical copy of the input.  Out-of-gamut values
produced by large gains are clamped at each inverse transform and the
clamp counts surfaced in the result.

Fits (together with the separated layers and the evaluated blemish field)
are cached by (image digest, roi, sigma, fit config, mixing matrix) so a
gain change replays only the cheap recomposition.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from . import layers
from .chromophore import MixingMatrix, default_mixing_matrix, from_chromophore, to_chromophore
from .errors import ParameterError, RoiBoundsError
from .layers import gaussian_kernel, separate
from .pixelcore import (
    ClampStats,
    ColorSpace,
    DEFAULT_EPS_REFLECTANCE,
    PixelPatch,
    RgbImage8,
    Roi,
    linear_to_log_absorption,
    linear_to_srgb,
    log_absorption_to_linear,
    srgb_to_linear,
)
from .sog_fit import BlemishFit, FitConfig, fit_blemish

MAX_ABS_GAIN = 4.0
CONTRAST_RING = 4
FEATHER_PX = 2


@dataclass(frozen=True)
class GainVector:
    """Per-chromophore multipliers on the fitted blemish field.

    -1 removes the fitted blemish, +1 doubles it.  Values are clamped to
    +/-4 as a sanity bound.
    """

    alpha_h: float = 0.0
    alpha_m: float = 0.0
    alpha_r: float = 0.0

    def __post_init__(self):
        for name in ("alpha_h", "alpha_m", "alpha_r"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ParameterError(f"gain {name} must be finite")
            object.__setattr__(self, name, min(max(v, -MAX_ABS_GAIN), MAX_ABS_GAIN))

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_h, self.alpha_m, self.alpha_r])

    @property
    def is_zero(self) -> bool:
        return self.alpha_h == 0.0 and self.alpha_m == 0.0 and self.alpha_r == 0.0

    def as_dict(self) -> dict:
        return {"h": self.alpha_h, "m": self.alpha_m, "r": self.alpha_r}


@dataclass(frozen=True)
class GainSchedule:
    entries: tuple[GainVector, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.entries:
            raise ParameterError("schedule must contain at least one gain vector")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(len(self.entries))))
        elif len(self.labels) != len(self.entries):
            raise ParameterError("schedule labels must match entries")

    @classmethod
    def melanin_fade(cls, alphas, labels=None) -> "GainSchedule":
        entries = tuple(GainVector(alpha_m=float(a)) for a in alphas)
        return cls(entries, tuple(labels) if labels else ())


@dataclass
class ContrastReport:
    per_channel: dict  # {"H"|"M"|"r": float}
    total: float

    def as_dict(self) -> dict:
        return {"per_channel": dict(self.per_channel), "total": self.total}


@dataclass
class RetouchResult:
    output: RgbImage8
    gains: GainVector
    clamps: ClampStats
    contrast_before: ContrastReport | None
    contrast_after: ContrastReport | None
    fit: BlemishFit | None
    converged: bool
    label: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    eps: float = DEFAULT_EPS_REFLECTANCE
    sigma: float | None = None      # None: scale with the roi width
    fit: FitConfig = field(default_factory=FitConfig)
    matrix: MixingMatrix | None = None  # None: bundled default
    feather: bool = False           # 2 px linear blend at the roi boundary

    def resolved_sigma(self, roi: Roi) -> float:
        return self.sigma if self.sigma is not None else layers.default_sigma(roi.w)

    def resolved_matrix(self) -> MixingMatrix:
        return self.matrix if self.matrix is not None else default_mixing_matrix()


# ---------------------------------------------------------------------------
# Prepared region + fit cache

@dataclass(frozen=True)
class PreparedRoi:
    """Everything gain application needs, computed once per (image, roi, sigma)."""

    roi: Roi
    sigma: float
    eps: float
    matrix: MixingMatrix
    base: PixelPatch
    texture: PixelPatch
    fit: BlemishFit
    blemish: np.ndarray  # (3, h, w) evaluated Gaussian field per channel


def image_digest(img: RgbImage8) -> bytes:
    h = hashlib.sha256()
    h.update(img.data.tobytes())
    if img.alpha is not None:
        h.update(img.alpha.tobytes())
    return h.digest()


def cache_key(img: RgbImage8, roi: Roi, cfg: PipelineConfig) -> tuple:
    sigma = cfg.resolved_sigma(roi)
    return (
        image_digest(img),
        (roi.x, roi.y, roi.w, roi.h),
        sigma,
        cfg.eps,
        cfg.fit.fingerprint(),
        cfg.resolved_matrix().fingerprint(),
    )


class FitCache:
    """Concurrent map with compute-once insertion per key."""

    def __init__(self):
        self._lock = threading.Lock()
        self._done: dict = {}
        self._pending: dict = {}

    def get_or_compute(self, key, factory):
        """Return (value, was_cached); concurrent callers for one key compute once."""
        while True:
            with self._lock:
                if key in self._done:
                    value = self._done[key]
                    if isinstance(value, _CacheFailure):
                        raise value.error
                    return value, True
                event = self._pending.get(key)
                if event is None:
                    event = threading.Event()
                    self._pending[key] = event
                    break
            event.wait()
        try:
            value = factory()
        except BaseException as err:
            value = _CacheFailure(err)
            raise
        finally:
            with self._lock:
                self._done[key] = value
                del self._pending[key]
            event.set()
        return value, False


class _CacheFailure:
    def __init__(self, error: BaseException):
        self.error = error


def prepare_roi(
    img: RgbImage8,
    roi: Roi,
    cfg: PipelineConfig | None = None,
    cache: FitCache | None = None,
) -> tuple[PreparedRoi, bool]:
    """Run the forward pipeline on a region and fit it; cached when possible."""
    cfg = cfg or PipelineConfig()
    roi.validate_in(img.width, img.height)

    def build() -> PreparedRoi:
        sigma = cfg.resolved_sigma(roi)
        matrix = cfg.resolved_matrix()
        crop = img.crop(roi)
        chrom = to_chromophore(linear_to_log_absorption(srgb_to_linear(crop), cfg.eps), matrix)
        pair = separate(chrom, sigma)
        fit = fit_blemish(pair.base, cfg.fit)
        return PreparedRoi(
            roi=roi,
            sigma=sigma,
            eps=cfg.eps,
            matrix=matrix,
            base=pair.base,
            texture=pair.texture,
            fit=fit,
            blemish=fit.blemish_field(),
        )

    if cache is None:
        return build(), False
    return cache.get_or_compute(cache_key(img, roi, cfg), build)


# ---------------------------------------------------------------------------
# Gain application

def apply_gain(base: PixelPatch, fit: BlemishFit, gains: GainVector) -> PixelPatch:
    """``base_K + alpha_K * blemish_K`` per chromophore channel."""
    base.require_space(ColorSpace.CHROMOPHORE)
    if (fit.width, fit.height) != (base.width, base.height):
        raise ParameterError(
            f"fit grid {fit.width}x{fit.height} does not match base {base.width}x{base.height}"
        )
    delta = gains.as_array()[:, None, None] * fit.blemish_field()
    return base.with_channels(base.channels + delta)


def _recompose(prepared: PreparedRoi, gains: GainVector, clamps: ClampStats) -> RgbImage8:
    edited = prepared.base.channels + gains.as_array()[:, None, None] * prepared.blemish
    chrom = prepared.base.with_channels(edited + prepared.texture.channels)
    absorption = from_chromophore(chrom, prepared.matrix, clamp_stats=clamps)
    linear = log_absorption_to_linear(absorption, prepared.eps, clamp_stats=clamps)
    return linear_to_srgb(linear)


def _feather_blend(original: np.ndarray, edited: np.ndarray, px: int) -> np.ndarray:
    """Linear ramp from original at the crop border to edited in the interior."""
    h, w = edited.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.minimum.reduce([xx, yy, w - 1 - xx, h - 1 - yy]).astype(np.float64)
    alpha = np.clip((dist + 1.0) / (px + 1.0), 0.0, 1.0)[:, :, None]
    mixed = original.astype(np.float64) * (1.0 - alpha) + edited.astype(np.float64) * alpha
    return np.rint(mixed).astype(np.uint8)


def apply_to_image(
    img: RgbImage8,
    prepared: PreparedRoi,
    gains: GainVector,
    feather: bool = False,
) -> tuple[RgbImage8, ClampStats]:
    """Paste the retouched region into a copy of the image.

    All-zero gains short-circuit to a byte-identical copy.
    """
    out = img.copy()
    clamps = ClampStats()
    if gains.is_zero:
        return out, clamps
    crop = _recompose(prepared, gains, clamps)
    data = crop.data
    roi = prepared.roi
    if feather:
        data = _feather_blend(img.data[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w], data, FEATHER_PX)
    out.data[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w] = data
    return out, clamps


def retouch_roi(
    img: RgbImage8,
    roi: Roi,
    gains: GainVector,
    cfg: PipelineConfig | None = None,
    cache: FitCache | None = None,
    compute_metrics: bool = True,
) -> RetouchResult:
    """Full pipeline on one region; locality and zero-gain identity guaranteed."""
    cfg = cfg or PipelineConfig()
    roi.validate_in(img.width, img.height)
    if gains.is_zero:
        out = img.copy()
        before = blemish_contrast(img, roi, cfg.resolved_matrix(), cfg.eps) if compute_metrics else None
        return RetouchResult(
            output=out,
            gains=gains,
            clamps=ClampStats(),
            contrast_before=before,
            contrast_after=before,
            fit=None,
            converged=True,
        )
    prepared, _ = prepare_roi(img, roi, cfg, cache)
    out, clamps = apply_to_image(img, prepared, gains, cfg.feather)
    before = after = None
    if compute_metrics:
        before = blemish_contrast(img, roi, prepared.matrix, cfg.eps)
        after = blemish_contrast(out, roi, prepared.matrix, cfg.eps)
    return RetouchResult(
        output=out,
        gains=gains,
        clamps=clamps,
        contrast_before=before,
        contrast_after=after,
        fit=prepared.fit,
        converged=prepared.fit.converged,
    )


def simulate_fading(
    img: RgbImage8,
    roi: Roi,
    schedule: GainSchedule,
    cfg: PipelineConfig | None = None,
    cache: FitCache | None = None,
    compute_metrics: bool = True,
) -> list[RetouchResult]:
    """One fit, one output per schedule entry, in schedule order."""
    cfg = cfg or PipelineConfig()
    roi.validate_in(img.width, img.height)
    prepared, _ = prepare_roi(img, roi, cfg, cache)
    before = blemish_contrast(img, roi, prepared.matrix, cfg.eps) if compute_metrics else None
    results = []
    for gains, label in zip(schedule.entries, schedule.labels):
        out, clamps = apply_to_image(img, prepared, gains, cfg.feather)
        after = None
        if compute_metrics:
            after = before if gains.is_zero else blemish_contrast(out, roi, prepared.matrix, cfg.eps)
        results.append(
            RetouchResult(
                output=out,
                gains=gains,
                clamps=clamps,
                contrast_before=before,
                contrast_after=after,
                fit=prepared.fit,
                converged=prepared.fit.converged,
                label=label,
            )
        )
    return results


# ---------------------------------------------------------------------------
# Gain matrix rendering

SEPARATOR_PX = 2
_SEPARATOR_VALUE = 255
_MARK_COLOR = (230, 40, 40)
_MARK_PX = 2


def gain_matrix(
    img: RgbImage8,
    roi: Roi,
    alphas_h,
    alphas_m,
    cfg: PipelineConfig | None = None,
    cache: FitCache | None = None,
) -> RgbImage8:
    """Tile retouched crops over a haemoglobin x melanin gain grid.

    Rows sweep ``alphas_h``, columns ``alphas_m``; the residual gain is 0
    throughout.  The (0, 0) cell, when present, is marked with a red border.
    """
    alphas_h = [float(a) for a in alphas_h]
    alphas_m = [float(a) for a in alphas_m]
    if not alphas_h or not alphas_m:
        raise ParameterError("gain lists must be non-empty")
    cfg = cfg or PipelineConfig()
    roi.validate_in(img.width, img.height)
    prepared, _ = prepare_roi(img, roi, cfg, cache)

    n_rows, n_cols = len(alphas_h), len(alphas_m)
    grid_h = n_rows * roi.h + (n_rows - 1) * SEPARATOR_PX
    grid_w = n_cols * roi.w + (n_cols - 1) * SEPARATOR_PX
    canvas = np.full((grid_h, grid_w, 3), _SEPARATOR_VALUE, dtype=np.uint8)
    for i, ah in enumerate(alphas_h):
        for j, am in enumerate(alphas_m):
            gains = GainVector(alpha_h=ah, alpha_m=am)
            out, _ = apply_to_image(img, prepared, gains)
            tile = out.data[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w].copy()
            if ah == 0.0 and am == 0.0:
                tile[:_MARK_PX, :] = _MARK_COLOR
                tile[-_MARK_PX:, :] = _MARK_COLOR
                tile[:, :_MARK_PX] = _MARK_COLOR
                tile[:, -_MARK_PX:] = _MARK_COLOR
            y0 = i * (roi.h + SEPARATOR_PX)
            x0 = j * (roi.w + SEPARATOR_PX)
            canvas[y0 : y0 + roi.h, x0 : x0 + roi.w] = tile
    return RgbImage8(canvas)


# ---------------------------------------------------------------------------
# Metrics

def blemish_contrast(
    img: RgbImage8,
    roi: Roi,
    matrix: MixingMatrix | None = None,
    eps: float = DEFAULT_EPS_REFLECTANCE,
) -> ContrastReport:
    """Deviation of the region interior from its surround, in chromophore space.

    Per channel: mean absolute difference between interior pixels and the
    median of a 4 px ring around the region.  The ring must fit inside the
    image.
    """
    matrix = matrix or default_mixing_matrix()
    roi.validate_in(img.width, img.height)
    if roi.x < CONTRAST_RING or roi.y < CONTRAST_RING or \
            roi.x + roi.w + CONTRAST_RING > img.width or roi.y + roi.h + CONTRAST_RING > img.height:
        raise RoiBoundsError(f"contrast needs a {CONTRAST_RING} px margin around the roi inside the image")
    outer = Roi(roi.x - CONTRAST_RING, roi.y - CONTRAST_RING,
                roi.w + 2 * CONTRAST_RING, roi.h + 2 * CONTRAST_RING)
    crop = img.crop(outer)
    chrom = to_chromophore(linear_to_log_absorption(srgb_to_linear(crop), eps), matrix)
    ring_mask = np.ones((outer.h, outer.w), dtype=bool)
    ring_mask[CONTRAST_RING : CONTRAST_RING + roi.h, CONTRAST_RING : CONTRAST_RING + roi.w] = False
    per_channel = {}
    for i, key in enumerate(("H", "M", "r")):
        plane = chrom.channels[i]
        interior = plane[CONTRAST_RING : CONTRAST_RING + roi.h, CONTRAST_RING : CONTRAST_RING + roi.w]
        med = float(np.median(plane[ring_mask]))
        per_channel[key] = float(np.mean(np.abs(interior - med)))
    return ContrastReport(per_channel=per_channel, total=float(sum(per_channel.values())))


def psnr(a: RgbImage8, b: RgbImage8) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    if a.data.shape != b.data.shape:
        raise ParameterError(f"image dims differ: {a.data.shape} vs {b.data.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5  # 11x11 window


def ssim(a: RgbImage8, b: RgbImage8) -> float:
    """Mean structural similarity with an 11x11 Gaussian window, per channel."""
    if a.data.shape != b.data.shape:
        raise ParameterError(f"image dims differ: {a.data.shape} vs {b.data.shape}")
    if min(a.data.shape[0], a.data.shape[1]) < 2 * _SSIM_RADIUS + 1:
        raise ParameterError("image too small for the 11x11 ssim window")
    kernel = gaussian_kernel(_SSIM_SIGMA, radius=_SSIM_RADIUS)
    c1 = (_SSIM_K1 * 255.0) ** 2
    c2 = (_SSIM_K2 * 255.0) ** 2

    def windowed(img: np.ndarray) -> np.ndarray:
        tmp = correlate1d(img, kernel, axis=0, mode="mirror")
        return correlate1d(tmp, kernel, axis=1, mode="mirror")

    scores = []
    for c in range(3):
        x = a.data[:, :, c].astype(np.float64)
        y = b.data[:, :, c].astype(np.float64)
        ux, uy = windowed(x), windowed(y)
        vx = windowed(x * x) - ux * ux
        vy = windowed(y * y) - uy * uy
        vxy = windowed(x * y) - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        interior = s[_SSIM_RADIUS:-_SSIM_RADIUS, _SSIM_RADIUS:-_SSIM_RADIUS]
        scores.append(float(interior.mean()))
    return float(np.mean(scores))
