"""Chromophore color-space decomposition.

In log-absorption space, per-pixel absorption is (to first order) a linear
mix of chromophore concentrations: ``a = E c`` with ``E`` a 3x3 matrix whose
columns are the effective RGB absorption profiles of haemoglobin (H),
melanin (M) and a residual component (r).  ``E`` is estimated blindly with
FastICA, since concentrations of distinct chromophores vary near
independently across skin.

ICA leaves permutation, sign and scale of the components arbitrary, so the
estimated columns are canonicalized before use:

* melanin is the column whose (normalized) absorption rises most steadily
  from R to B -- melanin absorbs shorter wavelengths more strongly;
* haemoglobin is, among the remaining two, the column with the strongest
  G-channel dominance;
* the leftover column is the residual.  It has no physical reading and is
  exposed only as a free third channel.

Each column's sign is fixed so the mean concentration over the calibration
samples is non-negative.  Component scale stays arbitrary (the per-channel
gains applied downstream are scale-free).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import jsonutil
from .errors import ConvergenceError, DegenerateSamplesError, ParameterError
from .layers import default_sigma, separate
from .pixelcore import ColorSpace, PixelPatch, RgbImage8, linear_to_log_absorption, srgb_to_linear

CHANNELS = ("R", "G", "B")
CHROMOPHORES = ("H", "M", "r")

MIN_SAMPLES = 1000
MAX_CONDITION = 1e6
_WHITEN_TOL = 1e-8


@dataclass(frozen=True)
class IcaConfig:
    seed: int = 42
    tol: float = 1e-6
    max_iter: int = 500


class MixingMatrix:
    """3x3 map from chromophore concentrations to RGB log absorption.

    Rows are camera channels (R, G, B); columns are chromophores (H, M, r),
    canonically ordered and sign-fixed.  The inverse is cached.
    """

    def __init__(self, e: np.ndarray, seed: int = IcaConfig.seed):
        e = np.asarray(e, dtype=np.float64)
        if e.shape != (3, 3):
            raise ParameterError(f"mixing matrix must be 3x3, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ParameterError("mixing matrix must be finite")
        cond = np.linalg.cond(e)
        if not np.isfinite(cond) or cond >= MAX_CONDITION:
            raise ParameterError(f"mixing matrix condition number {cond:.3g} exceeds {MAX_CONDITION:.0e}")
        self.e = e
        self.inv = np.linalg.inv(e)
        self.seed = seed

    def __eq__(self, other) -> bool:
        return isinstance(other, MixingMatrix) and np.array_equal(self.e, other.e)

    def fingerprint(self) -> bytes:
        return self.e.tobytes()

    def to_json(self) -> str:
        return jsonutil.dumps(
            {
                "channels": list(CHANNELS),
                "chromophores": list(CHROMOPHORES),
                "e": [[float(v) for v in row] for row in self.e],
                "seed": self.seed,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MixingMatrix":
        obj = jsonutil.loads(text)
        if obj.get("channels") != list(CHANNELS) or obj.get("chromophores") != list(CHROMOPHORES):
            raise ParameterError("mixing matrix JSON has unexpected channel/chromophore labels")
        return cls(np.array(obj["e"], dtype=np.float64), seed=int(obj.get("seed", IcaConfig.seed)))

    @classmethod
    def load(cls, path: str | Path) -> "MixingMatrix":
        return cls.from_json(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def default_mixing_matrix() -> MixingMatrix:
    """Bundled matrix estimated from the repository's synthetic calibration set."""
    text = resources.files("skinchroma").joinpath("data/default_mixing_matrix.json").read_text()
    return MixingMatrix.from_json(text)


# ---------------------------------------------------------------------------
# FastICA estimation

def estimate_mixing_matrix(samples: np.ndarray, cfg: IcaConfig = IcaConfig()) -> MixingMatrix:
    """Estimate the mixing matrix from log-absorption samples, shape (n, 3).

    Pipeline: mean-center, whiten by eigendecomposition of the sample
    covariance, symmetric fixed-point iteration with the log-cosh contrast
    (g = tanh), then undo the whitening and canonicalize the columns.
    Deterministic for a given (samples, seed).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ParameterError(f"samples must have shape (n, 3), got {x.shape}")
    n = x.shape[0]
    if n < MIN_SAMPLES:
        raise DegenerateSamplesError(f"need at least {MIN_SAMPLES} samples, got {n}")

    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 0 or evals[0] / evals[-1] < 1e-12:
        raise DegenerateSamplesError("sample covariance is rank deficient; need variation in all 3 channels")

    whiten = evecs / np.sqrt(evals)  # columns scaled: z = xc @ whiten
    z = xc @ whiten
    zcov = z.T @ z / (n - 1)
    if np.max(np.abs(zcov - np.eye(3))) > _WHITEN_TOL:
        raise DegenerateSamplesError("whitening failed its identity-covariance check")

    rng = np.random.default_rng(cfg.seed)
    w = _sym_decorrelate(rng.standard_normal((3, 3)))
    converged = False
    for iteration in range(1, cfg.max_iter + 1):
        y = z @ w.T
        g = np.tanh(y)
        g_prime = 1.0 - g * g
        w_new = g.T @ z / n - (g_prime.mean(axis=0))[:, None] * w
        w_new = _sym_decorrelate(w_new)
        delta = np.max(np.abs(np.abs(np.sum(w_new * w, axis=1)) - 1.0))
        w = w_new
        if delta < cfg.tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"FastICA did not converge within {cfg.max_iter} iterations", cfg.max_iter)

    # Unmixing in the original space is U = W @ whiten.T; mixing is its inverse.
    e = np.linalg.inv(w @ whiten.T)
    e = _canonicalize(e, x)
    return MixingMatrix(e, seed=cfg.seed)


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    """Symmetric decorrelation: W <- (W W^T)^(-1/2) W."""
    s, u = np.linalg.eigh(w @ w.T)
    return (u / np.sqrt(s)) @ u.T @ w


def _canonicalize(e: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Fix ICA's permutation/sign ambiguity by spectral shape.

    Signs first: flip any column whose mean concentration over the samples
    is negative.  Then order columns (H, M, r): melanin is the most
    monotonically R->B increasing profile, haemoglobin the most G-dominant
    of the rest.
    """
    e = e.copy()
    mean_conc = np.linalg.solve(e, samples.mean(axis=0))
    for j in range(3):
        if mean_conc[j] < 0:
            e[:, j] = -e[:, j]

    unit = e / np.linalg.norm(e, axis=0)
    melanin_score = np.minimum(unit[1] - unit[0], unit[2] - unit[1])
    m_idx = int(np.argmax(melanin_score))
    rest = [j for j in range(3) if j != m_idx]
    g_dominance = unit[1] - 0.5 * (unit[0] + unit[2])
    h_idx = rest[0] if g_dominance[rest[0]] >= g_dominance[rest[1]] else rest[1]
    r_idx = rest[1] if h_idx == rest[0] else rest[0]
    return e[:, [h_idx, m_idx, r_idx]]


# ---------------------------------------------------------------------------
# Conversions

def to_chromophore(p: PixelPatch, e: MixingMatrix) -> PixelPatch:
    """Solve ``E c = a`` per pixel: concentrations from log absorption."""
    p.require_space(ColorSpace.LOG_ABSORPTION)
    c = np.einsum("ij,jhw->ihw", e.inv, p.channels)
    return p.with_channels(c, ColorSpace.CHROMOPHORE)


def from_chromophore(
    p: PixelPatch,
    e: MixingMatrix,
    clamp_stats=None,
) -> PixelPatch:
    """``a = E c`` per pixel, clamped to non-negative absorption."""
    p.require_space(ColorSpace.CHROMOPHORE)
    a = np.einsum("ij,jhw->ihw", e.e, p.channels)
    if clamp_stats is not None:
        clamp_stats.absorption += (a < 0.0).sum(axis=(1, 2))
    return p.with_channels(np.maximum(a, 0.0), ColorSpace.LOG_ABSORPTION)


# ---------------------------------------------------------------------------
# Calibration sampling

MAX_CALIBRATION_SAMPLES = 50_000


def samples_from_image(
    img: RgbImage8,
    sigma: float | None = None,
    eps: float | None = None,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Collect log-absorption calibration samples from an image.

    Uses the diffusion (base) layer of the whole image, optionally
    restricted to a boolean skin ``mask``, uniformly strided down to at
    most 50k samples.  Deterministic: the stride is fixed by the count.
    """
    from .pixelcore import DEFAULT_EPS_REFLECTANCE

    if sigma is None:
        sigma = default_sigma(img.width)
    if eps is None:
        eps = DEFAULT_EPS_REFLECTANCE
    log_abs = linear_to_log_absorption(srgb_to_linear(img), eps)
    base = separate(log_abs, sigma).base
    flat = base.channels.reshape(3, -1).T
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (img.height, img.width):
            raise ParameterError("mask shape must match image")
        flat = flat[mask.reshape(-1)]
    stride = max(1, int(np.ceil(flat.shape[0] / MAX_CALIBRATION_SAMPLES)))
    return flat[::stride]
