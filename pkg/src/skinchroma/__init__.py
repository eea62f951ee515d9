"""Physics-based facial blemish retouching.

Decomposes skin color into haemoglobin / melanin / residual chromophore
concentrations, splits diffusion and texture layers, models each blemish
as a plane plus a sum of rotated anisotropic Gaussians, and edits it with
per-chromophore gains while preserving the texture layer.
"""

from .chromophore import IcaConfig, MixingMatrix, default_mixing_matrix, estimate_mixing_matrix
from .errors import (
    ConvergenceError,
    DegenerateSamplesError,
    ParameterError,
    PipelineError,
    RankError,
    RoiBoundsError,
    SpaceMismatchError,
)
from .layers import LayerPair, gaussian_blur, separate
from .pixelcore import ColorSpace, PixelPatch, RgbImage8, Roi, read_png, write_png
from .retouch import (
    GainSchedule,
    GainVector,
    PipelineConfig,
    RetouchResult,
    blemish_contrast,
    gain_matrix,
    psnr,
    retouch_roi,
    simulate_fading,
    ssim,
)
from .sog_fit import BlemishFit, FitConfig, GaussianParams, PlaneModel, fit_blemish

__version__ = "0.1.0"
