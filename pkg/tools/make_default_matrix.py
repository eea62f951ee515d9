"""Regenerate the bundled default mixing matrix.

Builds a synthetic skin calibration image with independently varying
haemoglobin / melanin / residual concentration fields, pushes it through
the forward model with a plausible ground-truth matrix, and estimates the
shipped matrix from the result with FastICA.  Run from the repo root:

    python tools/make_default_matrix.py
"""

from pathlib import Path

import numpy as np

from skinchroma.chromophore import IcaConfig, estimate_mixing_matrix, samples_from_image
from skinchroma.pixelcore import ColorSpace, PixelPatch, linear_to_srgb

# Plausible effective RGB absorption profiles (columns: H, M, r).
TRUE_E = np.array(
    [
        [0.25, 0.35, 0.80],
        [0.85, 0.65, 0.55],
        [0.55, 0.95, 0.45],
    ]
)

BASE_CONCENTRATION = np.array([0.55, 0.75, 0.45])


def _blob_field(rng: np.random.Generator, width: int, height: int, n_blobs: int) -> np.ndarray:
    xx, yy = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    out = np.zeros((height, width))
    for _ in range(n_blobs):
        amp = rng.exponential(0.22)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        sx, sy = rng.uniform(6, 28), rng.uniform(6, 28)
        out += amp * np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
    return out


def build_calibration_image(width: int = 384, height: int = 384, seed: int = 20240615):
    rng = np.random.default_rng(seed)
    conc = np.zeros((3, height, width))
    for k in range(3):
        conc[k] = BASE_CONCENTRATION[k] + _blob_field(rng, width, height, 60)
    absorption = np.einsum("ij,jhw->ihw", TRUE_E, conc)
    linear = np.clip(np.exp(-absorption), 1e-4, 1.0)
    return linear_to_srgb(PixelPatch(linear, ColorSpace.LINEAR))


def main():
    img = build_calibration_image()
    samples = samples_from_image(img)
    matrix = estimate_mixing_matrix(samples, IcaConfig())
    out = Path(__file__).resolve().parents[1] / "src" / "skinchroma" / "data" / "default_mixing_matrix.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    matrix.save(out)
    print(f"wrote {out}")
    print(matrix.to_json())
    print("condition number:", np.linalg.cond(matrix.e))


if __name__ == "__main__":
    main()
