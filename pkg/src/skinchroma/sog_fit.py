"""Sum-of-Gaussians blemish fitting.

One chromophore channel of a base-layer region is modelled as a linear
skin plane plus a sum of rotated anisotropic 2D Gaussians:

    f(x, y) = kx*x + ky*y + d + sum_i  a_i / (2 pi sx_i sy_i) * exp(-q_i/2)

where q is the Mahalanobis distance under the covariance
``Sigma = R(theta) diag(sx^2, sy^2) R(theta)^T``.  Fitting is greedy:
the plane first, then one Gaussian at a time seeded at the residual's
absolute maximum and optimized alone by Levenberg-Marquardt while earlier
parameters stay frozen, followed by a joint refinement of everything.

Scale parameters are optimized through a softplus transform so they stay
above ``sigma_min``; the rotation angle is unconstrained internally and
wrapped into [0, pi) on output (the model is pi-periodic in theta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ParameterError, RankError
from .pixelcore import ColorSpace, PixelPatch

GAUSS_NPARAMS = 6  # a, mu_x, mu_y, sigma_x, sigma_y, theta
PLANE_NPARAMS = 3  # k_x, k_y, d

MIN_FIT_SIDE = 8
MU_MARGIN_FRACTION = 0.25


@dataclass(frozen=True)
class FitConfig:
    n_max: int = 5
    rel_tol: float = 1e-3          # stop when an added Gaussian improves rms less than this
    amp_factor: float = 2.0        # seed threshold: amp_factor * std of the plane-fit residual
    sigma0: float = 3.0            # initial axis stddev of a freshly seeded Gaussian
    sigma_min: float = 0.5
    lm_lambda0: float = 1e-3
    lm_max_iter: int = 200
    step_tol: float = 1e-10

    def fingerprint(self) -> bytes:
        return repr(self).encode()


@dataclass(frozen=True)
class PlaneModel:
    k: tuple[float, float]
    d: float

    def evaluate(self, width: int, height: int) -> np.ndarray:
        xx, yy = _grid(width, height)
        return self.k[0] * xx + self.k[1] * yy + self.d


@dataclass(frozen=True)
class GaussianParams:
    a: float
    mu: tuple[float, float]
    sigma_x: float
    sigma_y: float
    theta: float

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ParameterError(f"axis stddevs must be positive, got ({self.sigma_x}, {self.sigma_y})")
        object.__setattr__(self, "theta", wrap_theta(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.mu[0], self.mu[1], self.sigma_x, self.sigma_y, self.theta])


@dataclass(frozen=True)
class ChannelFit:
    plane: PlaneModel
    gaussians: tuple[GaussianParams, ...]
    rms: float
    iterations: int
    converged: bool

    @property
    def n(self) -> int:
        return len(self.gaussians)


@dataclass(frozen=True)
class BlemishFit:
    """Per-chromophore-channel fit of a base-layer region."""

    channels: dict  # {"H"|"M"|"r": ChannelFit}
    width: int
    height: int

    @property
    def converged(self) -> bool:
        return all(c.converged for c in self.channels.values())

    def blemish_field(self, width: int | None = None, height: int | None = None) -> np.ndarray:
        """Evaluate only the Gaussian (blemish) part per channel, shape (3, h, w).

        The fitted plane is diagnostic only; edits touch just this field.
        """
        w = self.width if width is None else width
        h = self.height if height is None else height
        out = np.zeros((3, h, w))
        for i, key in enumerate(("H", "M", "r")):
            fit = self.channels[key]
            if fit.gaussians:
                params = np.stack([g.as_array() for g in fit.gaussians])
                out[i] = _gaussian_sum(params, *_grid(w, h))
        return out

    def to_json_obj(self) -> dict:
        obj = {}
        for key, fit in self.channels.items():
            obj[key] = {
                "plane": {"k": [fit.plane.k[0], fit.plane.k[1]], "d": fit.plane.d},
                "gaussians": [
                    {
                        "a": g.a,
                        "mu": [g.mu[0], g.mu[1]],
                        "sigma": [g.sigma_x, g.sigma_y],
                        "theta": g.theta,
                    }
                    for g in fit.gaussians
                ],
                "rms": fit.rms,
            }
        return obj


def wrap_theta(theta: float) -> float:
    """Wrap an angle into [0, pi); the model is pi-periodic."""
    t = math.fmod(theta, math.pi)
    return t + math.pi if t < 0 else t


# ---------------------------------------------------------------------------
# Model evaluation

def build_covariance(sigma_x: float, sigma_y: float, theta: float) -> np.ndarray:
    """Covariance ``R diag(sx^2, sy^2) R^T`` of a rotated anisotropic Gaussian."""
    if sigma_x <= 0 or sigma_y <= 0:
        raise ParameterError(f"axis stddevs must be positive, got ({sigma_x}, {sigma_y})")
    c, s = math.cos(theta), math.sin(theta)
    r = np.array([[c, -s], [s, c]])
    return r @ np.diag([sigma_x**2, sigma_y**2]) @ r.T


def eval_gaussian(g: GaussianParams, x: tuple[float, float] | np.ndarray) -> float:
    """Evaluate one Gaussian at a point (x, y)."""
    dx = float(x[0]) - g.mu[0]
    dy = float(x[1]) - g.mu[1]
    c, s = math.cos(g.theta), math.sin(g.theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    q = (u / g.sigma_x) ** 2 + (v / g.sigma_y) ** 2
    return g.a / (2.0 * math.pi * g.sigma_x * g.sigma_y) * math.exp(-0.5 * q)


def eval_model(plane: PlaneModel, gaussians, width: int, height: int) -> np.ndarray:
    """Plane plus all Gaussians sampled on the pixel grid, shape (h, w)."""
    out = plane.evaluate(width, height)
    if gaussians:
        params = np.stack([g.as_array() if isinstance(g, GaussianParams) else np.asarray(g) for g in gaussians])
        out = out + _gaussian_sum(params, *_grid(width, height))
    return out


def _grid(width: int, height: int):
    xx, yy = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return xx, yy


def _gaussian_terms(p: np.ndarray, xx: np.ndarray, yy: np.ndarray):
    """Shared intermediates for one Gaussian's value and partials."""
    a, mx, my, sx, sy, th = p
    c, s = math.cos(th), math.sin(th)
    dx = xx - mx
    dy = yy - my
    u = c * dx + s * dy
    v = -s * dx + c * dy
    q = (u / sx) ** 2 + (v / sy) ** 2
    unit = np.exp(-0.5 * q) / (2.0 * math.pi * sx * sy)  # value at amplitude 1
    return u, v, unit


def _gaussian_sum(params: np.ndarray, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    out = np.zeros_like(xx)
    for p in params:
        _, _, unit = _gaussian_terms(p, xx, yy)
        out += p[0] * unit
    return out


def _gaussian_value_and_grads(p: np.ndarray, xx: np.ndarray, yy: np.ndarray):
    """Value plus analytic partials w.r.t. (a, mu_x, mu_y, sigma_x, sigma_y, theta)."""
    a, mx, my, sx, sy, th = p
    u, v, unit = _gaussian_terms(p, xx, yy)
    g = a * unit
    sx2, sy2 = sx * sx, sy * sy
    d_a = unit
    d_mx = g * (u * math.cos(th) / sx2 - v * math.sin(th) / sy2)
    d_my = g * (u * math.sin(th) / sx2 + v * math.cos(th) / sy2)
    d_sx = g * (u * u / (sx2 * sx) - 1.0 / sx)
    d_sy = g * (v * v / (sy2 * sy) - 1.0 / sy)
    d_th = -g * u * v * (1.0 / sx2 - 1.0 / sy2)
    return g, np.stack([d_a, d_mx, d_my, d_sx, d_sy, d_th])


def residual_jacobian(plane: PlaneModel, gaussians, width: int, height: int, observed: np.ndarray):
    """Residual (model - observed) and its Jacobian w.r.t. all natural parameters.

    Column order: k_x, k_y, d, then (a, mu_x, mu_y, sigma_x, sigma_y, theta)
    per Gaussian.  Residual is flattened row-major.
    """
    observed = np.asarray(observed, dtype=np.float64)
    xx, yy = _grid(width, height)
    npix = width * height
    cols = PLANE_NPARAMS + GAUSS_NPARAMS * len(gaussians)
    jac = np.empty((npix, cols))
    jac[:, 0] = xx.ravel()
    jac[:, 1] = yy.ravel()
    jac[:, 2] = 1.0
    model = plane.k[0] * xx + plane.k[1] * yy + plane.d
    for i, g in enumerate(gaussians):
        p = g.as_array() if isinstance(g, GaussianParams) else np.asarray(g, dtype=np.float64)
        value, grads = _gaussian_value_and_grads(p, xx, yy)
        model = model + value
        jac[:, PLANE_NPARAMS + GAUSS_NPARAMS * i : PLANE_NPARAMS + GAUSS_NPARAMS * (i + 1)] = (
            grads.reshape(GAUSS_NPARAMS, npix).T
        )
    return (model - observed).ravel(), jac


# ---------------------------------------------------------------------------
# Plane fit (ordinary least squares via normal equations on centered coords)

def fit_plane(field: np.ndarray) -> PlaneModel:
    f = np.asarray(field, dtype=np.float64)
    if f.size < 3:
        raise RankError(f"plane fit needs at least 3 samples, got {f.size}")
    xx, yy = _grid(f.shape[1], f.shape[0])
    mx, my, mf = xx.mean(), yy.mean(), f.mean()
    xc, yc = xx - mx, yy - my
    sxx = np.sum(xc * xc)
    syy = np.sum(yc * yc)
    sxy = np.sum(xc * yc)
    det = sxx * syy - sxy * sxy
    if det <= 1e-12 * max(sxx, syy, 1.0) ** 2:
        raise RankError("plane fit is degenerate: sample geometry is collinear")
    bx = np.sum(xc * f)
    by = np.sum(yc * f)
    kx = (syy * bx - sxy * by) / det
    ky = (sxx * by - sxy * bx) / det
    d = mf - kx * mx - ky * my
    return PlaneModel(k=(float(kx), float(ky)), d=float(d))


# ---------------------------------------------------------------------------
# Levenberg-Marquardt with softplus-transformed scale parameters

def _softplus(u):
    return np.logaddexp(0.0, u)


def _inv_softplus(s):
    # log(expm1(s)), stable for large s
    s = float(s)
    if s > 30.0:
        return s + math.log1p(-math.exp(-s))
    if s <= 0.0:
        raise ParameterError(f"softplus inverse requires positive input, got {s}")
    return math.log(math.expm1(s))


def _lm_minimize(fun, z0: np.ndarray, cfg: FitConfig):
    """Damped Gauss-Newton on ``fun(z) -> (residual, jacobian)``.

    Only improving steps are accepted, so the objective is non-increasing.
    Returns (z, sse, iterations, converged).
    """
    z = np.asarray(z0, dtype=np.float64)
    r, jac = fun(z)
    sse = float(r @ r)
    lam = cfg.lm_lambda0
    converged = False
    iteration = 0
    while iteration < cfg.lm_max_iter and not converged:
        iteration += 1
        jtj = jac.T @ jac
        jtr = jac.T @ r
        diag = np.maximum(np.diag(jtj), 1e-12)
        step = None
        while lam <= 1e12:
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if np.max(np.abs(delta)) < cfg.step_tol:
                converged = True  # the parameters cannot move meaningfully
                break
            z_try = z + delta
            r_try, jac_try = fun(z_try)
            sse_try = float(r_try @ r_try)
            if np.isfinite(sse_try) and sse_try < sse:
                step = delta
                z, r, jac, sse = z_try, r_try, jac_try, sse_try
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if converged or step is None:
            break  # done, or no improving step at any damping
    return z, sse, iteration, converged


class _GaussianProblem:
    """LM objective for a subset of the model with frozen context.

    ``z`` packs the free parameters; axis stddevs ride through softplus so
    they stay above ``sigma_min``.
    """

    def __init__(self, target: np.ndarray, cfg: FitConfig, with_plane: bool, n_gaussians: int):
        self.target = np.asarray(target, dtype=np.float64)
        self.cfg = cfg
        self.with_plane = with_plane
        self.n = n_gaussians
        self.xx, self.yy = _grid(self.target.shape[1], self.target.shape[0])

    def pack(self, plane: PlaneModel | None, gaussians) -> np.ndarray:
        z = []
        if self.with_plane:
            z += [plane.k[0], plane.k[1], plane.d]
        for g in gaussians:
            p = g.as_array() if isinstance(g, GaussianParams) else np.asarray(g)
            # floor keeps stddevs that collapsed onto sigma_min repackable
            sx = max(p[3] - self.cfg.sigma_min, 1e-12)
            sy = max(p[4] - self.cfg.sigma_min, 1e-12)
            z += [p[0], p[1], p[2], _inv_softplus(sx), _inv_softplus(sy), p[5]]
        return np.array(z, dtype=np.float64)

    def unpack(self, z: np.ndarray):
        off = 0
        plane = None
        if self.with_plane:
            plane = PlaneModel(k=(float(z[0]), float(z[1])), d=float(z[2]))
            off = PLANE_NPARAMS
        gaussians = []
        for i in range(self.n):
            a, mx, my, ux, uy, th = z[off + 6 * i : off + 6 * (i + 1)]
            gaussians.append(
                np.array([a, mx, my, self.cfg.sigma_min + _softplus(ux), self.cfg.sigma_min + _softplus(uy), th])
            )
        return plane, gaussians

    def __call__(self, z: np.ndarray):
        plane, gaussians = self.unpack(z)
        npix = self.target.size
        cols = (PLANE_NPARAMS if self.with_plane else 0) + GAUSS_NPARAMS * self.n
        jac = np.empty((npix, cols))
        if self.with_plane:
            model = plane.k[0] * self.xx + plane.k[1] * self.yy + plane.d
            jac[:, 0] = self.xx.ravel()
            jac[:, 1] = self.yy.ravel()
            jac[:, 2] = 1.0
            off = PLANE_NPARAMS
        else:
            model = np.zeros_like(self.xx)
            off = 0
        for i, p in enumerate(gaussians):
            value, grads = _gaussian_value_and_grads(p, self.xx, self.yy)
            model = model + value
            # chain rule for the softplus-transformed stddevs
            ux, uy = z[off + 6 * i + 3], z[off + 6 * i + 4]
            grads[3] *= expit(ux)
            grads[4] *= expit(uy)
            jac[:, off + 6 * i : off + 6 * (i + 1)] = grads.reshape(GAUSS_NPARAMS, npix).T
        return (model - self.target).ravel(), jac


# ---------------------------------------------------------------------------
# Incremental fit

@dataclass(frozen=True)
class FitDiagnostics:
    iterations: int
    converged: bool
    rms_per_stage: tuple[float, ...] = field(default=())


def fit_incremental(field: np.ndarray, cfg: FitConfig = FitConfig()):
    """Greedy plane + sum-of-Gaussians fit of a 2D scalar field.

    Returns ``(plane, gaussians, rms, diagnostics)``.  Gaussians are added
    one at a time while a residual peak exceeds ``amp_factor`` residual
    stddevs, each optimized alone, then everything is refined jointly.  An
    addition that fails to lower the rms is dropped.  Deterministic.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < MIN_FIT_SIDE or f.shape[1] < MIN_FIT_SIDE:
        raise ParameterError(f"field must be at least {MIN_FIT_SIDE}x{MIN_FIT_SIDE}, got {f.shape}")
    height, width = f.shape

    plane = fit_plane(f)
    gaussians: list[np.ndarray] = []
    rms_prev = _rms(f - plane.evaluate(width, height))
    stages = [rms_prev]
    iterations = 0
    converged = True
    # Fixed per-field seeding scale: residual peaks are compared against the
    # spread of the plane-only residual, so a well-fitted field stops adding
    # terms instead of chasing its own shrinking residual.  The floor keeps
    # float rounding dust (one-ulp-flat residuals have zero spread) from
    # seeding terms.
    noise_floor = 1e-10 * max(1.0, float(np.max(np.abs(f))))
    threshold = max(cfg.amp_factor * float((f - plane.evaluate(width, height)).std()), noise_floor)

    while len(gaussians) < cfg.n_max:
        res = f - eval_model(plane, gaussians, width, height)
        if not np.max(np.abs(res)) > threshold:
            break
        seed = _seed_gaussian(res, cfg)
        problem = _GaussianProblem(res, cfg, with_plane=False, n_gaussians=1)
        z, sse, used, conv = _lm_minimize(problem, problem.pack(None, [seed]), cfg)
        iterations += used
        _, fitted = problem.unpack(z)
        rms_new = math.sqrt(sse / res.size)
        if rms_new >= rms_prev and rms_prev > 0:
            break  # the new term did not help; discard it
        if not _in_bounds(fitted[0], width, height, cfg):
            break  # the residual's structure is not blemish-like; discard it
        converged = converged and conv
        gaussians.append(fitted[0])
        improvement = (rms_prev - rms_new) / rms_prev if rms_prev > 0 else 0.0
        rms_prev = rms_new
        stages.append(rms_new)
        if improvement < cfg.rel_tol:
            break

    if gaussians:
        # The refinement is kept only when every parameter stays in its
        # domain; otherwise the greedy model stands (monotonicity holds
        # either way since the solver never accepts a worse objective).
        problem = _GaussianProblem(f, cfg, with_plane=True, n_gaussians=len(gaussians))
        z, sse, used, conv = _lm_minimize(problem, problem.pack(plane, gaussians), cfg)
        iterations += used
        refined_plane, refined = problem.unpack(z)
        if all(_in_bounds(p, width, height, cfg) for p in refined):
            converged = converged and conv
            plane, gaussians = refined_plane, refined
            stages.append(math.sqrt(sse / f.size))

    final = tuple(_finalize_gaussian(p, width, height, cfg) for p in gaussians)
    rms = _rms(f - eval_model(plane, final, width, height))
    return plane, final, rms, FitDiagnostics(iterations=iterations, converged=converged, rms_per_stage=tuple(stages))


def _rms(res: np.ndarray) -> float:
    return float(np.sqrt(np.mean(res * res)))


def _in_bounds(p: np.ndarray, width: int, height: int, cfg: FitConfig) -> bool:
    """Centre inside the region grown by 25%; stddevs below the diagonal."""
    sigma_max = math.hypot(width, height)
    return (
        -MU_MARGIN_FRACTION * width <= p[1] <= (1.0 + MU_MARGIN_FRACTION) * width
        and -MU_MARGIN_FRACTION * height <= p[2] <= (1.0 + MU_MARGIN_FRACTION) * height
        and p[3] <= sigma_max
        and p[4] <= sigma_max
    )


def _seed_gaussian(residual: np.ndarray, cfg: FitConfig) -> np.ndarray:
    """New Gaussian at the residual's absolute maximum, matched in peak height."""
    idx = int(np.argmax(np.abs(residual)))
    y, x = divmod(idx, residual.shape[1])
    peak = residual[y, x]
    a0 = peak * 2.0 * math.pi * cfg.sigma0**2
    return np.array([a0, float(x), float(y), cfg.sigma0, cfg.sigma0, 0.0])


def _finalize_gaussian(p: np.ndarray, width: int, height: int, cfg: FitConfig) -> GaussianParams:
    sigma_max = math.hypot(width, height)
    mx = min(max(p[1], -MU_MARGIN_FRACTION * width), (1.0 + MU_MARGIN_FRACTION) * width)
    my = min(max(p[2], -MU_MARGIN_FRACTION * height), (1.0 + MU_MARGIN_FRACTION) * height)
    return GaussianParams(
        a=float(p[0]),
        mu=(float(mx), float(my)),
        sigma_x=float(min(max(p[3], cfg.sigma_min), sigma_max)),
        sigma_y=float(min(max(p[4], cfg.sigma_min), sigma_max)),
        theta=float(p[5]),
    )


def fit_blemish(base: PixelPatch, cfg: FitConfig = FitConfig()) -> BlemishFit:
    """Fit each chromophore channel of a base-layer region independently."""
    base.require_space(ColorSpace.CHROMOPHORE)
    channels = {}
    for i, key in enumerate(("H", "M", "r")):
        plane, gaussians, rms, diag = fit_incremental(base.channels[i], cfg)
        channels[key] = ChannelFit(
            plane=plane,
            gaussians=gaussians,
            rms=rms,
            iterations=diag.iterations,
            converged=diag.converged,
        )
    return BlemishFit(channels=channels, width=base.width, height=base.height)
