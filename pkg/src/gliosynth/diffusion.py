"""Deterministic reverse diffusion with regressor-gradient guidance.

All array operations work on plain numpy arrays of shape (..., H, W) so a
batch of generations can share one pass; :class:`Image2D` is the carrier
at the API boundary.  The reverse update is the sigma-parameterized
implicit sampler; sigma = 0 everywhere in this package, which makes a
generation a pure function of (inputs, seed).

Analytic backends stand in for the trained networks:

* :class:`DeltaDenoiser` -- exact noise predictor when the clean image is
  known; inverts forward noising exactly (reconstruction tests).
* :class:`GaussianDenoiser` -- exact posterior noise predictor for a
  diagonal-Gaussian image prior centered on a reference; the width map
  controls how much image deviation survives the flow, which is the
  channel guidance acts through.
* :class:`SoftAreaRegressor` -- differentiable tumor-fraction estimate
  (mean of a logistic of intensity over a brain mask), with a noise-level
  aware mode that mirrors how a regressor trained on noisy inputs reads a
  partially denoised image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .errors import InvalidInputError
from .image import Image2D, BinaryMask

DEFAULT_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention sequence; entry 0 is exactly 1."""

    alpha_bar: np.ndarray  # shape (L + 1,), alpha_bar[0] == 1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or ab.size < 2:
            raise InvalidInputError("schedule needs at least one step")
        if ab[0] != 1.0:
            raise InvalidInputError("alpha_bar[0] must be exactly 1")
        if np.any(ab[1:] <= 0) or np.any(ab[1:] >= 1):
            raise InvalidInputError("alpha_bar entries must lie in (0, 1)")
        if np.any(np.diff(ab) >= 0):
            raise InvalidInputError("alpha_bar must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        return self.alpha_bar.size - 1

    def check_step(self, l: int) -> None:
        if not (1 <= l <= self.n_steps):
            raise InvalidInputError(f"step l={l} outside [1, {self.n_steps}]")


def make_schedule(n_steps: int = DEFAULT_STEPS,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear per-step noise variance ramp, cumulative product retention."""
    if n_steps < 1:
        raise InvalidInputError(f"n_steps must be >= 1, got {n_steps}")
    if not (0 < beta_start <= beta_end < 1):
        raise InvalidInputError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, n_steps)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar=alpha_bar)


# ---------------------------------------------------------------------------
# elementary operations (arrays in, arrays out)

def forward_noise(x0: np.ndarray, l: int, sched: NoiseSchedule, rng):
    """Jump directly to step l of the forward process; returns (x_l, eps)."""
    sched.check_step(l)
    a = sched.alpha_bar[l]
    eps = rng.standard_normal(np.shape(x0))
    x_l = np.sqrt(a) * np.asarray(x0, dtype=float) + np.sqrt(1.0 - a) * eps
    return x_l, eps


def ddim_step(x_l: np.ndarray, l: int, eps: np.ndarray, sched: NoiseSchedule,
              sigma_l: float = 0.0, eps_noise=None) -> np.ndarray:
    """One reverse step: x_l -> x_{l-1} given a noise prediction.

    sigma_l = 0 is the deterministic variant; sigma_l > 0 requires the
    extra noise image and must satisfy sigma_l^2 <= 1 - alpha_bar[l-1].
    """
    sched.check_step(l)
    if sigma_l < 0:
        raise InvalidInputError(f"sigma_l must be >= 0, got {sigma_l}")
    a_l = sched.alpha_bar[l]
    a_prev = sched.alpha_bar[l - 1]
    radicand = 1.0 - a_prev - sigma_l ** 2
    if radicand < 0:
        raise InvalidInputError(
            f"sigma_l={sigma_l} too large: sigma^2 > 1 - alpha_bar[{l - 1}]")
    x_l = np.asarray(x_l, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x_l.shape != eps.shape:
        raise InvalidInputError(f"shape mismatch: x {x_l.shape} vs eps {eps.shape}")
    if sigma_l > 0:
        if eps_noise is None:
            raise InvalidInputError("eps_noise is required when sigma_l > 0")
        eps_noise = np.asarray(eps_noise, dtype=float)
        if eps_noise.shape != x_l.shape:
            raise InvalidInputError("eps_noise shape mismatch")
    x0_pred = (x_l - np.sqrt(1.0 - a_l) * eps) / np.sqrt(a_l)
    out = np.sqrt(a_prev) * x0_pred + np.sqrt(radicand) * eps
    if sigma_l > 0:
        out = out + sigma_l * eps_noise
    return out


def guided_epsilon(eps: np.ndarray, grad: np.ndarray, s_r,
                   alpha_bar_l: float) -> np.ndarray:
    """Shift a noise prediction against the regressor gradient.

    ``s_r`` may be a scalar or a per-sample array broadcastable against
    the leading dimensions of ``eps``.
    """
    eps = np.asarray(eps, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if eps.shape != grad.shape:
        raise InvalidInputError(f"shape mismatch: eps {eps.shape} vs grad {grad.shape}")
    return eps - np.asarray(s_r) * np.sqrt(1.0 - alpha_bar_l) * grad


@dataclass(frozen=True)
class GuidanceConfig:
    """Scale of the regressor gradient term during generation."""

    s_ct: float = 50000.0     # constant factor
    dyn_clamp: float = 1.0    # cap on |target - current|
    target: float = 0.0       # desired tumor fraction in [0, 1)

    def __post_init__(self):
        if self.s_ct < 0:
            raise InvalidInputError(f"s_ct must be >= 0, got {self.s_ct}")
        if not (self.dyn_clamp > 0):
            raise InvalidInputError(f"dyn_clamp must be > 0, got {self.dyn_clamp}")
        if not (0.0 <= self.target < 1.0):
            raise InvalidInputError(f"target must be in [0, 1), got {self.target}")


def _scale_core(s_ct, dyn_clamp, target, current):
    s_dyn = np.clip(np.asarray(target, dtype=float) - np.asarray(current, dtype=float),
                    -dyn_clamp, dyn_clamp)
    return s_ct * s_dyn


def regressor_scale(cfg: GuidanceConfig, current):
    """Signed, clamped guidance scale: vanishes at the target, reverses on
    overshoot.  ``current`` may be a scalar or array."""
    out = _scale_core(cfg.s_ct, cfg.dyn_clamp, cfg.target, current)
    return float(out) if out.ndim == 0 else out


def gaussian_optimal_eps(x_l: np.ndarray, l: int, sched: NoiseSchedule,
                         mu: np.ndarray, s0) -> np.ndarray:
    """Exact noise predictor for x0 ~ N(mu, s0^2) under the forward process.

    ``s0`` may be a scalar or per-pixel map; s0 = 0 degenerates to the
    delta-centered predictor.
    """
    sched.check_step(l)
    if np.any(np.asarray(s0) < 0):
        raise InvalidInputError("s0 must be >= 0")
    a = sched.alpha_bar[l]
    x_l = np.asarray(x_l, dtype=float)
    mu = np.asarray(mu, dtype=float)
    denom = a * np.asarray(s0, dtype=float) ** 2 + (1.0 - a)
    return np.sqrt(1.0 - a) * (x_l - np.sqrt(a) * mu) / denom


def soft_tumor_fraction(x: np.ndarray, tau: float, softness: float,
                        brain_mask: np.ndarray):
    """Differentiable tumor fraction: mean logistic intensity over the mask.

    Returns (value, gradient); both broadcast over leading batch
    dimensions of ``x``.  The gradient is the exact partial derivative of
    the value with respect to each pixel (zero outside the mask).
    """
    if not (softness > 0):
        raise InvalidInputError(f"softness must be > 0, got {softness}")
    brain_mask = np.asarray(brain_mask, dtype=bool)
    n_mask = int(brain_mask.sum())
    if n_mask == 0:
        raise InvalidInputError("brain mask is empty")
    x = np.asarray(x, dtype=float)
    if x.shape[-2:] != brain_mask.shape:
        raise InvalidInputError(
            f"image shape {x.shape[-2:]} does not match mask {brain_mask.shape}")
    sig = expit((x - tau) / softness)
    value = np.sum(sig * brain_mask, axis=(-2, -1)) / n_mask
    grad = np.where(brain_mask, sig * (1.0 - sig) / (softness * n_mask), 0.0)
    if value.ndim == 0:
        return float(value), grad
    return value, grad


# ---------------------------------------------------------------------------
# denoiser backends

class DeltaDenoiser:
    """Noise predictor that knows the clean image exactly."""

    def __init__(self, center: Image2D):
        self.center = np.asarray(center.pixels, dtype=float)

    def epsilon(self, x_l: np.ndarray, l: int, sched: NoiseSchedule) -> np.ndarray:
        sched.check_step(l)
        a = sched.alpha_bar[l]
        return (np.asarray(x_l, dtype=float) - np.sqrt(a) * self.center) / np.sqrt(1.0 - a)


class GaussianDenoiser:
    """Posterior-exact noise predictor for a Gaussian prior around ``mu``.

    ``support`` restricts the prior width to a region (outside it the
    prior is effectively a delta, locking anatomy to the reference the
    way a denoiser trained on brain scans keeps background clean).
    """

    def __init__(self, mu: Image2D, s0: float = 0.04, support: BinaryMask = None,
                 background_s0: float = 1e-4):
        self.mu = np.asarray(mu.pixels, dtype=float)
        if s0 < 0:
            raise InvalidInputError(f"s0 must be >= 0, got {s0}")
        if support is not None:
            if support.bits.shape != self.mu.shape:
                raise InvalidInputError("support mask shape mismatch")
            self.s0 = np.where(support.bits, s0, background_s0)
        else:
            self.s0 = s0
        self.scalar_s0 = s0

    def epsilon(self, x_l: np.ndarray, l: int, sched: NoiseSchedule) -> np.ndarray:
        return gaussian_optimal_eps(x_l, l, sched, self.mu, self.s0)

    def flow_noise_profile(self, nl: int, sched: NoiseSchedule) -> np.ndarray:
        """Deviation amplitude c[l] carried by the unguided flow started
        from a forward-noised reference at step nl (in-support value)."""
        ab = sched.alpha_bar
        c = np.zeros(nl + 1)
        c[nl] = np.sqrt(1.0 - ab[nl])
        s0sq = self.scalar_s0 ** 2
        for l in range(nl, 0, -1):
            a, ap = ab[l], ab[l - 1]
            v = a * s0sq + 1.0 - a
            k = (np.sqrt(ap * a) * s0sq + np.sqrt((1.0 - ap) * (1.0 - a))) / v
            c[l - 1] = k * c[l]
        return c


# ---------------------------------------------------------------------------
# regressor backends

def _gauss_hermite(n=21):
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    return nodes, weights / weights.sum()


class SoftAreaRegressor:
    """Tumor-fraction regressor with noise-level-aware reading.

    At step l the raw image is rescaled by 1/sqrt(alpha_bar) and shrunk
    toward the reference with two posterior weights: a tight one for the
    reported value (the analogue of a network trained to output the clean
    tumor size from a noisy input) and a noise-matched one for the
    gradient, so the guidance field stays anchored to image structure at
    every noise level.  The value is debiased by the expected reading of
    the unchanged reference under the flow's noise profile (Gauss-Hermite
    quadrature), and the gradient field is smoothed the way convolutional
    saliency is.  With l = 0 (or ``noise_aware=False``) both paths reduce
    exactly to :func:`soft_tumor_fraction`.
    """

    def __init__(self, tau: float, softness: float, brain_mask: BinaryMask,
                 reference: Image2D = None, noise_aware: bool = True,
                 value_prior: float = 0.15, gradient_band: float = 1.2,
                 gradient_smooth: float = 0.8, flow_profile: np.ndarray = None):
        if not (softness > 0):
            raise InvalidInputError(f"softness must be > 0, got {softness}")
        self.tau = float(tau)
        self.softness = float(softness)
        self.mask = np.asarray(brain_mask.bits, dtype=bool)
        self.n_mask = int(self.mask.sum())
        if self.n_mask == 0:
            raise InvalidInputError("brain mask is empty")
        self.noise_aware = bool(noise_aware) and reference is not None
        self.reference = (np.asarray(reference.pixels, dtype=float)
                          if reference is not None else None)
        self.value_prior = float(value_prior)
        self.gradient_band = float(gradient_band)
        self.gradient_smooth = float(gradient_smooth)
        self.flow_profile = flow_profile
        self._bias_cache = {}

    # -- helpers ------------------------------------------------------

    def _noise_amp(self, l: int, sched: NoiseSchedule) -> float:
        """Deviation amplitude of x_l / sqrt(alpha_bar_l) around the clean
        image; falls back to the forward-process value when no flow
        profile was provided."""
        if self.flow_profile is not None and l < len(self.flow_profile):
            return float(self.flow_profile[l]) / np.sqrt(sched.alpha_bar[l])
        a = sched.alpha_bar[l]
        return float(np.sqrt((1.0 - a) / a))

    def _value_weight(self, l: int, sched: NoiseSchedule) -> float:
        a = sched.alpha_bar[l]
        p2 = self.value_prior ** 2
        return a * p2 / (a * p2 + 1.0 - a)

    def _gradient_weight(self, l: int, sched: NoiseSchedule) -> float:
        # keep the gradient path's estimate noise near gradient_band * softness
        raw = self._noise_amp(l, sched)
        if raw <= 0:
            return 1.0
        return min(1.0, self.gradient_band * self.softness / raw)

    def _reference_bias(self, l: int, sched: NoiseSchedule) -> float:
        """Expected value-path reading of the untouched reference at step l,
        minus its clean reading."""
        key = l
        cached = self._bias_cache.get(key)
        if cached is not None:
            return cached
        w = self._value_weight(l, sched)
        amp = w * self._noise_amp(l, sched)
        ref_m = self.reference[self.mask]
        nodes, weights = _gauss_hermite()
        z = (ref_m[None, :] + amp * nodes[:, None] - self.tau) / self.softness
        expected = float((weights[:, None] * expit(z)).sum(axis=0).mean())
        clean = float(expit((ref_m - self.tau) / self.softness).mean())
        bias = expected - clean
        self._bias_cache[key] = bias
        return bias

    # -- protocol ------------------------------------------------------

    def predict(self, x_l: np.ndarray, l: int, sched: NoiseSchedule):
        """Returns (value, gradient); value estimates the clean tumor
        fraction of the image underlying ``x_l`` at noise level l."""
        x_l = np.asarray(x_l, dtype=float)
        if l == 0 or not self.noise_aware:
            return soft_tumor_fraction(x_l, self.tau, self.softness, self.mask)
        sched.check_step(l)
        a = sched.alpha_bar[l]
        y = x_l / np.sqrt(a)

        wv = self._value_weight(l, sched)
        xv = wv * y + (1.0 - wv) * self.reference
        value, _ = soft_tumor_fraction(xv, self.tau, self.softness, self.mask)
        value = value - self._reference_bias(l, sched)

        wg = self._gradient_weight(l, sched)
        xg = wg * y + (1.0 - wg) * self.reference
        sig = expit((xg - self.tau) / self.softness)
        grad = np.where(self.mask,
                        sig * (1.0 - sig) * wg / (np.sqrt(a) * self.softness * self.n_mask),
                        0.0)
        if self.gradient_smooth > 0:
            sigma = (0,) * (grad.ndim - 2) + (self.gradient_smooth,) * 2
            grad = gaussian_filter(grad, sigma=sigma)
            grad = np.where(self.mask, grad, 0.0)
        return value, grad


# ---------------------------------------------------------------------------
# generation

def _resolve_seeds(seed, n):
    from .mechanistic import replicate_seed
    return [replicate_seed(seed, i) for i in range(n)]


def generate_batch(ref: Image2D, nl: int, denoiser, regressor,
                   targets, guidance: GuidanceConfig, sched: NoiseSchedule,
                   seeds) -> np.ndarray:
    """Guided deterministic generation for a batch of targets.

    Every sample is forward-noised with its own seed, then denoised
    nl -> 1 with the regressor evaluated at each step and the noise
    prediction shifted by the clamped, signed guidance scale.  Returns an
    array (n, H, W).  Equivalent to running :func:`generate` per sample.
    """
    sched.check_step(nl)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if len(seeds) != targets.size:
        raise InvalidInputError("one seed per target is required")
    base = np.asarray(ref.pixels, dtype=float)
    eps0 = np.stack([np.random.default_rng(s).standard_normal(base.shape)
                     for s in seeds])
    a_nl = sched.alpha_bar[nl]
    x = np.sqrt(a_nl) * base[None] + np.sqrt(1.0 - a_nl) * eps0
    t_col = targets[:, None, None]
    for l in range(nl, 0, -1):
        value, grad = regressor.predict(x, l, sched)
        value = np.asarray(value, dtype=float).reshape(-1, 1, 1)
        s_r = _scale_core(guidance.s_ct, guidance.dyn_clamp, t_col, value)
        eps = denoiser.epsilon(x, l, sched)
        if np.ndim(grad) == 2:
            grad = np.broadcast_to(grad, x.shape)
        eps_bar = guided_epsilon(eps, grad, s_r, sched.alpha_bar[l])
        x = ddim_step(x, l, eps_bar, sched, 0.0)
    return x


def generate(ref: Image2D, nl: int, denoiser, regressor,
             guidance: GuidanceConfig, sched: NoiseSchedule,
             seed: int) -> Image2D:
    """Forward-noise a reference nl steps, then guided deterministic
    denoising toward the configured tumor-fraction target."""
    out = generate_batch(ref, nl, denoiser, regressor, [guidance.target],
                         guidance, sched, [seed])
    return ref.with_pixels(out[0])
