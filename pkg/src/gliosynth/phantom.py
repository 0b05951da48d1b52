"""Synthetic longitudinal brain-slice series with ground truth.

A phantom frame is an elliptical "brain" with smooth low-frequency
texture plus an elliptical tumor whose area follows the mechanistic
growth model.  Tumor rendering uses a soft radial edge with a
directional infiltration halo: the edge is wider (and extends up to
``halo_len`` pixels) along the growth direction, so intensity carries
the same directional information a guided generator must reproduce.
Growth is anisotropic: the ellipse center drifts along the growth
direction proportionally to the radius increase (``drift_gain`` <=
eccentricity keeps masks nested).

Pixel masks are sized by bisecting a global scale factor until the pixel
count matches the model area, so mask areas track the closed-form curve
within quantization error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .errors import InvalidInputError
from .image import BinaryMask, Image2D
from .mechanistic import AreaSeries, GrowthParams, tumor_area

BACKGROUND_INTENSITY = 0.05


@dataclass(frozen=True)
class PhantomSpec:
    canvas: tuple = (64, 64)                 # (width, height) pixels
    pixel_spacing: float = 1.0               # mm / pixel
    brain_center: tuple = (32.3, 31.6)       # (x, y) pixels
    brain_axes: tuple = (22.0, 19.0)         # semi-axes, pixels
    background_texture_seed: int = 0
    texture_amplitude: float = 0.012
    tumor_center: tuple = (26.0, 32.0)       # (x, y) at t = times[0]
    growth_direction: tuple = (1.0, 0.0)     # unit vector
    eccentricity: float = 1.25               # axis ratio along direction
    drift_gain: float = 1.0                  # center drift per unit radius gain
    growth: GrowthParams = None
    observation_times: tuple = ()            # days, increasing
    brain_mean: float = 0.40
    tumor_mean: float = 0.63
    noise_sigma: float = 0.0                 # additive pixel noise
    edge_width: float = 1.5                  # base soft-edge width, pixels
    halo_boost: float = 5.0                  # leading-edge width multiplier
    halo_len: float = 6.0                    # infiltration extent, pixels

    def __post_init__(self):
        if self.growth is None:
            raise InvalidInputError("phantom needs growth parameters")
        times = tuple(float(t) for t in self.observation_times)
        object.__setattr__(self, "observation_times", times)
        if not times:
            raise InvalidInputError("observation_times must be nonempty")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidInputError("observation_times must be strictly increasing")
        if any(t < 0 for t in times):
            raise InvalidInputError("observation_times must be >= 0")
        norm = math.hypot(*self.growth_direction)
        if norm == 0:
            raise InvalidInputError("growth_direction must be a nonzero vector")
        object.__setattr__(self, "growth_direction",
                           (self.growth_direction[0] / norm,
                            self.growth_direction[1] / norm))
        if not (self.eccentricity > 0):
            raise InvalidInputError("eccentricity must be > 0")
        # containment of successive ellipses requires the trailing edge to
        # advance no faster than the along-direction semi-axis grows
        if self.drift_gain > self.eccentricity + 1e-9:
            raise InvalidInputError(
                "drift_gain must not exceed the eccentricity; masks would not nest")
        if not (self.tumor_mean > self.brain_mean):
            raise InvalidInputError("tumor_mean must exceed brain_mean")
        if not (self.edge_width > 0):
            raise InvalidInputError("edge_width must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["growth"] = self.growth.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["growth"] = GrowthParams.from_dict(d["growth"])
        for key in ("canvas", "brain_center", "brain_axes", "tumor_center",
                    "growth_direction", "observation_times"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class PhantomFrame:
    time: float
    image: Image2D
    mask: BinaryMask
    area_mm2: float            # closed-form model area
    mask_area_mm2: float       # rasterized mask area


@dataclass(frozen=True)
class PhantomSeries:
    spec: PhantomSpec
    frames: tuple
    brain_mask: BinaryMask

    def area_series(self) -> AreaSeries:
        """Observed series as the pipeline would see it (mask areas)."""
        return AreaSeries(
            times=np.array([f.time for f in self.frames]),
            areas=np.array([f.mask_area_mm2 for f in self.frames]),
            t_rt_start=self.spec.growth.rt_start,
            brain_area=self.brain_mask.area_mm2())


def _grid(spec: PhantomSpec):
    w, h = spec.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return xx, yy


def brain_mask_for(spec: PhantomSpec) -> BinaryMask:
    xx, yy = _grid(spec)
    cx, cy = spec.brain_center
    ax, ay = spec.brain_axes
    bits = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    return BinaryMask(bits=bits, pixel_spacing=spec.pixel_spacing)


def _tumor_geometry(spec: PhantomSpec, area_mm2: float):
    """Center and base radius (pixels) for a model area at one timepoint."""
    area_px = area_mm2 / spec.pixel_spacing ** 2
    r = math.sqrt(area_px / math.pi)
    area0_px = tumor_area(spec.observation_times[0], spec.growth) \
        / spec.pixel_spacing ** 2
    r0 = math.sqrt(area0_px / math.pi)
    dx, dy = spec.growth_direction
    drift = spec.drift_gain * (r - r0)
    cx = spec.tumor_center[0] + dx * drift
    cy = spec.tumor_center[1] + dy * drift
    return cx, cy, r


def _ellipse_field(spec: PhantomSpec, cx: float, cy: float, r: float):
    """Normalized radius q (1 on the nominal boundary), signed distance in
    pixels, and the cosine of the angle to the growth direction."""
    xx, yy = _grid(spec)
    dx, dy = spec.growth_direction
    a = spec.eccentricity * r
    b = r / spec.eccentricity
    u = (xx - cx) * dx + (yy - cy) * dy
    v = -(xx - cx) * dy + (yy - cy) * dx
    q = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    reff = math.sqrt(a * b)
    dist = (q - 1.0) * reff
    cosang = np.where(q > 1e-9, u / np.maximum(q * a, 1e-9), 0.0)
    return q, dist, cosang


def _mask_for_radius(spec: PhantomSpec, brain: np.ndarray, cx, cy, r):
    q, _, _ = _ellipse_field(spec, cx, cy, r)
    return (q <= 1.0) & brain


def _calibrated_radius(spec: PhantomSpec, brain: np.ndarray, cx, cy, r,
                       target_px: int) -> float:
    """Bisect a radius scale so the rasterized mask hits the target count."""
    lo, hi = 0.7 * r, 1.4 * r
    count_lo = _mask_for_radius(spec, brain, cx, cy, lo).sum()
    count_hi = _mask_for_radius(spec, brain, cx, cy, hi).sum()
    if count_lo > target_px or count_hi < target_px:
        return r  # calibration range exceeded; keep the nominal radius
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if _mask_for_radius(spec, brain, cx, cy, mid).sum() >= target_px:
            hi = mid
        else:
            lo = mid
    return hi


def render_frame(spec: PhantomSpec, time: float, brain: BinaryMask,
                 texture: np.ndarray, rng) -> PhantomFrame:
    area = float(tumor_area(time, spec.growth))
    cx, cy, r_nominal = _tumor_geometry(spec, area)
    target_px = max(1, int(round(area / spec.pixel_spacing ** 2)))
    r = _calibrated_radius(spec, brain.bits, cx, cy, r_nominal, target_px)
    mask_bits = _mask_for_radius(spec, brain.bits, cx, cy, r)

    _, dist, cosang = _ellipse_field(spec, cx, cy, r)
    width = spec.edge_width * (1.0 + spec.halo_boost * np.clip(cosang, 0.0, 1.0))
    profile = expit(-dist / width) * expit((spec.halo_len - dist) / spec.edge_width)

    img = np.full(brain.bits.shape, BACKGROUND_INTENSITY)
    intensity = spec.brain_mean + (spec.tumor_mean - spec.brain_mean) * profile
    img = np.where(brain.bits, intensity + texture, img)
    if spec.noise_sigma > 0:
        img = img + spec.noise_sigma * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)

    # ensure the nominal tumor stays within the brain
    q_check, _, _ = _ellipse_field(spec, cx, cy, r)
    inside = q_check <= 1.0
    if np.any(inside & ~brain.bits):
        raise InvalidInputError(
            f"tumor exceeds the brain ellipse at t={time} (area {area:.1f} mm^2)")

    mask = BinaryMask(bits=mask_bits, pixel_spacing=spec.pixel_spacing)
    return PhantomFrame(time=float(time),
                        image=Image2D(pixels=img, pixel_spacing=spec.pixel_spacing),
                        mask=mask, area_mm2=area,
                        mask_area_mm2=mask.area_mm2())


def generate_phantom_series(spec: PhantomSpec, seed: int = 0) -> PhantomSeries:
    """Deterministic longitudinal series of images, masks, and areas."""
    brain = brain_mask_for(spec)
    texture_rng = np.random.default_rng(spec.background_texture_seed)
    texture = gaussian_filter(texture_rng.standard_normal(brain.bits.shape), 6.0)
    texture = spec.texture_amplitude * texture / max(texture.std(), 1e-12)
    frames = []
    for i, t in enumerate(spec.observation_times):
        rng = np.random.default_rng((seed, i))
        frames.append(render_frame(spec, t, brain, texture, rng))
    return PhantomSeries(spec=spec, frames=tuple(frames), brain_mask=brain)


def write_phantom_spec(path, spec: PhantomSpec) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_phantom_spec(path) -> PhantomSpec:
    with open(path) as fh:
        return PhantomSpec.from_dict(json.load(fh))
