"""End-to-end orchestration: fit, extrapolate, generate, aggregate, evaluate.

Target conversion: the growth model works in mm^2 while guidance targets
live in the regressor's output scale.  Targets are anchored on the
reference image: ``target = regressor(ref) * predicted_area / last_observed
_area``.  The plain geometric fraction (area / brain area) is reported
alongside for interpretation.  Anchoring keeps any constant bias of the
tumor-fraction estimator from distorting the requested growth ratio.

Sub-seeds for per-target generations derive from the master seed and the
replicate index (sha-256 based), so dropping or reordering targets never
changes another target's noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .diffusion import (GaussianDenoiser, GuidanceConfig, NoiseSchedule,
                        SoftAreaRegressor, generate_batch, make_schedule)
from .errors import InvalidInputError, NumericalError
from .image import BinaryMask, Image2D
from .mechanistic import (AreaSeries, BootstrapEnsemble, bootstrap_fit,
                          ensemble_predictions, replicate_seed)
from .metrics import (ProbabilityMap, aggregate_probability_map,
                      binarized_difference, dilate_to_double_area, ssim_region,
                      threshold_probability_map)

DEFAULT_TAU = 0.58
DEFAULT_SOFTNESS = 0.05
DEFAULT_S0 = 0.04


@dataclass
class RunConfig:
    """Operating point of the generation pipeline."""

    nl: int = 200                       # forward-noise steps before denoising
    s_ct: float = 50000.0               # constant guidance factor
    steps: int = 1000                   # schedule length
    beta_start: float = 1e-4
    beta_end: float = 0.02
    n_bootstrap: int = 100
    noise_sigma: float = 0.10           # bootstrap perturbation (fractional)
    target_percentile_cap: float = 90.0
    probmap_mode: str = "dynamic"
    theta: float = 0.5                  # probability-map threshold
    seed: int = 0
    dyn_clamp: float = 1.0
    tau: float = DEFAULT_TAU            # regressor intensity threshold
    softness: float = DEFAULT_SOFTNESS  # regressor logistic width
    s0: float = DEFAULT_S0              # analytic denoiser prior width
    workers: int = 1                    # generation batch chunking

    def __post_init__(self):
        if not (1 <= self.nl <= self.steps):
            raise InvalidInputError(f"nl must be in [1, steps], got {self.nl}")
        if self.s_ct < 0:
            raise InvalidInputError("s_ct must be >= 0")
        if self.n_bootstrap < 1:
            raise InvalidInputError("n_bootstrap must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        if not (0 <= self.target_percentile_cap <= 100):
            raise InvalidInputError("target_percentile_cap must be in [0, 100]")
        if self.probmap_mode not in ("static", "dynamic"):
            raise InvalidInputError("probmap_mode must be static|dynamic")
        if not (0 <= self.theta <= 1):
            raise InvalidInputError("theta must be in [0, 1]")
        if self.workers < 1:
            raise InvalidInputError("workers must be >= 1")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)


def default_backends(ref: Image2D, brain_mask: BinaryMask, cfg: RunConfig,
                     sched: NoiseSchedule):
    """Analytic denoiser/regressor pair anchored on the reference image."""
    denoiser = GaussianDenoiser(mu=ref, s0=cfg.s0, support=brain_mask)
    profile = denoiser.flow_noise_profile(cfg.nl, sched)
    regressor = SoftAreaRegressor(tau=cfg.tau, softness=cfg.softness,
                                  brain_mask=brain_mask, reference=ref,
                                  flow_profile=profile)
    return denoiser, regressor


def area_to_fraction(area_mm2: float, brain_mask: BinaryMask) -> float:
    """Geometric tumor fraction of the reference slice brain area."""
    return float(area_mm2) / brain_mask.area_mm2()


def anchored_targets(areas_mm2, reference_area_mm2: float,
                     reference_fraction: float) -> np.ndarray:
    """Convert areas to regressor-scale targets via the reference anchor."""
    ratio = np.asarray(areas_mm2, dtype=float) / float(reference_area_mm2)
    return np.clip(reference_fraction * ratio, 0.0, 0.99)


def _chunked_generate(ref, nl, denoiser, regressor, targets, guidance, sched,
                      seeds, workers):
    """Ordered generation in memory-bounded chunks."""
    targets = np.asarray(targets, dtype=float)
    n = targets.size
    chunk = max(1, int(np.ceil(n / workers))) if workers > 1 else n
    outs = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        outs.append(generate_batch(ref, nl, denoiser, regressor,
                                   targets[start:stop], guidance, sched,
                                   seeds[start:stop]))
    return np.concatenate(outs, axis=0)


@dataclass
class DynamicPredictionResult:
    probability_map: ProbabilityMap
    predicted_mask: BinaryMask
    generated: list                    # Image2D per kept target
    ensemble: BootstrapEnsemble
    predicted_areas: np.ndarray        # per replicate, mm^2
    kept_indices: np.ndarray
    targets: np.ndarray                # regressor-scale targets actually used
    target_fractions: np.ndarray       # geometric fractions, for reporting
    reference_fraction: float


def run_dynamic_prediction(series: AreaSeries, ref_image: Image2D,
                           brain_mask: BinaryMask, t_future: float,
                           cfg: RunConfig, bounds=None,
                           decay_form: str = "independent",
                           denoiser=None, regressor=None) -> DynamicPredictionResult:
    """Bootstrap-target guided generation aggregated into a growth map.

    Bootstrap the growth fit, extrapolate every replicate to ``t_future``,
    keep targets at or below the configured percentile cap, run one
    generation per kept target with its own sub-seed, binarize the
    positive differences, and aggregate into a dynamic probability map
    thresholded at ``cfg.theta``.
    """
    if ref_image.pixels.shape != brain_mask.bits.shape:
        raise InvalidInputError("reference image and brain mask shapes differ")
    ens = bootstrap_fit(series, cfg.n_bootstrap, cfg.noise_sigma, bounds,
                        cfg.seed, decay_form=decay_form)
    if not any(r.converged for r in ens.replicates):
        raise NumericalError(
            "growth fit failed across all bootstrap replicates; "
            f"residual SSEs: {[r.residual_sse for r in ens.replicates[:5]]}...")
    preds = ensemble_predictions(ens, t_future)
    cap = np.percentile(preds, cfg.target_percentile_cap, method="linear")
    kept = np.flatnonzero(preds <= cap)
    if kept.size == 0:
        raise NumericalError("no bootstrap target at or below the percentile cap")

    sched = cfg.schedule()
    if denoiser is None or regressor is None:
        default_den, default_reg = default_backends(ref_image, brain_mask, cfg, sched)
        denoiser = denoiser or default_den
        regressor = regressor or default_reg

    ref_fraction, _ = _reference_fraction(ref_image, regressor, sched)
    targets = anchored_targets(preds[kept], float(series.areas[-1]), ref_fraction)
    fractions = np.array([area_to_fraction(a, brain_mask) for a in preds[kept]])
    seeds = [replicate_seed(cfg.seed, int(i)) for i in kept]
    guidance = GuidanceConfig(s_ct=cfg.s_ct, dyn_clamp=cfg.dyn_clamp, target=0.0)

    outs = _chunked_generate(ref_image, cfg.nl, denoiser, regressor, targets,
                             guidance, sched, seeds, cfg.workers)
    generated = [ref_image.with_pixels(o) for o in outs]
    masks = [binarized_difference(g, ref_image) for g in generated]
    pm = aggregate_probability_map(masks, mode="dynamic")
    predicted = threshold_probability_map(pm, cfg.theta)
    return DynamicPredictionResult(
        probability_map=pm, predicted_mask=predicted, generated=generated,
        ensemble=ens, predicted_areas=preds, kept_indices=kept,
        targets=targets, target_fractions=fractions,
        reference_fraction=ref_fraction)


def _reference_fraction(ref_image: Image2D, regressor, sched) -> tuple:
    value, _ = regressor.predict(ref_image.pixels, 0, sched)
    return float(value), None


@dataclass
class StaticPredictionResult:
    probability_map: ProbabilityMap
    predicted_mask: BinaryMask
    generated: list
    target: float


def run_static_prediction(ref_image: Image2D, brain_mask: BinaryMask,
                          target_fraction: float, n_repeats: int,
                          cfg: RunConfig, denoiser=None,
                          regressor=None) -> StaticPredictionResult:
    """Repeated generation at one fixed target with fresh forward noise."""
    if n_repeats < 1:
        raise InvalidInputError("n_repeats must be >= 1")
    sched = cfg.schedule()
    if denoiser is None or regressor is None:
        default_den, default_reg = default_backends(ref_image, brain_mask, cfg, sched)
        denoiser = denoiser or default_den
        regressor = regressor or default_reg
    targets = np.full(n_repeats, float(target_fraction))
    seeds = [replicate_seed(cfg.seed, i) for i in range(n_repeats)]
    guidance = GuidanceConfig(s_ct=cfg.s_ct, dyn_clamp=cfg.dyn_clamp, target=0.0)
    outs = _chunked_generate(ref_image, cfg.nl, denoiser, regressor, targets,
                             guidance, sched, seeds, cfg.workers)
    generated = [ref_image.with_pixels(o) for o in outs]
    masks = [binarized_difference(g, ref_image) for g in generated]
    pm = aggregate_probability_map(masks, mode="static")
    predicted = threshold_probability_map(pm, cfg.theta)
    return StaticPredictionResult(probability_map=pm, predicted_mask=predicted,
                                  generated=generated,
                                  target=float(target_fraction))


@dataclass(frozen=True)
class GridPair:
    """One longitudinal case for the grid search."""

    ref: Image2D
    brain_mask: BinaryMask
    tumor_mask: BinaryMask
    target_fraction: float        # regressor-scale target (known next size)


@dataclass(frozen=True)
class GridCell:
    nl: int
    s_ct: float
    ssim_tumor: float
    ssim_outside: float


def grid_search(pairs, nl_values, s_ct_values, cfg: RunConfig,
                denoiser_factory=None, regressor_factory=None) -> list:
    """Sweep noise level and guidance scale; score region similarity.

    For every cell each pair generates one image; the returned rows hold
    the across-pair mean similarity inside the tumor mask and outside its
    doubled-area dilation, both against the reference image.
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidInputError("grid search needs at least one pair")
    nl_values = [int(v) for v in nl_values]
    s_ct_values = [float(v) for v in s_ct_values]
    for nl in nl_values:
        if not (1 <= nl <= cfg.steps):
            raise InvalidInputError(f"grid nl={nl} outside [1, {cfg.steps}]")

    sched = cfg.schedule()
    regions = []
    backends = []
    for pair in pairs:
        grown = dilate_to_double_area(pair.tumor_mask)
        outside = BinaryMask(bits=~grown.mask.bits,
                             pixel_spacing=pair.tumor_mask.pixel_spacing)
        regions.append((pair.tumor_mask, outside))
        if denoiser_factory is not None or regressor_factory is not None:
            den = denoiser_factory(pair) if denoiser_factory else None
            reg = regressor_factory(pair) if regressor_factory else None
        else:
            den = reg = None
        if den is None or reg is None:
            default_den, default_reg = default_backends(pair.ref, pair.brain_mask,
                                                        cfg, sched)
            den = den or default_den
            reg = reg or default_reg
        backends.append((den, reg))

    rows = []
    cell_index = 0
    for nl in nl_values:
        for s_ct in s_ct_values:
            guidance = GuidanceConfig(s_ct=s_ct, dyn_clamp=cfg.dyn_clamp, target=0.0)
            tumor_scores, outside_scores = [], []
            for pair_index, pair in enumerate(pairs):
                den, reg = backends[pair_index]
                seed = replicate_seed(cfg.seed, cell_index * len(pairs) + pair_index)
                out = generate_batch(pair.ref, nl, den, reg,
                                     [pair.target_fraction], guidance, sched,
                                     [seed])
                gen = pair.ref.with_pixels(out[0])
                tumor_mask, outside = regions[pair_index]
                tumor_scores.append(ssim_region(gen, pair.ref, tumor_mask))
                outside_scores.append(ssim_region(gen, pair.ref, outside))
            rows.append(GridCell(nl=nl, s_ct=s_ct,
                                 ssim_tumor=float(np.mean(tumor_scores)),
                                 ssim_outside=float(np.mean(outside_scores))))
            cell_index += 1
    return rows
