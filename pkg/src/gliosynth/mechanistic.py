"""Radiotherapy-aware tumor area dynamics: evaluation, fitting, bootstrap.

Model structure: exponential growth before treatment onset; at onset the
area splits into a surviving compartment (continues exponential growth)
and a dying compartment whose log-rate is gated by a tanh of time since
onset, so decay sets in gradually after a delay.

Two gate parameterizations are supported:

* ``"independent"`` (default): rate'(t) = -decay_rate * tanh((t - t_on - delay) * slope)
  with its own magnitude parameter; positive before the delay elapses
  (transient swelling), negative after (decay).
* ``"growth-coupled"``: rate'(t) = -growth_rate * tanh((t - t_on - delay) / slope),
  magnitude tied to the growth rate and steepness given as a divisor.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from .errors import InvalidInputError, NumericalError
from .optimize import least_squares_bounded

DECAY_FORMS = ("independent", "growth-coupled")

# fitted parameter order (t_rt_start is data, not a fit parameter)
_FIT_FIELDS = ("initial_area", "growth_rate", "surviving_fraction",
               "decay_rate", "decay_delay", "decay_slope")


@dataclass(frozen=True)
class GrowthParams:
    """Tumor growth model parameters (areas in mm^2, rates in 1/day)."""

    initial_area: float          # area at t = 0
    growth_rate: float           # net exponential growth rate
    surviving_fraction: float    # clonogenically surviving fraction in [0, 1]
    decay_rate: float            # dying-compartment decay magnitude, >= 0
    decay_delay: float           # days after onset before decay engages
    decay_slope: float           # steepness of the tanh gate, > 0
    rt_start: float              # treatment onset, days

    def __post_init__(self):
        if not (self.initial_area > 0):
            raise InvalidInputError(f"initial_area must be > 0, got {self.initial_area}")
        if not (0.0 <= self.surviving_fraction <= 1.0):
            raise InvalidInputError(
                f"surviving_fraction must be in [0, 1], got {self.surviving_fraction}")
        if self.decay_rate < 0:
            raise InvalidInputError(f"decay_rate must be >= 0, got {self.decay_rate}")
        if self.decay_delay < 0:
            raise InvalidInputError(f"decay_delay must be >= 0, got {self.decay_delay}")
        if not (self.decay_slope > 0):
            raise InvalidInputError(f"decay_slope must be > 0, got {self.decay_slope}")
        if self.rt_start < 0:
            raise InvalidInputError(f"rt_start must be >= 0, got {self.rt_start}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GrowthParams":
        return cls(**{k: float(d[k]) for k in
                      (*_FIT_FIELDS, "rt_start")})


@dataclass(frozen=True)
class AreaSeries:
    """Timestamped tumor-area measurements with treatment annotation."""

    times: np.ndarray        # days, strictly increasing, >= 0
    areas: np.ndarray        # mm^2, > 0
    t_rt_start: float        # days
    brain_area: float        # mm^2 of the reference slice brain region

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        areas = np.asarray(self.areas, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "areas", areas)
        if times.ndim != 1 or areas.shape != times.shape:
            raise InvalidInputError("times and areas must be 1D arrays of equal length")
        if times.size == 0:
            raise InvalidInputError("series must contain at least one point")
        if np.any(times < 0):
            raise InvalidInputError("times must be >= 0")
        if np.any(np.diff(times) <= 0):
            raise InvalidInputError("times must be strictly increasing")
        if np.any(areas <= 0):
            raise InvalidInputError("areas must be > 0")
        if self.t_rt_start < 0:
            raise InvalidInputError("t_rt_start must be >= 0")
        if not (self.brain_area > 0) or np.any(areas >= self.brain_area):
            raise InvalidInputError("brain_area must exceed every tumor area")

    def __len__(self) -> int:
        return int(self.times.size)


@dataclass(frozen=True)
class FitResult:
    params: GrowthParams
    residual_sse: float
    r_squared: float
    converged: bool
    n_iterations: int
    decay_form: str = "independent"

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "residual_sse": self.residual_sse,
            "r_squared": self.r_squared,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
            "decay_form": self.decay_form,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(params=GrowthParams.from_dict(d["params"]),
                   residual_sse=float(d["residual_sse"]),
                   r_squared=float(d["r_squared"]),
                   converged=bool(d["converged"]),
                   n_iterations=int(d["n_iterations"]),
                   decay_form=str(d.get("decay_form", "independent")))


@dataclass(frozen=True)
class BootstrapEnsemble:
    replicates: tuple          # of FitResult
    noise_sigma: float
    seed: int
    decay_form: str = "independent"

    def __post_init__(self):
        if len(self.replicates) == 0:
            raise InvalidInputError("ensemble must contain at least one replicate")

    def __len__(self) -> int:
        return len(self.replicates)

    def params(self) -> list:
        return [r.params for r in self.replicates]

    def to_dict(self) -> dict:
        return {
            "replicates": [r.to_dict() for r in self.replicates],
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "decay_form": self.decay_form,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BootstrapEnsemble":
        return cls(replicates=tuple(FitResult.from_dict(r) for r in d["replicates"]),
                   noise_sigma=float(d["noise_sigma"]),
                   seed=int(d["seed"]),
                   decay_form=str(d.get("decay_form", "independent")))


def _check_decay_form(decay_form: str) -> None:
    if decay_form not in DECAY_FORMS:
        raise InvalidInputError(
            f"unknown decay_form {decay_form!r}, expected one of {DECAY_FORMS}")


def tumor_area(t, p: GrowthParams, decay_form: str = "independent"):
    """Model area at time(s) t (days); vectorized over t.

    Continuous at the treatment onset: the pre-onset exponential is split
    into surviving and dying compartments that sum to the onset area.
    """
    _check_decay_form(decay_form)
    t_arr = np.asarray(t, dtype=float)
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    if np.any(t_arr < 0):
        raise InvalidInputError("t must be >= 0")

    out = p.initial_area * np.exp(p.growth_rate * t_arr)
    post = t_arr >= p.rt_start
    if np.any(post):
        dt = t_arr[post] - p.rt_start
        area_on = p.initial_area * math.exp(p.growth_rate * p.rt_start)
        living = p.surviving_fraction * area_on * np.exp(p.growth_rate * dt)
        if decay_form == "independent":
            gate = np.tanh((dt - p.decay_delay) * p.decay_slope)
            rate = -p.decay_rate * gate
        else:
            gate = np.tanh((dt - p.decay_delay) / p.decay_slope)
            rate = -p.growth_rate * gate
        dying = (1.0 - p.surviving_fraction) * area_on * np.exp(rate * dt)
        out[post] = living + dying
    return float(out[0]) if scalar else out


def default_bounds(series: AreaSeries) -> dict:
    """Physiologically generous box constraints keyed by parameter name."""
    first = float(series.areas[0])
    return {
        "initial_area": (0.1 * first, 10.0 * first),
        "growth_rate": (0.0, 0.2),
        "surviving_fraction": (0.0, 1.0),
        "decay_rate": (0.0, 0.5),
        "decay_delay": (0.0, 120.0),
        "decay_slope": (0.01, 1.0),
    }


def _merge_bounds(series: AreaSeries, bounds) -> dict:
    merged = default_bounds(series)
    if bounds:
        for key, pair in bounds.items():
            if key not in merged:
                raise InvalidInputError(f"unknown bound parameter {key!r}")
            lo, hi = float(pair[0]), float(pair[1])
            if lo > hi:
                raise InvalidInputError(f"malformed bounds for {key}: {lo} > {hi}")
            merged[key] = (lo, hi)
    return merged


def _bounds_arrays(bounds: dict):
    lo = np.array([bounds[k][0] for k in _FIT_FIELDS])
    hi = np.array([bounds[k][1] for k in _FIT_FIELDS])
    return lo, hi


def _params_from_vector(x, rt_start) -> GrowthParams:
    return GrowthParams(initial_area=float(x[0]), growth_rate=float(x[1]),
                        surviving_fraction=float(min(max(x[2], 0.0), 1.0)),
                        decay_rate=float(max(x[3], 0.0)),
                        decay_delay=float(max(x[4], 0.0)),
                        decay_slope=float(max(x[5], 1e-9)),
                        rt_start=float(rt_start))


def _vector_from_params(p: GrowthParams) -> np.ndarray:
    return np.array([p.initial_area, p.growth_rate, p.surviving_fraction,
                     p.decay_rate, p.decay_delay, p.decay_slope])


def _auto_inits(series: AreaSeries, bounds: dict) -> list:
    """Deterministic starting points: data-driven plus gate variants."""
    t, a = series.times, series.areas
    pre = t < series.t_rt_start
    if pre.sum() >= 2:
        tt, aa = t[pre], a[pre]
    else:
        tt, aa = t[:2], a[:2]
    if len(tt) >= 2 and tt[-1] > tt[0]:
        lam = math.log(aa[-1] / aa[0]) / (tt[-1] - tt[0])
    else:
        lam = 0.01
    lo, hi = _bounds_arrays(bounds)
    span = max(float(t[-1]) - series.t_rt_start, 1.0)

    def clipped(vec):
        return np.minimum(np.maximum(np.asarray(vec, dtype=float), lo), hi)

    base = [float(a[0]), lam, 0.5, 0.05, min(10.0, 0.25 * span), 0.1]
    variants = [
        base,
        [float(a[0]), lam, 0.85, 0.02, min(5.0, 0.1 * span), 0.2],
        [float(a[0]), lam, 0.15, 0.1, min(20.0, 0.5 * span), 0.05],
    ]
    return [clipped(v) for v in variants]


def _r_squared(observed: np.ndarray, predicted: np.ndarray) -> float:
    resid = observed - predicted
    sse = float(resid @ resid)
    sst = float(np.sum((observed - observed.mean()) ** 2))
    if sst > 0:
        return 1.0 - sse / sst
    scale = float(np.mean(observed ** 2)) * observed.size
    return 1.0 if sse <= 1e-12 * max(scale, 1e-300) else 0.0


def fit_params(series: AreaSeries, bounds=None, init="auto",
               decay_form: str = "independent") -> FitResult:
    """Least-squares fit of the growth model to an observed series.

    ``bounds`` maps parameter names to (lo, hi); omitted names use
    :func:`default_bounds`.  Fixing a parameter is lo == hi.  ``init`` is a
    GrowthParams starting point or ``"auto"`` for a deterministic
    multi-start from data-driven guesses.
    """
    _check_decay_form(decay_form)
    if len(series) < 3:
        raise InvalidInputError(f"need at least 3 points to fit, got {len(series)}")
    merged = _merge_bounds(series, bounds)
    lo, hi = _bounds_arrays(merged)

    t, a = series.times, series.areas

    def residuals(x):
        p = _params_from_vector(x, series.t_rt_start)
        return tumor_area(t, p, decay_form) - a

    if isinstance(init, GrowthParams):
        starts = [np.minimum(np.maximum(_vector_from_params(init), lo), hi)]
    elif init == "auto":
        starts = _auto_inits(series, merged)
    else:
        raise InvalidInputError(f"init must be GrowthParams or 'auto', got {init!r}")

    best = None
    for x0 in starts:
        x, res = least_squares_bounded(residuals, x0, lo, hi)
        if best is None or res.sse < best[1].sse:
            best = (x, res)
    x, res = best
    params = _params_from_vector(x, series.t_rt_start)
    predicted = tumor_area(t, params, decay_form)
    return FitResult(params=params, residual_sse=res.sse,
                     r_squared=_r_squared(a, predicted),
                     converged=res.converged, n_iterations=res.n_iterations,
                     decay_form=decay_form)


def perturbed_series(series: AreaSeries, rng, noise_sigma: float,
                     noise_mode: str = "multiplicative") -> AreaSeries:
    """Noise-perturbed copy; areas clamped to stay positive."""
    if noise_mode == "multiplicative":
        factors = 1.0 + noise_sigma * rng.standard_normal(len(series))
        areas = series.areas * factors
    elif noise_mode == "additive":
        areas = series.areas + noise_sigma * rng.standard_normal(len(series))
    else:
        raise InvalidInputError(f"unknown noise_mode {noise_mode!r}")
    areas = np.maximum(areas, 1e-9)
    areas = np.minimum(areas, series.brain_area * (1 - 1e-12))
    return replace(series, areas=areas)


def replicate_seed(master_seed: int, index: int) -> int:
    """Deterministic child seed; pinned so parallel order cannot matter."""
    import hashlib
    digest = hashlib.sha256(f"{master_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def bootstrap_fit(series: AreaSeries, n: int, noise_sigma: float,
                  bounds=None, rng_seed: int = 0,
                  noise_mode: str = "multiplicative",
                  decay_form: str = "independent") -> BootstrapEnsemble:
    """Residual-free bootstrap: re-fit noise-perturbed copies of the series.

    Each replicate fits from both a random start (uniform within bounds)
    and the deterministic auto starts, keeping the lower-SSE result; a
    replicate that fails to converge is retained with converged=False.
    Fully deterministic given ``rng_seed``; replicate RNGs are derived
    independently so execution order cannot change the output.
    """
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if noise_sigma < 0:
        raise InvalidInputError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if len(series) < 3:
        raise InvalidInputError(f"need at least 3 points to fit, got {len(series)}")
    merged = _merge_bounds(series, bounds)
    lo, hi = _bounds_arrays(merged)

    replicates = []
    for i in range(n):
        rng = np.random.default_rng(replicate_seed(rng_seed, i))
        perturbed = perturbed_series(series, rng, noise_sigma, noise_mode)
        rand_x0 = lo + (hi - lo) * rng.uniform(size=lo.size)
        rand_init = _params_from_vector(np.minimum(np.maximum(rand_x0, lo), hi),
                                        series.t_rt_start)
        fit_rand = fit_params(perturbed, merged, rand_init, decay_form)
        fit_auto = fit_params(perturbed, merged, "auto", decay_form)
        replicates.append(fit_rand if fit_rand.residual_sse < fit_auto.residual_sse
                          else fit_auto)
    return BootstrapEnsemble(replicates=tuple(replicates),
                             noise_sigma=noise_sigma, seed=rng_seed,
                             decay_form=decay_form)


def predict_quantiles(ens: BootstrapEnsemble, t, quantiles,
                      decay_form=None) -> np.ndarray:
    """Percentiles (linear interpolation) of replicate predictions at t."""
    quantiles = np.asarray(quantiles, dtype=float)
    if np.any((quantiles < 0) | (quantiles > 100)):
        raise InvalidInputError("quantiles must lie in [0, 100]")
    form = decay_form if decay_form is not None else ens.decay_form
    preds = np.array([tumor_area(t, p, form) for p in ens.params()])
    return np.percentile(preds, quantiles, method="linear")


def ensemble_predictions(ens: BootstrapEnsemble, t, decay_form=None) -> np.ndarray:
    """Per-replicate predictions at time(s) t, ordered by replicate index."""
    form = decay_form if decay_form is not None else ens.decay_form
    return np.array([tumor_area(t, p, form) for p in ens.params()])


def evaluate_fit(series: AreaSeries, mode: str, bounds=None,
                 n_bootstrap: int = 100, seed: int = 0,
                 noise_sigma: float = 0.10,
                 decay_form: str = "independent") -> dict:
    """Bootstrap-median goodness of fit.

    ``mode="all"``: fit every point, report R^2 of median predictions.
    ``mode="train"``: hold out the final point, additionally report
    nRMSE = |median_prediction(t_last) - observed| / observed.
    """
    if mode not in ("all", "train"):
        raise InvalidInputError(f"mode must be 'all' or 'train', got {mode!r}")
    if mode == "train" and len(series) < 4:
        raise InvalidInputError("train mode needs >= 4 points (3 to fit, 1 held out)")
    if mode == "all" and len(series) < 3:
        raise InvalidInputError("all mode needs >= 3 points")

    if mode == "train":
        fit_series = AreaSeries(times=series.times[:-1], areas=series.areas[:-1],
                                t_rt_start=series.t_rt_start,
                                brain_area=series.brain_area)
    else:
        fit_series = series

    ens = bootstrap_fit(fit_series, n_bootstrap, noise_sigma, bounds, seed,
                        decay_form=decay_form)
    if not any(r.converged for r in ens.replicates):
        raise NumericalError("no bootstrap replicate converged")
    preds = ensemble_predictions(ens, series.times)
    median_curve = np.median(preds, axis=0)

    if mode == "all":
        r2 = _r_squared(series.areas, median_curve)
        return {"r_squared": r2, "median_curve": median_curve, "ensemble": ens}

    train_r2 = _r_squared(series.areas[:-1], median_curve[:-1])
    observed_last = float(series.areas[-1])
    nrmse = abs(float(median_curve[-1]) - observed_last) / observed_last
    return {"r_squared": train_r2, "nrmse": nrmse,
            "median_curve": median_curve, "ensemble": ens}


# ---------------------------------------------------------------------------
# file formats

def write_series(csv_path, meta_path, series: AreaSeries) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_days", "area_mm2"])
        for t, a in zip(series.times, series.areas):
            writer.writerow([repr(float(t)), repr(float(a))])
    meta = {"t_rt_start_days": series.t_rt_start, "brain_area_mm2": series.brain_area}
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_series(csv_path, meta_path) -> AreaSeries:
    times, areas = [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["t_days", "area_mm2"]:
            raise InvalidInputError(
                f"{csv_path}: expected header 't_days,area_mm2', got {header}")
        for row in reader:
            if not row or not row[0].strip():
                continue
            try:
                times.append(float(row[0]))
                areas.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise InvalidInputError(f"{csv_path}: bad row {row}: {exc}") from exc
    with open(meta_path) as fh:
        meta = json.load(fh)
    for key in ("t_rt_start_days", "brain_area_mm2"):
        if key not in meta:
            raise InvalidInputError(f"{meta_path}: missing {key!r}")
    return AreaSeries(times=np.array(times), areas=np.array(areas),
                      t_rt_start=float(meta["t_rt_start_days"]),
                      brain_area=float(meta["brain_area_mm2"]))


def write_fit_result(path, fit: FitResult) -> None:
    with open(path, "w") as fh:
        json.dump(fit.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_ensemble(path, ens: BootstrapEnsemble) -> None:
    with open(path, "w") as fh:
        json.dump(ens.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_ensemble(path) -> BootstrapEnsemble:
    with open(path) as fh:
        return BootstrapEnsemble.from_dict(json.load(fh))
