"""Mechanistic tumor-growth forecasting with guided diffusion synthesis."""

from .diffusion import (DeltaDenoiser, GaussianDenoiser, GuidanceConfig,
                        NoiseSchedule, SoftAreaRegressor, ddim_step,
                        forward_noise, gaussian_optimal_eps, generate,
                        generate_batch, guided_epsilon, make_schedule,
                        regressor_scale, soft_tumor_fraction)
from .errors import (DegenerateInputError, GliosynthError, InvalidInputError,
                     NumericalError, PluginError)
from .image import BinaryMask, Image2D, read_image, read_mask, write_image, write_mask
from .mechanistic import (AreaSeries, BootstrapEnsemble, FitResult, GrowthParams,
                          bootstrap_fit, default_bounds, evaluate_fit, fit_params,
                          predict_quantiles, read_series, tumor_area, write_series)
from .metrics import (ProbabilityMap, WilcoxonResult, aggregate_probability_map,
                      binarized_difference, dilate_to_double_area, hd95,
                      otsu_threshold, ssim_region, threshold_probability_map,
                      wilcoxon_signed_rank)
from .phantom import PhantomSeries, PhantomSpec, generate_phantom_series
from .pipeline import (GridPair, RunConfig, grid_search, run_dynamic_prediction,
                       run_static_prediction)

__version__ = "0.1.0"
