import numpy as np
import pytest

from gliosynth.errors import InvalidInputError
from gliosynth.image import BinaryMask, Image2D
from gliosynth.mechanistic import AreaSeries, GrowthParams, tumor_area
from gliosynth.metrics import hd95
from gliosynth.phantom import PhantomSpec, generate_phantom_series
from gliosynth.pipeline import (GridPair, RunConfig, anchored_targets,
                                area_to_fraction, grid_search,
                                run_dynamic_prediction, run_static_prediction)

GROWTH = GrowthParams(initial_area=90.0, growth_rate=0.03,
                      surviving_fraction=0.92, decay_rate=0.02,
                      decay_delay=15.0, decay_slope=0.1, rt_start=22.0)

FAST = dict(nl=60, steps=400, n_bootstrap=12, noise_sigma=0.05, seed=11)


@pytest.fixture(scope="module")
def phantom_case():
    spec = PhantomSpec(growth=GROWTH,
                       observation_times=(0.0, 10.0, 20.0, 27.0, 34.0, 41.0),
                       tumor_center=(24.0, 32.0), halo_len=9.0)
    series = generate_phantom_series(spec, seed=5)
    t_future = 66.0
    future_frame = generate_phantom_series(
        PhantomSpec(**{**spec.to_dict(), "growth": GROWTH,
                       "observation_times": tuple(spec.observation_times) + (t_future,)}),
        seed=5).frames[-1]
    return spec, series, t_future, future_frame


class TestRunConfig:
    def test_defaults_match_operating_point(self):
        cfg = RunConfig()
        assert cfg.nl == 200
        assert cfg.s_ct == 50000.0
        assert cfg.steps == 1000
        assert cfg.n_bootstrap == 100
        assert cfg.noise_sigma == 0.10
        assert cfg.target_percentile_cap == 90.0
        assert cfg.theta == 0.5

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            RunConfig(nl=0)
        with pytest.raises(InvalidInputError):
            RunConfig(nl=1001)
        with pytest.raises(InvalidInputError):
            RunConfig(theta=1.5)
        with pytest.raises(InvalidInputError):
            RunConfig(probmap_mode="other")


class TestTargetConversion:
    def test_area_to_fraction(self):
        mask = BinaryMask(bits=np.ones((10, 10), bool), pixel_spacing=2.0)
        assert area_to_fraction(40.0, mask) == pytest.approx(0.1)

    def test_anchored_targets_ratio(self):
        out = anchored_targets([100.0, 150.0, 200.0], 100.0, 0.08)
        np.testing.assert_allclose(out, [0.08, 0.12, 0.16])

    def test_anchored_targets_clipped(self):
        out = anchored_targets([1e9], 1.0, 0.5)
        assert out[0] == 0.99


class TestDynamicPrediction:
    def test_structure_and_percentile_filter(self, phantom_case):
        spec, series, t_future, future = phantom_case
        cfg = RunConfig(**FAST)
        obs = series.area_series()
        result = run_dynamic_prediction(obs, series.frames[-1].image,
                                        series.brain_mask, t_future, cfg)
        preds = result.predicted_areas
        cap = np.percentile(preds, cfg.target_percentile_cap)
        expected_kept = np.flatnonzero(preds <= cap)
        np.testing.assert_array_equal(result.kept_indices, expected_kept)
        assert len(result.generated) == expected_kept.size
        assert result.probability_map.mode == "dynamic"
        assert result.probability_map.n_aggregated == expected_kept.size
        assert result.targets.shape == (expected_kept.size,)
        assert np.all(result.targets >= 0) and np.all(result.targets < 1)
        assert result.predicted_mask.bits.shape == series.brain_mask.bits.shape

    def test_deterministic_given_seed(self, phantom_case):
        spec, series, t_future, _ = phantom_case
        cfg = RunConfig(**{**FAST, "n_bootstrap": 6})
        obs = series.area_series()
        a = run_dynamic_prediction(obs, series.frames[-1].image,
                                   series.brain_mask, t_future, cfg)
        b = run_dynamic_prediction(obs, series.frames[-1].image,
                                   series.brain_mask, t_future, cfg)
        np.testing.assert_array_equal(a.probability_map.values,
                                      b.probability_map.values)
        np.testing.assert_array_equal(a.predicted_mask.bits, b.predicted_mask.bits)

    def test_degenerate_bootstrap_collapses_targets(self, phantom_case):
        spec, series, t_future, _ = phantom_case
        cfg = RunConfig(**{**FAST, "n_bootstrap": 5, "noise_sigma": 0.0})
        obs = series.area_series()
        result = run_dynamic_prediction(obs, series.frames[-1].image,
                                        series.brain_mask, t_future, cfg)
        assert np.ptp(result.targets) < 1e-6 * max(result.targets.max(), 1e-12)

    def test_moves_toward_future_mask(self, phantom_case):
        # directional growth at the pinned operating point: the thresholded
        # map must beat the initial mask as a predictor of the future mask
        spec, series, t_future, future = phantom_case
        cfg = RunConfig(nl=200, steps=1000, n_bootstrap=24, noise_sigma=0.05,
                        seed=11)
        obs = series.area_series()
        result = run_dynamic_prediction(obs, series.frames[-1].image,
                                        series.brain_mask, t_future, cfg)
        initial_mask = series.frames[-1].mask
        d_pred = hd95(result.predicted_mask, future.mask)
        d_init = hd95(initial_mask, future.mask)
        assert d_pred < d_init


class TestStaticPrediction:
    def test_single_repeat_is_binary(self, phantom_case):
        spec, series, _, _ = phantom_case
        cfg = RunConfig(**FAST)
        ref = series.frames[-1].image
        result = run_static_prediction(ref, series.brain_mask, 0.12, 1, cfg)
        assert set(np.unique(result.probability_map.values)) <= {0.0, 1.0}
        assert result.probability_map.mode == "static"

    def test_seeded_reproducibility(self, phantom_case):
        spec, series, _, _ = phantom_case
        cfg = RunConfig(**FAST)
        ref = series.frames[-1].image
        a = run_static_prediction(ref, series.brain_mask, 0.12, 3, cfg)
        b = run_static_prediction(ref, series.brain_mask, 0.12, 3, cfg)
        np.testing.assert_array_equal(a.probability_map.values,
                                      b.probability_map.values)

    def test_repeat_runs_agree_on_average(self, phantom_case):
        # different seeds, same target: maps should mostly agree pixelwise
        spec, series, _, _ = phantom_case
        ref = series.frames[-1].image
        a = run_static_prediction(ref, series.brain_mask, 0.12, 8,
                                  RunConfig(**{**FAST, "seed": 1}))
        b = run_static_prediction(ref, series.brain_mask, 0.12, 8,
                                  RunConfig(**{**FAST, "seed": 2}))
        agreement = 1.0 - np.abs(a.probability_map.values -
                                 b.probability_map.values).mean()
        assert agreement > 0.9

    def test_rejects_bad_repeats(self, phantom_case):
        spec, series, _, _ = phantom_case
        with pytest.raises(InvalidInputError):
            run_static_prediction(series.frames[-1].image, series.brain_mask,
                                  0.1, 0, RunConfig(**FAST))


class TestGridSearch:
    @pytest.fixture(scope="class")
    def pair(self, phantom_case):
        spec, series, _, _ = phantom_case
        frame = series.frames[-1]
        from gliosynth.diffusion import soft_tumor_fraction
        from gliosynth.pipeline import DEFAULT_SOFTNESS, DEFAULT_TAU
        base, _ = soft_tumor_fraction(frame.image.pixels, DEFAULT_TAU,
                                      DEFAULT_SOFTNESS, series.brain_mask.bits)
        return GridPair(ref=frame.image, brain_mask=series.brain_mask,
                        tumor_mask=frame.mask, target_fraction=base * 1.4)

    def test_table_shape_and_unguided_row(self, pair):
        # with the exact-reconstruction denoiser and no guidance, both
        # regions score a perfect similarity: the unguided baseline row
        from gliosynth.diffusion import DeltaDenoiser
        cfg = RunConfig(**FAST)
        rows = grid_search([pair], [30, 60], [0.0, 25000.0], cfg,
                           denoiser_factory=lambda p: DeltaDenoiser(p.ref))
        assert len(rows) == 4
        assert {(r.nl, r.s_ct) for r in rows} == {(30, 0.0), (30, 25000.0),
                                                  (60, 0.0), (60, 25000.0)}
        unguided = [r for r in rows if r.s_ct == 0.0]
        for row in unguided:
            assert row.ssim_tumor == pytest.approx(1.0, abs=1e-6)
            assert row.ssim_outside == pytest.approx(1.0, abs=1e-6)

    def test_outside_similarity_non_increasing_in_nl(self, phantom_case):
        # unreachable target keeps guidance active for the whole trajectory,
        # so larger noise budgets alter the image more everywhere
        spec, series, _, _ = phantom_case
        frame = series.frames[-1]
        pair = GridPair(ref=frame.image, brain_mask=series.brain_mask,
                        tumor_mask=frame.mask, target_fraction=0.85)
        cfg = RunConfig(**FAST)
        rows = grid_search([pair], [40, 120, 280], [25000.0], cfg)
        outside = [r.ssim_outside for r in rows]
        assert outside[0] >= outside[1] - 1e-3
        assert outside[1] >= outside[2] - 1e-3

    def test_requires_pairs(self):
        with pytest.raises(InvalidInputError):
            grid_search([], [10], [0.0], RunConfig(**FAST))
