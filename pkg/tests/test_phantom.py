import numpy as np
import pytest

from gliosynth.errors import InvalidInputError
from gliosynth.mechanistic import GrowthParams, tumor_area
from gliosynth.phantom import (PhantomSpec, generate_phantom_series,
                               read_phantom_spec, write_phantom_spec)

GROWTH = GrowthParams(initial_area=180.0, growth_rate=0.022,
                      surviving_fraction=0.9, decay_rate=0.02,
                      decay_delay=15.0, decay_slope=0.1, rt_start=25.0)


def make_spec(**overrides):
    base = dict(growth=GROWTH, observation_times=(0.0, 12.0, 24.0, 36.0),
                tumor_center=(26.0, 32.0))
    base.update(overrides)
    return PhantomSpec(**base)


class TestSpecValidation:
    def test_requires_growth(self):
        with pytest.raises(InvalidInputError):
            PhantomSpec(observation_times=(0.0, 1.0))

    def test_times_must_increase(self):
        with pytest.raises(InvalidInputError):
            make_spec(observation_times=(0.0, 5.0, 5.0))

    def test_direction_normalized(self):
        spec = make_spec(growth_direction=(3.0, 4.0))
        assert spec.growth_direction == pytest.approx((0.6, 0.8))

    def test_drift_gain_nesting_limit(self):
        with pytest.raises(InvalidInputError):
            make_spec(eccentricity=1.3, drift_gain=1.4)
        make_spec(eccentricity=1.3, drift_gain=1.2)  # within the limit

    def test_tumor_must_be_brighter(self):
        with pytest.raises(InvalidInputError):
            make_spec(brain_mean=0.7, tumor_mean=0.6)

    def test_json_roundtrip(self, tmp_path):
        spec = make_spec()
        write_phantom_spec(tmp_path / "spec.json", spec)
        back = read_phantom_spec(tmp_path / "spec.json")
        assert back == spec


class TestGeneratePhantomSeries:
    def test_mask_areas_track_model_within_two_percent(self):
        spec = make_spec(observation_times=(0.0, 15.0, 30.0))
        series = generate_phantom_series(spec, seed=0)
        for frame in series.frames:
            assert frame.mask_area_mm2 == pytest.approx(frame.area_mm2, rel=0.02)
            assert frame.area_mm2 == pytest.approx(
                tumor_area(frame.time, GROWTH), rel=1e-12)

    def test_no_growth_gives_identical_masks(self):
        flat = GrowthParams(initial_area=180.0, growth_rate=0.0,
                            surviving_fraction=1.0, decay_rate=0.0,
                            decay_delay=1.0, decay_slope=0.1, rt_start=1000.0)
        spec = make_spec(growth=flat)
        series = generate_phantom_series(spec, seed=1)
        first = series.frames[0].mask.bits
        for frame in series.frames[1:]:
            np.testing.assert_array_equal(frame.mask.bits, first)

    def test_same_seed_bitwise_identical(self):
        spec = make_spec(noise_sigma=0.01)
        a = generate_phantom_series(spec, seed=3)
        b = generate_phantom_series(spec, seed=3)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.image.pixels, fb.image.pixels)
            np.testing.assert_array_equal(fa.mask.bits, fb.mask.bits)

    def test_masks_nested_under_growth(self):
        spec = make_spec()
        series = generate_phantom_series(spec, seed=2)
        for earlier, later in zip(series.frames, series.frames[1:]):
            assert np.all(later.mask.bits[earlier.mask.bits])

    def test_mask_area_monotone_in_requested_area(self):
        spec = make_spec()
        series = generate_phantom_series(spec, seed=4)
        counts = [f.mask.count() for f in series.frames]
        assert counts == sorted(counts)

    def test_tumor_exceeding_brain_rejected(self):
        big = GrowthParams(initial_area=180.0, growth_rate=0.08,
                           surviving_fraction=1.0, decay_rate=0.0,
                           decay_delay=1.0, decay_slope=0.1, rt_start=1000.0)
        spec = make_spec(growth=big, observation_times=(0.0, 40.0, 80.0))
        with pytest.raises(InvalidInputError):
            generate_phantom_series(spec, seed=0)

    def test_intensity_ranges(self):
        spec = make_spec(noise_sigma=0.01)
        series = generate_phantom_series(spec, seed=5)
        frame = series.frames[-1]
        img = frame.image.pixels
        brain = series.brain_mask.bits
        assert img.min() >= 0.0 and img.max() <= 1.0
        # tumor core bright, outside-brain dark
        core = frame.mask.bits & (np.abs(img - spec.tumor_mean) < 0.2)
        assert core.sum() > 0.5 * frame.mask.count()
        assert img[~brain].mean() < 0.1

    def test_area_series_consistency(self):
        spec = make_spec()
        series = generate_phantom_series(spec, seed=6)
        obs = series.area_series()
        assert len(obs) == len(series.frames)
        assert obs.t_rt_start == GROWTH.rt_start
        assert obs.brain_area == series.brain_mask.area_mm2()
