import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from droploop import BoundsError, Dimension, ParameterSpace, lhs_sample, uniform_candidates
from conftest import REFERENCE_TRAINING_ROWS


def as_matrix(conditions):
    return np.vstack([c.as_array() for c in conditions])


def strata_counts(values, low, high, n):
    bins = np.floor((values - low) / (high - low) * n).astype(int)
    bins = np.clip(bins, 0, n - 1)  # the high endpoint falls into the last stratum
    return np.bincount(bins, minlength=n)


class TestParameterSpace:
    def test_invalid_bounds_rejected(self):
        with pytest.raises(BoundsError):
            Dimension("pressure", 0.15, 0.02, "MPa")

    def test_wrong_dimension_count_rejected(self):
        dims = (Dimension("a", 0, 1), Dimension("b", 0, 1))
        with pytest.raises(BoundsError):
            ParameterSpace(dims=dims)

    def test_normalization_round_trip(self, space):
        rng = np.random.default_rng(3)
        pts = space.denormalize(rng.uniform(size=(50, 3)))
        back = space.normalize(pts)
        np.testing.assert_allclose(space.denormalize(back), pts, rtol=1e-12)

    def test_dict_round_trip(self, space):
        assert ParameterSpace.from_dict(space.to_dict()) == space


class TestLhsSample:
    def test_single_point_inside_box(self, space):
        (c,) = lhs_sample(space, 1, seed=5)
        assert space.contains(c.as_array())

    def test_stratification_n12(self, space):
        pts = as_matrix(lhs_sample(space, 12, seed=7))
        for axis, dim in enumerate(space.dims):
            counts = strata_counts(pts[:, axis], dim.low, dim.high, 12)
            assert (counts == 1).all()

    @pytest.mark.parametrize("n", [1, 5, 12, 50])
    def test_stratification_many_seeds(self, space, n):
        for seed in range(25):
            pts = as_matrix(lhs_sample(space, n, seed=seed))
            for axis, dim in enumerate(space.dims):
                counts = strata_counts(pts[:, axis], dim.low, dim.high, n)
                assert (counts == 1).all(), f"n={n} seed={seed} axis={axis}"

    def test_deterministic_per_seed(self, space):
        a = as_matrix(lhs_sample(space, 12, seed=11))
        b = as_matrix(lhs_sample(space, 12, seed=11))
        c = as_matrix(lhs_sample(space, 12, seed=12))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_containment(self, space):
        for seed in range(10):
            for c in lhs_sample(space, 20, seed=seed):
                assert space.contains(c.as_array())

    def test_n_below_one_rejected(self, space):
        with pytest.raises(ValueError):
            lhs_sample(space, 0, seed=1)

    def test_reference_speeds_fill_twelve_strata(self):
        # the 12 recorded speeds each occupy a distinct 50 mm/s stratum of [300, 900]
        speeds = np.array([row[2] for row in REFERENCE_TRAINING_ROWS])
        counts = strata_counts(speeds, 300.0, 900.0, 12)
        assert (counts == 1).all()


class TestUniformCandidates:
    def test_empty_pool_rejected(self, space):
        with pytest.raises(ValueError):
            uniform_candidates(space, 0, seed=1)

    def test_degenerate_box_containment(self):
        eps = 1e-9
        space = ParameterSpace.from_bounds(
            [(0.5 - eps, 0.5 + eps)] * 3
        )
        pts = as_matrix(uniform_candidates(space, 100, seed=2))
        assert np.all(np.abs(pts - 0.5) <= eps)

    def test_sample_mean_near_midpoint(self, space):
        pts = as_matrix(uniform_candidates(space, 10_000, seed=3))
        mid = (space.lows + space.highs) / 2
        rel = np.abs(pts.mean(axis=0) - mid) / (space.highs - space.lows)
        assert np.all(rel < 0.02)

    def test_deterministic_per_seed(self, space):
        a = as_matrix(uniform_candidates(space, 64, seed=9))
        b = as_matrix(uniform_candidates(space, 64, seed=9))
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=25, deadline=None)
    @given(m=st.integers(min_value=1, max_value=200), seed=st.integers(0, 2**31 - 1))
    def test_containment_property(self, m, seed):
        space = ParameterSpace()
        for c in uniform_candidates(space, m, seed=seed):
            assert space.contains(c.as_array())
