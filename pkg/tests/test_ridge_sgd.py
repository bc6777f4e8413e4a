import json

import numpy as np
import pytest

from droploop import (
    DivergenceError,
    ParameterSpace,
    PrintConditions,
    Raster,
    RidgeModel,
    augment,
    cross_validate,
    sgd_fit,
    sgd_suggest,
)
from droploop.ridge_sgd import (
    AugmentedRecord,
    AugmentedSet,
    RECORDS_PER_IMAGE,
    TRANSFORMS,
    assign_folds,
    ridge_gradient,
    ridge_objective,
    split_sub_images,
)

from conftest import make_disk_raster


def scatter_image(seed: int, shape=(64, 96)) -> Raster:
    rng = np.random.default_rng(seed)
    disks = []
    for _ in range(rng.integers(3, 8)):
        r = rng.integers(3, 7)
        disks.append(
            (rng.uniform(r, shape[0] - r), rng.uniform(r, shape[1] - r), float(r))
        )
    return make_disk_raster(shape, disks)


def synthetic_augmented(conditions_losses, space) -> AugmentedSet:
    """Direct records without image scoring, for pure regression tests."""
    img = Raster(pixels=np.full((16, 16), 255, dtype=np.uint8))
    records = tuple(
        AugmentedRecord(conditions=c, sub_image=img, loss=loss)
        for c, loss in conditions_losses
    )
    return AugmentedSet(records=records)


def linear_dataset(space, n=120, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    unit = rng.uniform(size=(n, 3))
    losses = 0.2 + 0.3 * unit[:, 0] + noise * rng.normal(size=n)
    conds = [PrintConditions.from_array(row) for row in space.denormalize(unit)]
    return synthetic_augmented(list(zip(conds, losses)), space)


class TestAugment:
    def test_record_count_per_image(self, space):
        assert RECORDS_PER_IMAGE == 42
        batch = augment([(PrintConditions(0.05, 20.0, 300.0), scatter_image(0))])
        assert len(batch) == 42

    def test_twelve_images_give_504_records(self):
        samples = [
            (PrintConditions(0.05 + 0.005 * i, 20.0, 300.0), scatter_image(i))
            for i in range(12)
        ]
        batch = augment(samples)
        assert len(batch) == 504

    def test_rot90_four_times_is_identity(self):
        img = scatter_image(5)
        rotated = img.pixels
        rot90 = dict(TRANSFORMS)["rot90"]
        for _ in range(4):
            rotated = rot90(rotated)
        np.testing.assert_array_equal(rotated, img.pixels)

    def test_square_sub_images_share_loss_across_transforms(self):
        # height 96 / 2 == width 144 / 3, so every sub-image is square
        img = scatter_image(7, shape=(96, 144))
        batch = augment([(PrintConditions(0.05, 20.0, 300.0), img)])
        losses = [r.loss for r in batch.records]
        for start in range(0, len(losses), len(TRANSFORMS)):
            group = losses[start : start + len(TRANSFORMS)]
            assert max(group) - min(group) <= 1e-9

    def test_too_small_image_rejected(self):
        img = Raster(pixels=np.full((32, 32), 255, dtype=np.uint8))
        with pytest.raises(ValueError):
            augment([(PrintConditions(0.05, 20.0, 300.0), img)])

    def test_sub_image_grid_geometry(self):
        pixels = np.arange(64 * 96, dtype=np.uint8).reshape(64, 96)
        subs = split_sub_images(pixels)
        assert len(subs) == 6
        assert all(s.shape == (32, 32) for s in subs)
        np.testing.assert_array_equal(subs[0], pixels[:32, :32])
        np.testing.assert_array_equal(subs[-1], pixels[32:, 64:])


class TestSgdFit:
    def test_gradient_matches_finite_differences(self, space):
        data = linear_dataset(space, n=60, seed=1, noise=0.05)
        x, y = data.features(space), data.targets()
        rng = np.random.default_rng(2)
        eps = 1e-6
        for _ in range(20):
            theta = rng.normal(size=3)
            theta0 = float(rng.normal())
            lam = float(rng.uniform(0, 0.5))
            g_theta, g_theta0 = ridge_gradient(x, y, theta, theta0, lam)
            for k in range(3):
                step = np.zeros(3)
                step[k] = eps
                numeric = (
                    ridge_objective(x, y, theta + step, theta0, lam)
                    - ridge_objective(x, y, theta - step, theta0, lam)
                ) / (2 * eps)
                assert abs(g_theta[k] - numeric) <= 1e-5 * max(1.0, abs(numeric))
            numeric0 = (
                ridge_objective(x, y, theta, theta0 + eps, lam)
                - ridge_objective(x, y, theta, theta0 - eps, lam)
            ) / (2 * eps)
            assert abs(g_theta0 - numeric0) <= 1e-5 * max(1.0, abs(numeric0))

    def test_zero_targets_stay_at_zero(self, space):
        conds = [
            PrintConditions.from_array(row)
            for row in space.denormalize(np.random.default_rng(3).uniform(size=(30, 3)))
        ]
        data = synthetic_augmented([(c, 0.0) for c in conds], space)
        theta, theta0 = sgd_fit(data, space, lam=0.0, epochs=50, lr=0.05, seed=0)
        assert np.abs(theta).max() <= 1e-3
        assert abs(theta0) <= 1e-3

    def test_heavy_regularization_shrinks_weights(self, space):
        # lam large enough that the penalty dominates while per-record steps
        # stay stable (stability needs 2 * lr * lam below 1)
        data = linear_dataset(space, n=80, seed=4)
        theta, theta0 = sgd_fit(
            data, space, lam=100.0, epochs=1500, lr=1e-3, seed=0, tol=0.0
        )
        assert np.linalg.norm(theta) <= 1e-3
        assert abs(theta0 - data.targets().mean()) <= 0.01

    def test_noiseless_linear_recovery_matches_least_squares(self, space):
        data = linear_dataset(space, n=150, seed=5)
        x, y = data.features(space), data.targets()
        design = np.column_stack([x, np.ones(len(y))])
        exact, *_ = np.linalg.lstsq(design, y, rcond=None)
        theta, theta0 = sgd_fit(
            data, space, lam=1e-6, epochs=600, lr=0.05, seed=1, tol=1e-12
        )
        assert np.abs(theta - exact[:3]).max() <= 0.01
        assert abs(theta0 - exact[3]) <= 0.01
        assert np.abs(theta - np.array([0.3, 0.0, 0.0])).max() <= 0.01
        assert abs(theta0 - 0.2) <= 0.01

    def test_divergence_detected(self, space):
        data = linear_dataset(space, n=40, seed=6)
        with pytest.raises(DivergenceError):
            sgd_fit(data, space, lam=50.0, epochs=50, lr=1.0, seed=0, tol=0.0)

    def test_full_batch_objective_monotone(self, space):
        data = linear_dataset(space, n=60, seed=7, noise=0.1)
        x, y = data.features(space), data.targets()
        objective_trace = []
        theta = np.zeros(3)
        theta0 = 0.0
        lam = 0.01
        for epoch in range(1, 60):
            g_theta, g_theta0 = ridge_gradient(x, y, theta, theta0, lam)
            step = 0.05 / np.sqrt(epoch)
            theta = theta - step * g_theta
            theta0 = theta0 - step * g_theta0
            objective_trace.append(ridge_objective(x, y, theta, theta0, lam))
        assert all(b <= a + 1e-12 for a, b in zip(objective_trace, objective_trace[1:]))


class TestCrossValidate:
    def test_single_lambda_selected(self, space):
        data = linear_dataset(space, n=40, seed=8)
        model = cross_validate(data, space, lambdas=[0.01], k=4, epochs=30, lr=0.05, seed=0)
        assert model.lambda_star == 0.01

    def test_noiseless_linear_selects_smallest_lambda(self, space):
        data = linear_dataset(space, n=120, seed=9)
        model = cross_validate(
            data, space, lambdas=[1e-6, 1e-3, 1e-1, 1.0], k=5, epochs=120, lr=0.05,
            seed=0, tol=1e-10,
        )
        assert model.lambda_star == 1e-6

    def test_deterministic(self, space):
        data = linear_dataset(space, n=60, seed=10, noise=0.05)
        a = cross_validate(data, space, lambdas=[1e-4, 1e-2], k=4, epochs=40, seed=3)
        b = cross_validate(data, space, lambdas=[1e-4, 1e-2], k=4, epochs=40, seed=3)
        assert a.lambda_star == b.lambda_star
        np.testing.assert_array_equal(a.theta, b.theta)
        assert a.theta0 == b.theta0

    def test_folds_partition_data(self):
        folds = assign_folds(103, 10, seed=4)
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1
        joined = np.concatenate(folds)
        assert len(joined) == 103
        assert len(np.unique(joined)) == 103

    def test_empty_lambda_grid_rejected(self, space):
        data = linear_dataset(space, n=40, seed=11)
        with pytest.raises(ValueError):
            cross_validate(data, space, lambdas=[], k=4)

    def test_too_few_records_rejected(self, space):
        data = linear_dataset(space, n=5, seed=12)
        with pytest.raises(ValueError):
            cross_validate(data, space, lambdas=[0.01], k=10)


class TestSgdSuggest:
    def model(self, space, theta, theta0=0.5):
        return RidgeModel(
            theta=np.array(theta, dtype=float), theta0=theta0, lambda_star=0.01, space=space
        )

    def test_positive_weights_drive_to_all_low_corner(self, space):
        model = self.model(space, [0.121, 0.313, 0.148])
        cond, _ = sgd_suggest(model, space, seed=0)
        np.testing.assert_allclose(cond.as_array(), space.lows, rtol=1e-12)

    def test_zero_weights_tie_break_lexicographic(self, space):
        model = self.model(space, [0.0, 0.0, 0.0], theta0=0.7)
        cond, predicted = sgd_suggest(model, space, seed=0)
        assert predicted == 0.7
        np.testing.assert_allclose(cond.as_array(), space.lows, rtol=1e-12)

    def test_negative_pressure_weight_hits_upper_bound(self, space):
        model = self.model(space, [-1.0, 0.0, 0.0])
        cond, _ = sgd_suggest(model, space, seed=0)
        assert cond.pressure == space.dims[0].high

    def test_suggestion_inside_box_and_on_boundary(self, space):
        model = self.model(space, [0.2, -0.4, 0.1])
        cond, _ = sgd_suggest(model, space, seed=1)
        arr = cond.as_array()
        assert space.contains(arr)
        unit = space.normalize(arr)
        assert np.any((unit == 0.0) | (unit == 1.0))


class TestRidgeModelIo:
    def test_json_round_trip(self, space, tmp_path):
        model = RidgeModel(
            theta=np.array([0.1, -0.2, 0.3]), theta0=0.05, lambda_star=1e-3, space=space
        )
        path = tmp_path / "model.json"
        model.save(path)
        loaded = RidgeModel.load(path)
        np.testing.assert_array_equal(loaded.theta, model.theta)
        assert loaded.theta0 == model.theta0
        assert loaded.lambda_star == model.lambda_star
        assert loaded.space == model.space
        assert json.loads(model.to_json())["theta"] == [0.1, -0.2, 0.3]
