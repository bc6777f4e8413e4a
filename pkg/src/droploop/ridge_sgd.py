"""Ridge-regression baseline trained by per-record stochastic gradient descent.

The training corpus is built by cutting each sample image into a 2x3 grid of
sub-images and applying all seven dihedral transforms, so every printed
sample contributes 42 scored records that share its printing conditions.
Regularization is picked by seeded k-fold cross-validation, and the model
suggests new conditions by minimizing its linear prediction over a candidate
pool that includes the box corners.
"""
from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DivergenceError
from .printer import MIN_RASTER_SIDE, Raster
from .sampling import ParameterSpace, PrintConditions, uniform_unit_candidates
from .vision import LossWeights, SegmentationParams, score_image

SUB_GRID = (2, 3)  # rows x cols per image
DEFAULT_LAMBDAS = tuple(10.0**e for e in range(-6, 1))
DEFAULT_EPOCHS = 160
DEFAULT_LR = 0.05
DEFAULT_TOL = 0.01

# the seven dihedral maps applied to every sub-image
TRANSFORMS: tuple[tuple[str, object], ...] = (
    ("identity", lambda a: a),
    ("rot90", lambda a: np.rot90(a, 1)),
    ("rot180", lambda a: np.rot90(a, 2)),
    ("rot270", lambda a: np.rot90(a, 3)),
    ("mirror_vertical", np.flipud),
    ("mirror_horizontal", np.fliplr),
    ("transpose", np.transpose),
)
RECORDS_PER_IMAGE = SUB_GRID[0] * SUB_GRID[1] * len(TRANSFORMS)


@dataclass(frozen=True)
class AugmentedRecord:
    conditions: PrintConditions
    sub_image: Raster
    loss: float


@dataclass(frozen=True)
class AugmentedSet:
    records: tuple[AugmentedRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def features(self, space: ParameterSpace) -> np.ndarray:
        return space.normalize(np.vstack([r.conditions.as_array() for r in self.records]))

    def targets(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])


def split_sub_images(pixels: np.ndarray) -> list[np.ndarray]:
    """Cut an image into a 2x3 grid, cropping remainder from right/bottom."""
    rows, cols = SUB_GRID
    sub_h, sub_w = pixels.shape[0] // rows, pixels.shape[1] // cols
    if sub_h < MIN_RASTER_SIDE or sub_w < MIN_RASTER_SIDE:
        raise ValueError(
            f"image {pixels.shape[1]}x{pixels.shape[0]} too small for a "
            f"{rows}x{cols} grid of {MIN_RASTER_SIDE} px sub-images"
        )
    return [
        pixels[r * sub_h : (r + 1) * sub_h, c * sub_w : (c + 1) * sub_w]
        for r in range(rows)
        for c in range(cols)
    ]


def augment(
    samples: list[tuple[PrintConditions, Raster]],
    weights: LossWeights | None = None,
    params: SegmentationParams | None = None,
) -> AugmentedSet:
    """Expand each sample into 42 scored sub-image records."""
    if weights is None:
        weights = LossWeights()
    records: list[AugmentedRecord] = []
    for cond, raster in samples:
        for sub in split_sub_images(raster.pixels):
            for _, xf in TRANSFORMS:
                view = Raster(pixels=np.ascontiguousarray(xf(sub)))
                score = score_image(view, params, weights)
                records.append(
                    AugmentedRecord(conditions=cond, sub_image=view, loss=score.combined)
                )
    return AugmentedSet(records=tuple(records))


def ridge_objective(x: np.ndarray, y: np.ndarray, theta: np.ndarray, theta0: float, lam: float) -> float:
    """Mean squared error plus lam * ||theta||^2 (bias unpenalized)."""
    resid = y - (x @ theta + theta0)
    return float(np.mean(resid * resid) + lam * theta @ theta)


def ridge_gradient(
    x: np.ndarray, y: np.ndarray, theta: np.ndarray, theta0: float, lam: float
) -> tuple[np.ndarray, float]:
    """Analytic gradient of :func:`ridge_objective` wrt (theta, theta0)."""
    resid = y - (x @ theta + theta0)
    g_theta = -2.0 * (x.T @ resid) / len(y) + 2.0 * lam * theta
    g_theta0 = -2.0 * float(resid.mean())
    return g_theta, g_theta0


def sgd_fit(
    data: AugmentedSet,
    space: ParameterSpace,
    lam: float,
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    batch: str = "record",
) -> tuple[np.ndarray, float]:
    """Minimize the ridge objective by stochastic gradient steps.

    Records are visited in a freshly shuffled (seeded) order each epoch and
    the learning rate decays as 1/sqrt(epoch). Training stops early once the
    epoch-over-epoch objective improvement falls to a ``tol`` fraction of the
    current objective or below. ``batch="full"`` takes one full-gradient step
    per epoch instead, which gives a monotone objective for small enough
    learning rates.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if lr <= 0:
        raise ValueError("lr must be > 0")
    x = data.features(space)
    y = data.targets()
    return _sgd_on_arrays(x, y, lam, epochs, lr, seed, tol, batch)


def _sgd_on_arrays(x, y, lam, epochs, lr, seed, tol, batch="record"):
    n = len(y)
    rng = np.random.default_rng(seed)
    theta = np.zeros(x.shape[1])
    theta0 = 0.0
    initial = ridge_objective(x, y, theta, theta0, lam)
    previous = initial
    for epoch in range(1, epochs + 1):
        step = lr / math.sqrt(epoch)
        if batch == "full":
            g_theta, g_theta0 = ridge_gradient(x, y, theta, theta0, lam)
            theta = theta - step * g_theta
            theta0 = theta0 - step * g_theta0
        else:
            for i in rng.permutation(n):
                resid = y[i] - (x[i] @ theta + theta0)
                theta = theta - step * (-2.0 * resid * x[i] + 2.0 * lam * theta)
                theta0 = theta0 - step * (-2.0 * resid)
        current = ridge_objective(x, y, theta, theta0, lam)
        if current > 10.0 * max(initial, 1e-12):
            raise DivergenceError(
                f"objective {current:.3g} exceeded 10x its initial value; lower the learning rate"
            )
        if previous - current <= tol * max(previous, 1e-12):
            break
        previous = current
    return theta, theta0


@dataclass(frozen=True)
class RidgeModel:
    """Linear loss predictor on normalized conditions."""

    theta: np.ndarray
    theta0: float
    lambda_star: float
    space: ParameterSpace

    def predict_unit(self, x_unit: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x_unit) @ self.theta + self.theta0

    def predict(self, cond: PrintConditions) -> float:
        return float(self.predict_unit(self.space.normalize(cond.as_array()))[0])

    def to_json(self) -> str:
        return json.dumps(
            {
                "theta": [float(v) for v in self.theta],
                "theta0": float(self.theta0),
                "lambda_star": float(self.lambda_star),
                "space": self.space.to_dict(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "RidgeModel":
        data = json.loads(text)
        return cls(
            theta=np.array(data["theta"], dtype=float),
            theta0=float(data["theta0"]),
            lambda_star=float(data["lambda_star"]),
            space=ParameterSpace.from_dict(data["space"]),
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json() + "\n", encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "RidgeModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def assign_folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Disjoint index folds covering range(n), sizes differing by at most 1."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


def cross_validate(
    data: AugmentedSet,
    space: ParameterSpace,
    lambdas=DEFAULT_LAMBDAS,
    k: int = 10,
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
) -> RidgeModel:
    """Select the regularization by k-fold CV, then refit on all records.

    Ties on mean validation MSE go to the smaller lambda. Fold assignment
    and per-fold shuffling derive from ``seed`` alone, so results repeat.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("lambda grid is empty")
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(data) < k:
        raise ValueError(f"need at least k={k} records, got {len(data)}")

    x = data.features(space)
    y = data.targets()
    folds = assign_folds(len(y), k, seed)

    best_lam, best_mse = None, math.inf
    for li, lam in enumerate(lambdas):
        fold_mse = []
        for fi, val_idx in enumerate(folds):
            train_mask = np.ones(len(y), dtype=bool)
            train_mask[val_idx] = False
            sub_seed = int(np.random.SeedSequence((seed, li, fi)).generate_state(1)[0])
            theta, theta0 = _sgd_on_arrays(
                x[train_mask], y[train_mask], lam, epochs, lr, sub_seed, tol
            )
            resid = y[val_idx] - (x[val_idx] @ theta + theta0)
            fold_mse.append(float(np.mean(resid * resid)))
        mean_mse = float(np.mean(fold_mse))
        if mean_mse < best_mse or (mean_mse == best_mse and lam < best_lam):
            best_lam, best_mse = lam, mean_mse

    refit_seed = int(np.random.SeedSequence((seed, len(lambdas), 0)).generate_state(1)[0])
    theta, theta0 = _sgd_on_arrays(x, y, best_lam, epochs, lr, refit_seed, tol)
    return RidgeModel(theta=theta, theta0=theta0, lambda_star=best_lam, space=space)


def sgd_suggest(
    model: RidgeModel,
    space: ParameterSpace,
    n_candidates: int = 10_000,
    seed: int = 0,
) -> tuple[PrintConditions, float]:
    """Minimize the linear prediction over uniform candidates plus box corners.

    A linear model attains its box minimum at a corner, so the corners are
    always in the pool. Ties go to the lexicographically smallest normalized
    vector.
    """
    corners = np.array(list(itertools.product((0.0, 1.0), repeat=3)))
    pool = np.vstack([uniform_unit_candidates(n_candidates, seed), corners])
    preds = model.predict_unit(pool)
    best = preds.min()
    tied = np.flatnonzero(preds == best)
    if len(tied) > 1:
        sub = pool[tied]
        tied = tied[np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0]))[:1]]
    winner = int(tied[0])
    cond = PrintConditions.from_array(space.denormalize(pool[winner]))
    return cond, float(preds[winner])
