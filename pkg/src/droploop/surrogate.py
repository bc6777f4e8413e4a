"""Gaussian-process surrogate over printing conditions.

Matern 5/2 kernel with one lengthscale per dimension, hyperparameters chosen
by maximizing the log marginal likelihood from several seeded restarts, and
expected improvement for proposing the next condition to print. Inputs are
normalized to the unit cube; targets are standardized internally so the
fixed diagonal jitter acts on a comparable scale regardless of the spread
of observed losses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.optimize import minimize
from scipy.special import ndtr

from .errors import ConditioningError
from .sampling import ParameterSpace, PrintConditions, uniform_unit_candidates

SQRT5 = math.sqrt(5.0)

DEFAULT_JITTER = 0.01
# lengthscale floor keeps the fit from chasing sub-resolution texture
LENGTHSCALE_BOUNDS = (0.1, 2.0)
SIGNAL_VARIANCE_BOUNDS = (0.1, 2.0)
DEFAULT_RESTARTS = 8
DEFAULT_CANDIDATES = 10_000
PERTURB_PER_POINT = 8
PERTURB_SCALE = 0.02


def matern52(a, b, lengthscales, signal_variance: float):
    """Matern 5/2 covariance with per-dimension lengthscales.

    k = sv * (1 + sqrt(5) d + 5/3 d^2) * exp(-sqrt(5) d) with d the
    lengthscale-weighted Euclidean distance. Accepts single vectors or row
    stacks; broadcasting follows numpy rules.
    """
    ls = np.asarray(lengthscales, dtype=float)
    sv = float(signal_variance)
    if np.any(ls <= 0) or sv <= 0:
        raise ValueError("lengthscales and signal_variance must be > 0")
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    diff = (a[:, None, :] - b[None, :, :]) / ls
    d = np.sqrt((diff * diff).sum(axis=-1))
    k = sv * (1.0 + SQRT5 * d + (5.0 / 3.0) * d * d) * np.exp(-SQRT5 * d)
    return k if k.size > 1 else float(k[0, 0])


@dataclass(frozen=True)
class GpModel:
    """Fitted surrogate; immutable, safe for concurrent reads."""

    space: ParameterSpace
    train_x: np.ndarray  # (n, 3) in the unit cube, canonically ordered
    train_y: np.ndarray  # (n,) raw loss scores
    lengthscales: np.ndarray
    kernel_variance: float  # on the standardized-target scale
    jitter: float
    y_center: float
    y_scale: float
    chol_lower: np.ndarray
    alpha: np.ndarray
    lml: float = float("nan")
    restart_init_lmls: tuple[float, ...] = field(default=())

    @property
    def signal_variance(self) -> float:
        """Prior variance in raw loss units (far-field predictive variance)."""
        return self.kernel_variance * self.y_scale**2

    def kernel_matrix(self) -> np.ndarray:
        """K(train, train) + jitter I on the standardized scale."""
        k = matern52(self.train_x, self.train_x, self.lengthscales, self.kernel_variance)
        return np.atleast_2d(k) + self.jitter * np.eye(len(self.train_x))

    def predict_unit(self, x_unit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and stddev (raw units) at unit-cube points."""
        q = np.atleast_2d(np.asarray(x_unit, dtype=float))
        k_star = np.atleast_2d(
            matern52(q, self.train_x, self.lengthscales, self.kernel_variance)
        )
        mean = self.y_center + self.y_scale * (k_star @ self.alpha)
        v = cho_solve((self.chol_lower, True), k_star.T)
        var = np.clip(self.kernel_variance - (k_star * v.T).sum(axis=1), 0.0, None)
        return mean, self.y_scale * np.sqrt(var)


def _canonical_order(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # sort by coordinates then target so the fit ignores input ordering
    order = np.lexsort((y, x[:, 2], x[:, 1], x[:, 0]))
    return x[order], y[order]


def _neg_lml(log_params: np.ndarray, x: np.ndarray, y_std: np.ndarray, jitter: float) -> float:
    ls = np.exp(log_params[:3])
    sv = float(np.exp(log_params[3]))
    k = matern52(x, x, ls, sv) + jitter * np.eye(len(x))
    try:
        low = cholesky(k, lower=True)
    except np.linalg.LinAlgError:
        return 1e12
    alpha = cho_solve((low, True), y_std)
    return float(
        0.5 * y_std @ alpha + np.log(np.diag(low)).sum() + 0.5 * len(y_std) * math.log(2 * math.pi)
    )


def _neg_lml_and_grad(
    log_params: np.ndarray, x: np.ndarray, y_std: np.ndarray, jitter: float
) -> tuple[float, np.ndarray]:
    """Negative log marginal likelihood and its gradient in log-parameters."""
    ls = np.exp(log_params[:3])
    sv = float(np.exp(log_params[3]))
    n = len(x)
    diff = x[:, None, :] - x[None, :, :]
    scaled_sq = (diff / ls) ** 2  # (n, n, 3)
    d = np.sqrt(scaled_sq.sum(axis=-1))
    decay = np.exp(-SQRT5 * d)
    k_core = sv * (1.0 + SQRT5 * d + (5.0 / 3.0) * d * d) * decay
    k = k_core + jitter * np.eye(n)
    try:
        low = cholesky(k, lower=True)
    except np.linalg.LinAlgError:
        return 1e12, np.zeros(4)
    alpha = cho_solve((low, True), y_std)
    k_inv = cho_solve((low, True), np.eye(n))
    nlml = float(
        0.5 * y_std @ alpha + np.log(np.diag(low)).sum() + 0.5 * n * math.log(2 * math.pi)
    )
    w = np.outer(alpha, alpha) - k_inv
    # dK/d(log ls_i) = sv * 5/3 * (1 + sqrt(5) d) * exp(-sqrt(5) d) * scaled_sq_i
    base = sv * (5.0 / 3.0) * (1.0 + SQRT5 * d) * decay
    grad = np.empty(4)
    for i in range(3):
        grad[i] = -0.5 * float((w * (base * scaled_sq[:, :, i])).sum())
    grad[3] = -0.5 * float((w * k_core).sum())  # dK/d(log sv) = K without jitter
    return nlml, grad


def fit(
    train: list[tuple[PrintConditions, float]],
    space: ParameterSpace,
    jitter: float = DEFAULT_JITTER,
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    hyperparams: tuple | None = None,
    warm_start: tuple | None = None,
) -> GpModel:
    """Fit the surrogate to (conditions, loss) pairs.

    Hyperparameters are selected by maximizing the log marginal likelihood
    with ``restarts`` seeded L-BFGS-B starts, lengthscales searched in
    [0.05, 2] and signal variance in [0.1, 2] (log scale). ``warm_start``
    adds (lengthscales, signal_variance) from a previous fit as one more
    start; ``hyperparams`` skips the search entirely and reuses the given
    values. The kernel matrix is factorized once; if factorization fails the
    jitter is escalated by x10 up to three times before raising.
    """
    if not train:
        raise ValueError("training set is empty")
    y_raw = np.array([float(loss) for _, loss in train])
    if not np.all(np.isfinite(y_raw)):
        raise ValueError("training losses must be finite")
    x = space.normalize(np.vstack([c.as_array() for c, _ in train]))
    x, y_raw = _canonical_order(x, y_raw)

    center = float(y_raw.mean())
    scale = float(y_raw.std())
    if scale < 1e-12:
        scale = 1.0
    y_std = (y_raw - center) / scale

    init_lmls: list[float] = []
    if hyperparams is not None:
        lengthscales = np.asarray(hyperparams[0], dtype=float)
        kernel_variance = float(hyperparams[1])
        best_obj = _neg_lml(
            np.log(np.r_[lengthscales, kernel_variance]), x, y_std, jitter
        )
    else:
        ls_lo, ls_hi = np.log(LENGTHSCALE_BOUNDS[0]), np.log(LENGTHSCALE_BOUNDS[1])
        sv_lo, sv_hi = np.log(SIGNAL_VARIANCE_BOUNDS[0]), np.log(SIGNAL_VARIANCE_BOUNDS[1])
        bounds = [(ls_lo, ls_hi)] * 3 + [(sv_lo, sv_hi)]

        rng = np.random.default_rng(seed)
        starts = [
            np.concatenate(
                [rng.uniform(ls_lo, ls_hi, size=3), rng.uniform(sv_lo, sv_hi, size=1)]
            )
            for _ in range(max(1, restarts))
        ]
        if warm_start is not None:
            prior = np.log(np.r_[np.asarray(warm_start[0], dtype=float), warm_start[1]])
            starts.append(np.clip(prior, [ls_lo] * 3 + [sv_lo], [ls_hi] * 3 + [sv_hi]))

        best_params: np.ndarray | None = None
        best_obj = math.inf
        for x0 in starts:
            obj0 = _neg_lml(x0, x, y_std, jitter)
            init_lmls.append(-obj0)
            if obj0 < best_obj:
                best_obj, best_params = obj0, x0
            res = minimize(
                _neg_lml_and_grad,
                x0,
                args=(x, y_std, jitter),
                method="L-BFGS-B",
                jac=True,
                bounds=bounds,
            )
            if res.fun < best_obj:
                best_obj, best_params = float(res.fun), np.asarray(res.x)

        lengthscales = np.exp(best_params[:3])
        kernel_variance = float(np.exp(best_params[3]))

    used_jitter = jitter
    low = None
    for _ in range(4):  # initial jitter plus three x10 escalations
        k = matern52(x, x, lengthscales, kernel_variance) + used_jitter * np.eye(len(x))
        try:
            low = cholesky(np.atleast_2d(k), lower=True)
            break
        except np.linalg.LinAlgError:
            used_jitter *= 10.0
    else:
        raise ConditioningError(
            f"kernel matrix not positive definite even at jitter {used_jitter / 10.0}"
        )
    alpha = cho_solve((low, True), y_std)

    return GpModel(
        space=space,
        train_x=x,
        train_y=y_raw,
        lengthscales=lengthscales,
        kernel_variance=kernel_variance,
        jitter=used_jitter,
        y_center=center,
        y_scale=scale,
        chol_lower=low,
        alpha=alpha,
        lml=-best_obj,
        restart_init_lmls=tuple(init_lmls),
    )


def predict(model: GpModel, cond: PrintConditions) -> tuple[float, float]:
    """Posterior mean and standard deviation at one condition."""
    mean, sd = model.predict_unit(model.space.normalize(cond.as_array()))
    return float(mean[0]), float(sd[0])


def _ei_values(mean: np.ndarray, sd: np.ndarray, f_star: float) -> np.ndarray:
    ei = np.zeros_like(mean)
    pos = sd > 0
    z = (f_star - mean[pos]) / sd[pos]
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    ei[pos] = sd[pos] * (z * ndtr(z) + pdf)
    return np.clip(ei, 0.0, None)


def expected_improvement(model: GpModel, cond: PrintConditions, f_star: float) -> float:
    """EI = E[max(0, f_star - f(x))]; zero wherever the posterior is certain."""
    mean, sd = model.predict_unit(model.space.normalize(cond.as_array()))
    return float(_ei_values(mean, sd, f_star)[0])


def _candidate_pool(
    model: GpModel, n_candidates: int, seed: int, perturb_scale: float = PERTURB_SCALE
) -> np.ndarray:
    """Uniform pool plus the training points and local perturbations of them.

    Each training point's perturbation cloud is keyed to the point's own
    value, so a point keeps the same cloud for the whole run regardless of
    how many samples arrive after it.
    """
    uniform = uniform_unit_candidates(n_candidates, seed)
    clouds = []
    for row in model.train_x:
        bits = np.asarray(row, dtype=np.float64).view(np.uint64)
        rng = np.random.default_rng((seed, 1, *(int(b) for b in bits)))
        jitters = rng.normal(0.0, perturb_scale, size=(PERTURB_PER_POINT, 3))
        clouds.append(np.clip(row[None, :] + jitters, 0.0, 1.0))
    return np.vstack([uniform, model.train_x, *clouds])


def suggest(
    model: GpModel,
    f_star: float,
    space: ParameterSpace,
    n_candidates: int = DEFAULT_CANDIDATES,
    seed: int = 0,
    perturb_scale: float = PERTURB_SCALE,
) -> tuple[PrintConditions, float]:
    """Pick the EI-maximizing candidate; returns it with its posterior mean.

    Ties on EI are broken by the lowest posterior mean, then by lexicographic
    order of the normalized vector, so the choice is deterministic.
    ``perturb_scale`` sets the radius of the local clouds around training
    points; the loop uses a much finer radius than the one-shot default so
    that a stabilized surrogate re-selects the identical candidate.
    """
    pool = _candidate_pool(model, n_candidates, seed, perturb_scale)
    mean, sd = model.predict_unit(pool)
    ei = _ei_values(mean, sd, f_star)

    best_ei = ei.max()
    tied = np.flatnonzero(ei == best_ei)
    if len(tied) > 1:
        best_mean = mean[tied].min()
        tied = tied[mean[tied] == best_mean]
    if len(tied) > 1:
        sub = pool[tied]
        tied = tied[np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0]))[:1]]
    winner = int(tied[0])
    cond = PrintConditions.from_array(space.denormalize(pool[winner]))
    return cond, float(mean[winner])


@dataclass(frozen=True)
class AcquisitionField:
    """EI evaluated on a dense 3-D grid over the parameter box."""

    space: ParameterSpace
    grid_unit: tuple[np.ndarray, np.ndarray, np.ndarray]
    values: np.ndarray  # shape (n1, n2, n3), all >= 0

    def grid_raw(self, axis: int) -> np.ndarray:
        lo = self.space.dims[axis].low
        hi = self.space.dims[axis].high
        return lo + self.grid_unit[axis] * (hi - lo)

    def cross_section(self, axis_a: int, axis_b: int) -> np.ndarray:
        """2-D slice (a x b) obtained by max-projection over the third axis."""
        other = ({0, 1, 2} - {axis_a, axis_b}).pop()
        collapsed = self.values.max(axis=other)
        if axis_a > axis_b:
            collapsed = collapsed.T
        return collapsed


def acquisition_field(
    model: GpModel,
    f_star: float,
    space: ParameterSpace,
    grid: tuple[int, int, int] = (30, 30, 30),
) -> AcquisitionField:
    """Evaluate EI on the full 3-D grid (at least 2 points per axis)."""
    if min(grid) < 2:
        raise ValueError("grid counts must be >= 2")
    axes = tuple(np.linspace(0.0, 1.0, g) for g in grid)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    mean, sd = model.predict_unit(mesh)
    ei = _ei_values(mean, sd, f_star).reshape(grid)
    return AcquisitionField(space=space, grid_unit=axes, values=ei)
