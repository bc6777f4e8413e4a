"""Closed-loop orchestration: train, suggest, synthesize, score, repeat.

Both optimizers run through the same update machinery so their per-step
timings are directly comparable. The loop is sequential by design: every
synthesis depends on the model fitted to all earlier samples. A run is
fully determined by (optimizer, seed, configuration, backend), with all
per-update randomness derived from the run seed and the update index.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import ridge_sgd, surrogate
from .errors import DroploopError, MissingStateError
from .printer import Raster
from .sampling import ParameterSpace, PrintConditions, lhs_sample
from .vision import LossScore, LossWeights, SegmentationParams, score_image

LEDGER_SCHEMA_VERSION = 1
# train_s is model fitting alone; the acquisition search is predict_s so the
# two optimizers' training costs compare like for like
TIMING_FIELDS = ("read_s", "score_s", "train_s", "predict_s", "setup_s", "print_s", "image_s")


@dataclass(frozen=True)
class Sample:
    """One synthesized-and-scored print; element of the training set."""

    conditions: PrintConditions
    image: Raster
    score: LossScore
    origin: str  # "initialization" or "suggested"
    update_index: int


@dataclass(frozen=True)
class ConvergencePolicy:
    """Stop once the last ``repeats`` suggestions agree within ``tol`` per
    normalized dimension; always stop at ``max_updates``."""

    tol: float = 1e-3
    repeats: int = 2
    max_updates: int = 10

    def __post_init__(self) -> None:
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.repeats < 2:
            raise ValueError("repeats must be >= 2")
        if self.max_updates < self.repeats:
            raise ValueError("max_updates must be >= repeats")


@dataclass(frozen=True)
class UpdateRecord:
    update_index: int
    optimizer: str
    suggestion: PrintConditions
    predicted_loss: float
    actual_loss: float
    timings: dict[str, float]
    converged: bool


@dataclass
class RunLedger:
    """Append-only record of a run: inputs, every update, and the outcome."""

    optimizer: str
    seed: int
    space: ParameterSpace
    weights: LossWeights
    policy: ConvergencePolicy
    init_samples: list[Sample] = field(default_factory=list)
    updates: list[UpdateRecord] = field(default_factory=list)
    samples: list[Sample] = field(default_factory=list)
    models: dict[int, object] = field(default_factory=dict)
    converged: bool = False
    converged_update: int | None = None
    first_suggestion_update: int | None = None

    @property
    def final_suggestion(self) -> PrintConditions | None:
        return self.updates[-1].suggestion if self.updates else None

    def best_sample(self) -> Sample:
        return min(self.samples, key=lambda s: s.score.combined)

    def to_jsonl(self) -> str:
        """Deterministic persisted form (schema v1); timings live elsewhere
        because wall-clock measurements are not reproducible."""
        lines = [
            {
                "kind": "header",
                "schema": LEDGER_SCHEMA_VERSION,
                "optimizer": self.optimizer,
                "seed": self.seed,
                "space": self.space.to_dict(),
                "weights": {"geometric": self.weights.geometric, "yield": self.weights.yield_},
                "policy": {
                    "tol": self.policy.tol,
                    "repeats": self.policy.repeats,
                    "max_updates": self.policy.max_updates,
                },
            }
        ]
        for i, s in enumerate(self.init_samples):
            lines.append(
                {
                    "kind": "init",
                    "index": i,
                    "conditions": s.conditions.to_dict(),
                    "geometric": s.score.geometric,
                    "yield": s.score.yield_,
                    "combined": s.score.combined,
                }
            )
        for u in self.updates:
            lines.append(
                {
                    "kind": "update",
                    "update_index": u.update_index,
                    "optimizer": u.optimizer,
                    "suggestion": u.suggestion.to_dict(),
                    "predicted_loss": u.predicted_loss,
                    "actual_loss": u.actual_loss,
                    "converged": u.converged,
                }
            )
        lines.append(
            {
                "kind": "result",
                "converged": self.converged,
                "converged_update": self.converged_update,
                "first_suggestion_update": self.first_suggestion_update,
                "total_samples": len(self.samples),
            }
        )
        return "\n".join(json.dumps(line, sort_keys=True) for line in lines) + "\n"

    def timings_jsonl(self) -> str:
        lines = []
        for u in self.updates:
            record = {"update_index": u.update_index}
            record.update({k: u.timings[k] for k in TIMING_FIELDS})
            lines.append(json.dumps(record, sort_keys=True))
        return "\n".join(lines) + "\n" if lines else ""

    def mean_timings(self) -> dict[str, float]:
        if not self.updates:
            return {k: 0.0 for k in TIMING_FIELDS}
        return {
            k: float(np.mean([u.timings[k] for u in self.updates])) for k in TIMING_FIELDS
        }


class LoopAborted(DroploopError):
    """Synthesis or scoring failed mid-run; carries the partial ledger."""

    def __init__(self, message: str, ledger: RunLedger):
        super().__init__(message)
        self.ledger = ledger


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


class _BoArm:
    name = "bo"

    # clouds this tight add no uncertainty bonus over their center, so the
    # EI ranking freezes on the posterior mean and suggestions can repeat
    LOOP_PERTURB_SCALE = 5e-4

    def __init__(self, settings: dict | None):
        settings = settings or {}
        self.jitter = settings.get("jitter", surrogate.DEFAULT_JITTER)
        self.restarts = settings.get("restarts", surrogate.DEFAULT_RESTARTS)
        self.n_candidates = settings.get("n_candidates", surrogate.DEFAULT_CANDIDATES)
        self.perturb_scale = settings.get("perturb_scale", self.LOOP_PERTURB_SCALE)
        # "every": full hyperparameter refit per update (warm-started);
        # "init": search once, then reuse the hyperparameters
        self.refit = settings.get("refit", "every")
        self._hypers: tuple | None = None

    def train(self, samples: list[Sample], space, weights, seg_params, seed: int):
        pairs = [(s.conditions, s.score.combined) for s in samples]
        fixed = self._hypers if (self.refit == "init" and self._hypers) else None
        model = surrogate.fit(
            pairs,
            space,
            jitter=self.jitter,
            restarts=self.restarts,
            seed=seed,
            hyperparams=fixed,
            warm_start=self._hypers,
        )
        self._hypers = (model.lengthscales, model.kernel_variance)
        return model, 0.0

    def suggest(self, model, samples, space, seed: int):
        f_star = min(s.score.combined for s in samples)
        return surrogate.suggest(
            model,
            f_star,
            space,
            n_candidates=self.n_candidates,
            seed=seed,
            perturb_scale=self.perturb_scale,
        )


class _SgdArm:
    name = "sgd"

    def __init__(self, settings: dict | None):
        settings = settings or {}
        self.lambdas = tuple(settings.get("lambdas", ridge_sgd.DEFAULT_LAMBDAS))
        self.k = settings.get("k", 10)
        self.epochs = settings.get("epochs", ridge_sgd.DEFAULT_EPOCHS)
        self.lr = settings.get("lr", ridge_sgd.DEFAULT_LR)
        self.tol = settings.get("tol", ridge_sgd.DEFAULT_TOL)
        self.n_candidates = settings.get("n_candidates", 10_000)
        self._augment_cache: dict[int, tuple] = {}

    def _augmented(self, samples, weights, seg_params) -> tuple[ridge_sgd.AugmentedSet, float]:
        # scoring sub-images is expensive; augment each sample only once
        t0 = time.perf_counter()
        for i, s in enumerate(samples):
            if i not in self._augment_cache:
                batch = ridge_sgd.augment([(s.conditions, s.image)], weights, seg_params)
                self._augment_cache[i] = batch.records
        elapsed = time.perf_counter() - t0
        records = tuple(r for i in range(len(samples)) for r in self._augment_cache[i])
        return ridge_sgd.AugmentedSet(records=records), elapsed

    def train(self, samples, space, weights, seg_params, seed: int):
        data, augment_s = self._augmented(samples, weights, seg_params)
        self._model_data = data
        model = ridge_sgd.cross_validate(
            data,
            space,
            lambdas=self.lambdas,
            k=self.k,
            epochs=self.epochs,
            lr=self.lr,
            seed=seed,
            tol=self.tol,
        )
        return model, augment_s

    def suggest(self, model, samples, space, seed: int):
        return ridge_sgd.sgd_suggest(model, space, n_candidates=self.n_candidates, seed=seed)


def _make_arm(optimizer: str, settings: dict | None):
    if optimizer == "bo":
        return _BoArm(settings)
    if optimizer == "sgd":
        return _SgdArm(settings)
    raise ValueError(f"unknown optimizer {optimizer!r}")


def run(
    optimizer: str,
    backend,
    space: ParameterSpace,
    init: list[Sample] | int,
    weights: LossWeights,
    policy: ConvergencePolicy,
    seed: int,
    seg_params: SegmentationParams | None = None,
    optimizer_settings: dict | None = None,
) -> RunLedger:
    """Run the closed loop until the suggestion stabilizes or the cap hits.

    ``init`` is either pre-scored samples or a count of Latin hypercube
    initialization prints to synthesize first. Raises :class:`LoopAborted`
    with the partial ledger if synthesis or scoring fails mid-run.
    """
    arm = _make_arm(optimizer, optimizer_settings)
    ledger = RunLedger(
        optimizer=optimizer, seed=seed, space=space, weights=weights, policy=policy
    )

    if isinstance(init, int):
        if init < 2:
            raise ValueError("need at least 2 initialization samples")
        conditions = lhs_sample(space, init, seed=_derived_seed(seed, 0))
        for i, cond in enumerate(conditions):
            sample = _synthesize_and_score(
                backend, cond, i, "initialization", 0, weights, seg_params, ledger
            )[0]
            ledger.init_samples.append(sample)
            ledger.samples.append(sample)
    else:
        if len(init) < 2:
            raise ValueError("need at least 2 initialization samples")
        ledger.init_samples.extend(init)
        ledger.samples.extend(init)

    n_init = len(ledger.samples)
    suggestions_unit: list[np.ndarray] = []

    for t in range(1, policy.max_updates + 1):
        t0 = time.perf_counter()
        model, augment_s = arm.train(
            ledger.samples, space, weights, seg_params, seed=_derived_seed(seed, t, 1)
        )
        train_s = time.perf_counter() - t0 - augment_s
        t1 = time.perf_counter()
        # one fixed candidate pool per run: suggestions can then repeat exactly
        # once the surrogate stops moving, which is what convergence tests
        suggestion, predicted = arm.suggest(
            model, ledger.samples, space, seed=_derived_seed(seed, 0, 2)
        )
        predict_s = time.perf_counter() - t1
        ledger.models[t] = model

        if not space.contains(suggestion.as_array(), atol=1e-12):
            raise LoopAborted(f"suggestion {suggestion} left the parameter box", ledger)

        sample, timings = _synthesize_and_score(
            backend, suggestion, n_init + t - 1, "suggested", t, weights, seg_params, ledger
        )
        ledger.samples.append(sample)
        timings["train_s"] = train_s
        timings["predict_s"] = predict_s
        timings["score_s"] += augment_s

        suggestions_unit.append(space.normalize(suggestion.as_array()))
        converged = _stabilized(suggestions_unit, policy)
        ledger.updates.append(
            UpdateRecord(
                update_index=t,
                optimizer=optimizer,
                suggestion=suggestion,
                predicted_loss=predicted,
                actual_loss=sample.score.combined,
                timings=timings,
                converged=converged,
            )
        )
        if converged:
            ledger.converged = True
            ledger.converged_update = t
            ledger.first_suggestion_update = _first_occurrence(
                suggestions_unit, policy.tol
            )
            break
    return ledger


def _synthesize_and_score(
    backend, cond, print_index, origin, update_index, weights, seg_params, ledger
):
    timings = {k: 0.0 for k in TIMING_FIELDS}
    try:
        raster, hw = backend.synthesize(cond, print_index)
    except DroploopError as exc:
        raise LoopAborted(f"synthesis failed: {exc}", ledger) from exc
    for key in ("setup_s", "print_s", "image_s", "read_s"):
        timings[key] = float(hw.get(key, 0.0))
    t0 = time.perf_counter()
    try:
        score = score_image(raster, seg_params, weights)
    except Exception as exc:
        raise LoopAborted(f"scoring failed: {exc}", ledger) from exc
    timings["score_s"] = time.perf_counter() - t0
    sample = Sample(
        conditions=cond, image=raster, score=score, origin=origin, update_index=update_index
    )
    return sample, timings


def _stabilized(suggestions_unit: list[np.ndarray], policy: ConvergencePolicy) -> bool:
    if len(suggestions_unit) < policy.repeats:
        return False
    window = np.vstack(suggestions_unit[-policy.repeats :])
    spread = window.max(axis=0) - window.min(axis=0)
    return bool(np.all(spread <= policy.tol))


def _first_occurrence(suggestions_unit: list[np.ndarray], tol: float) -> int:
    final = suggestions_unit[-1]
    for i, s in enumerate(suggestions_unit):
        if np.all(np.abs(s - final) <= tol):
            return i + 1
    return len(suggestions_unit)


def prediction_rmse(ledger: RunLedger, final_only: bool = False) -> float:
    """Root-mean-square gap between predicted and actual loss over updates."""
    if not ledger.updates:
        raise ValueError("ledger has no updates")
    updates = ledger.updates[-1:] if final_only else ledger.updates
    errors = np.array([u.predicted_loss - u.actual_loss for u in updates])
    return float(np.sqrt(np.mean(errors * errors)))


def loss_delta_field(
    ledger: RunLedger,
    update_a: int,
    update_b: int,
    axis_a: int = 0,
    axis_b: int = 1,
    grid: tuple[int, int, int] = (30, 30, 30),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """|predicted-loss surface at update_b - at update_a| on a 2-D slice.

    Each archived model is evaluated on the full 3-D grid; the absolute
    difference is max-projected over the axis not shown. Returns
    (grid_a_raw, grid_b_raw, field).
    """
    for u in (update_a, update_b):
        if u not in ledger.models:
            raise MissingStateError(f"no archived model for update {u}")
    axes = tuple(np.linspace(0.0, 1.0, g) for g in grid)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    surfaces = []
    for u in (update_a, update_b):
        model = ledger.models[u]
        pred = model.predict_unit(mesh)
        if isinstance(pred, tuple):
            pred = pred[0]
        surfaces.append(np.asarray(pred).reshape(grid))
    delta = np.abs(surfaces[1] - surfaces[0])
    other = ({0, 1, 2} - {axis_a, axis_b}).pop()
    field_2d = delta.max(axis=other)
    if axis_a > axis_b:
        field_2d = field_2d.T
    lo_a, hi_a = ledger.space.dims[axis_a].low, ledger.space.dims[axis_a].high
    lo_b, hi_b = ledger.space.dims[axis_b].low, ledger.space.dims[axis_b].high
    return (
        lo_a + axes[axis_a] * (hi_a - lo_a),
        lo_b + axes[axis_b] * (hi_b - lo_b),
        field_2d,
    )
