"""droploop: closed-loop preconditioning of inkjet printing conditions.

A vision-scored droplet simulator (or real hardware behind a file-drop
protocol) is driven by a Gaussian-process surrogate with expected
improvement, benchmarked against a cross-validated ridge-SGD baseline.
"""

from .errors import (
    BoundsError,
    ConditioningError,
    ConfigError,
    DivergenceError,
    DroploopError,
    ImageFormatError,
    MissingStateError,
    SynthesisTimeoutError,
    WeightError,
)
from .loop import ConvergencePolicy, LoopAborted, RunLedger, Sample, prediction_rmse, run
from .printer import (
    Raster,
    ReplayPrinter,
    SimPrinterConfig,
    SimulatedPrinter,
    load_png,
    replay_print,
    save_png,
    simulate_print,
)
from .ridge_sgd import AugmentedSet, RidgeModel, augment, cross_validate, sgd_fit, sgd_suggest
from .sampling import Dimension, ParameterSpace, PrintConditions, lhs_sample, uniform_candidates
from .surrogate import (
    AcquisitionField,
    GpModel,
    acquisition_field,
    expected_improvement,
    fit,
    matern52,
    predict,
    suggest,
)
from .vision import (
    LabeledSegmentation,
    LossScore,
    LossWeights,
    SegmentationParams,
    combined_loss,
    geometric_loss,
    score_image,
    segment,
    yield_loss,
)

__version__ = "0.1.0"
