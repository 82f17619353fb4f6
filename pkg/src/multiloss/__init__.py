"""Shared-trunk multi-head classifiers where every head trains with a different loss.

The averaged head prediction gives the class; disagreement between heads gives
an epistemic uncertainty signal. Baselines (deep sub-ensembles, deep ensembles,
MC-dropout, SWA) share the same training and evaluation plumbing.
"""

from .data import (
    CountMismatchError, DataFormatError, Dataset, LabelRangeError, MagicNumberError, TruncatedFileError,
    gen_gaussian_blobs, load_cifar10_binary, load_idx, subsample, write_cifar10_binary, write_idx,
)
from .experiment import ConfigError, ExperimentConfig, RunRecord, compare, heads_sweep, run
from .losses import DeterminantFloorWarning, LossError, LossKind, head_probs, loss_value
from .metrics import EvaluationReport, brier, class_variance, ece, entropy_of_average, evaluate, mean_entropy
from .model import ModelSpec, MultiHeadModel, PredictionSet, build
from .nn import Mode
from .plots import Series, emit_plots
from .strategies import TrainConfig, TrainedPredictor, swa_average, train_strategy

__version__ = "0.1.0"
