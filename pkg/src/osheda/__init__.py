"""Open-set heterogeneous domain adaptation by representation learning.

Two per-domain representation networks and a shared classifier with an
explicit unknown class, trained with a four-term objective and two-stage
pseudo-labeling. Also ships the SL/PL baselines, open-set metrics, a
synthetic benchmark generator and a numerical audit of the target-error
bounds.
"""

from .data import FeatureDataset, LabelSpace, SyntheticConfig, estimate_lambda, generate_synthetic, load_csv, save_csv
from .errors import (
    InvalidBatchError,
    InvalidConfigError,
    InvalidInputError,
    NumericError,
    OshedaError,
    ParseError,
    ShapeError,
    StateError,
    UnsupportedInputError,
)
from .losses import LossBreakdown, Toggles, total_loss
from .metrics import EvalReport, aggregate, evaluate, friedman_nemenyi, open_set_scores
from .pseudo import pseudo_label, predict
from .trainer import TrainConfig, TrainedModel, run_ablation_grid, train, train_pl, train_rl_osheda, train_sl

__version__ = "0.1.0"
