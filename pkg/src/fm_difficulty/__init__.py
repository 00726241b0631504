"""Personalized level-difficulty prediction with factorization machines."""

from .dataset import Dataset, InteractionRecord, Split, SplitSpec, load_interactions, split_players, truncate_attempts
from .evaluation import SweepSpec, mae, rmse, run_sweep
from .fm import FmModel, predict, predict_batch, predict_clamped
from .synth import SynthConfig, generate
from .trainer import McmcConfig, train_predict

__version__ = "0.1.0"
