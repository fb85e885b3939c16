"""Training, evaluation and ablation plumbing."""
from .config import PRESETS, AblationConfig, RunConfig, TrainConfig, config_hash
from .evaluation import PredictionBundle, evaluate, predict, write_report
from .grid import GridResult, run_ablation_grid
from .priors import load_prior_segmenter, train_prior
from .training import CheckpointManifest, fit, load_run, lr_at, train

__all__ = [
    "PRESETS", "AblationConfig", "RunConfig", "TrainConfig", "config_hash",
    "PredictionBundle", "evaluate", "predict", "write_report",
    "GridResult", "run_ablation_grid", "load_prior_segmenter", "train_prior",
    "CheckpointManifest", "fit", "load_run", "lr_at", "train",
]
