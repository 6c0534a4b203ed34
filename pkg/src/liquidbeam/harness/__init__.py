"""Training, evaluation, sweeps and the command line."""
from .config import PRESETS, ConfigError, RunConfig, parse_config
from .evaluate import EvalReport, evaluate, score_beams
from .sweep import AXES, MissingCheckpointError, run_sweep
from .train import TrainResult, train

__all__ = ["PRESETS", "ConfigError", "RunConfig", "parse_config", "EvalReport", "evaluate",
           "score_beams", "AXES", "MissingCheckpointError", "run_sweep", "TrainResult", "train"]
