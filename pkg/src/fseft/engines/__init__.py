"""Training loops, inference, post-processing, metrics and the benchmark runner."""

from .inference import binarize_and_largest_cc, dice_score, sliding_window_predict, tile_origins
from .training import (
    AdaptConfig,
    AdaptResult,
    Checkpoint,
    FeatureCache,
    PretrainConfig,
    adapt,
    adapt_sweep,
    lr_at,
    masked_eval_loss,
    predict_query,
    pretrain,
)
from .benchmark import BenchmarkConfig, EvalResult, evaluate_task, run_benchmark, run_cell
