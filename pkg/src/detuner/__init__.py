"""Recover pre-fine-tuning weights from a set of merged LoRA fine-tunes."""
from .engine import (LayerGroup, RecoveryConfig, RecoveryTrace, initialize, loss, m_step,
                     recover_layer, w_step)
from .linalg import SvdTriplet, best_rank_r, numerical_rank, svd_truncated
from .metrics import (BenchmarkReport, LayerError, convergence_histogram,
                      loss_error_correlation, w_error)
from .ranks import (RankEstimate, detect_finetuned_layers, detect_foreign_models,
                    estimate_ranks, pairwise_ranks)
from .scheduler import RankScheduler, SchedulerConfig, SchedulerState, scheduler_step
from .synth import (SyntheticSpec, baseline_mean_lora, baseline_single_lora, generate,
                    run_subset_protocol)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkReport", "LayerError", "LayerGroup", "RankEstimate", "RankScheduler",
    "RecoveryConfig", "RecoveryTrace", "SchedulerConfig", "SchedulerState", "SvdTriplet",
    "SyntheticSpec", "baseline_mean_lora", "baseline_single_lora", "best_rank_r",
    "convergence_histogram", "detect_finetuned_layers", "detect_foreign_models",
    "estimate_ranks", "generate", "initialize", "loss", "loss_error_correlation", "m_step",
    "numerical_rank", "pairwise_ranks", "recover_layer", "run_subset_protocol",
    "scheduler_step", "svd_truncated", "w_error", "w_step",
]
