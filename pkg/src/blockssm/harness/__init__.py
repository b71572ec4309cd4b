"""Experiment orchestration: training, evaluation, ablations and grids."""
from .config import ExperimentConfig, ablate, preset_config, unconstrained_baseline
from .experiments import AblationPlan, export_eigenvalues, grid_search, run_ablation
from .training import RunResult, open_loop_eval, train

__all__ = ["ExperimentConfig", "ablate", "preset_config", "unconstrained_baseline", "AblationPlan",
           "export_eigenvalues", "grid_search", "run_ablation", "RunResult", "open_loop_eval", "train"]
