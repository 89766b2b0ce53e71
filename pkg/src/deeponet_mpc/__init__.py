"""Multi-step DeepONet predictors and model predictive control for sampled nonlinear plants."""

from .datagen import (MsDataset, Normalizer, StdDataset, build_ms_dataset, build_standard_dataset,
                      fit_normalizer, generate_open_loop, generate_swingup_dataset, hankel,
                      load_dataset, save_dataset, split_dataset)
from .dynamics import IntegratorConfig, SystemSpec, Trajectory, make_system, simulate_zoh
from .mpc import MpcProblemSpec, ame, build_cost, run_closed_loop, solve_mpc
from .operator_models import (MsDeepONet, StandardDeepONet, conditioned_theta, extract_basis,
                              load_model, ms_forward, save_model, std_forward)
from .training import HyperConfig, ablate, train_model

__version__ = "0.1.0"

__all__ = [
    "MsDataset", "Normalizer", "StdDataset", "build_ms_dataset", "build_standard_dataset",
    "fit_normalizer", "generate_open_loop", "generate_swingup_dataset", "hankel", "load_dataset",
    "save_dataset", "split_dataset", "IntegratorConfig", "SystemSpec", "Trajectory", "make_system",
    "simulate_zoh", "MpcProblemSpec", "ame", "build_cost", "run_closed_loop", "solve_mpc",
    "MsDeepONet", "StandardDeepONet", "conditioned_theta", "extract_basis", "load_model",
    "ms_forward", "save_model", "std_forward", "HyperConfig", "ablate", "train_model",
]
