"""Desk-scale deep equilibrium models with white-box attacks and defenses."""

from .attacks import AttackConfig, AttackReport, pgd_attack, evaluate_robustness
from .datasets import Dataset, gen_synthetic, load_idx
from .estimator import DeqClassifier
from .experiment import ExperimentConfig, run_experiment
from .defenses import DefenseStrategy, calibrate_early_exit, defended_state
from .gradients import (
    AdjointTrace,
    BackwardConfig,
    GradientSource,
    exact_input_grad,
    exact_param_grad,
    phantom_grads,
    simultaneous_adjoint,
    unrolled_intermediate_grad,
)
from .model import LayerParams, ModelDims, ParamGrad, init_params, load_checkpoint, save_checkpoint
from .solver import ForwardTrace, SolverConfig, SolverDivergence, solve, solve_broyden, solve_picard
from .training import AdamConfig, TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackReport",
    "pgd_attack",
    "evaluate_robustness",
    "Dataset",
    "gen_synthetic",
    "load_idx",
    "DeqClassifier",
    "ExperimentConfig",
    "run_experiment",
    "DefenseStrategy",
    "calibrate_early_exit",
    "defended_state",
    "AdjointTrace",
    "BackwardConfig",
    "GradientSource",
    "exact_input_grad",
    "exact_param_grad",
    "phantom_grads",
    "simultaneous_adjoint",
    "unrolled_intermediate_grad",
    "LayerParams",
    "ModelDims",
    "ParamGrad",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "ForwardTrace",
    "SolverConfig",
    "SolverDivergence",
    "solve",
    "solve_broyden",
    "solve_picard",
    "AdamConfig",
    "TrainConfig",
    "TrainLog",
    "train",
    "__version__",
]
