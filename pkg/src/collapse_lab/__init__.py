"""Mean-field two-layer networks, Langevin training and neural-collapse diagnostics."""

from .data import Dataset, SeparabilitySpec, gen_separable, load_csv, sample_separable, validate_assumptions
from .metrics import balancedness, entropy_knn, kl_to_standard_gaussian, nc1, stationarity_residual
from .model import ActivationKind, LinearHead, ParticleCloud, Truncation, features, predict
from .structured_solver import KronSystem, jacobi_eigh, kron_dense_solve, kron_solve
from .training import HyperParams, TrainState, gradients, init_state, langevin_step, run_flow, two_stage

__version__ = "0.1.0"

__all__ = [
    "ActivationKind", "Dataset", "HyperParams", "KronSystem", "LinearHead", "ParticleCloud",
    "SeparabilitySpec", "TrainState", "Truncation", "balancedness", "entropy_knn", "features",
    "gen_separable", "gradients", "init_state", "jacobi_eigh", "kl_to_standard_gaussian",
    "kron_dense_solve", "kron_solve", "langevin_step", "load_csv", "nc1", "predict", "run_flow",
    "sample_separable", "stationarity_residual", "two_stage", "validate_assumptions",
]
