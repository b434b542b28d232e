"""Federated learning simulator with adaptive per-client local step counts (FedVeca),
FedAvg/FedNova baselines and a centralized SGD reference."""

from .baselines import BudgetLedger, budget_tau, compare, run_centralized, run_experiment, run_federated
from .config import ConfigError, ExperimentConfig, parse_config
from .data import Dataset, gen_synthetic, partition, read_idx, sample_minibatch
from .fed_core import ClientReport, RoundPlan, aggregate_fedavg, aggregate_fednova, weights
from .model import ModelSpec
from .numerics import RngStream
from .server import compute_A, predict_tau

__version__ = "0.1.0"
