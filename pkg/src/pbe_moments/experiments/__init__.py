"""Configuration, runner and command line for the three experiments."""
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .runner import RunFailure, RunReport, reference_run, relative_l2_error, run, sweep_orders

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunFailure",
    "RunReport",
    "load_config",
    "reference_run",
    "relative_l2_error",
    "run",
    "save_config",
    "sweep_orders",
]
