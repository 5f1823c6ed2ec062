"""Experiment orchestration: configs, runners and the command line."""

from .config import ExperimentConfig, load_config, parse_config
from .experiments import NoiseSweepResult, add_snr_noise, layer_histogram, noise_sweep, run_experiment

__all__ = ["ExperimentConfig", "load_config", "parse_config", "NoiseSweepResult", "add_snr_noise",
           "layer_histogram", "noise_sweep", "run_experiment"]
