"""Local Lipschitz robustness toolkit for small numpy networks."""

from .tensor import Tape, Tensor, finite_diff_check, forward_backward
from .netfun import LayerSpec, NetworkFunction, build_network, forward_trace, predict
from .training import TrainConfig, TrainLog, train
from .checkpoint import load_checkpoint, save_checkpoint
from .datascope import LabeledDataset, load_cifar10, synth_blobs
from .robustometry import RobustnessQuery, alpha_r_curve, estimate_alpha_lim, r_lim

__all__ = [
    "Tape", "Tensor", "finite_diff_check", "forward_backward",
    "LayerSpec", "NetworkFunction", "build_network", "forward_trace", "predict",
    "TrainConfig", "TrainLog", "train", "load_checkpoint", "save_checkpoint",
    "LabeledDataset", "load_cifar10", "synth_blobs",
    "RobustnessQuery", "alpha_r_curve", "estimate_alpha_lim", "r_lim",
]
__version__ = "0.1.0"
