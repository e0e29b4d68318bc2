"""Two-node DC microgrid case study: model, noise design, experiments, figures."""

from .experiment import ExperimentConfig, batch_means_ztest, run_tracking_experiment
from .model import (
    MicrogridParams,
    build_microgrid,
    discretized_microgrid,
    two_node_params,
    reference_exosystem,
)
from .noise import NoiseDesign, gramian_noise_design

__all__ = [
    "ExperimentConfig",
    "MicrogridParams",
    "NoiseDesign",
    "batch_means_ztest",
    "build_microgrid",
    "discretized_microgrid",
    "gramian_noise_design",
    "two_node_params",
    "reference_exosystem",
    "run_tracking_experiment",
]
