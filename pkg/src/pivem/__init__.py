"""Continuous-time latent distance models with piecewise-linear trajectories."""

from .graph import (EventFileError, EventGraph, LabeledInstanceSet, SplitResult,
                    build_instances, load_events, normalize_time, save_events, split)
from .model import (BinCoefficients, ModelState, check_bounds, integrate_intensity,
                    integrate_intervals, intensity, load_checkpoint, log_likelihood,
                    log_likelihood_grad, position, positions, precompute_coefficients,
                    save_checkpoint)
from .prior import PriorState, capacitance, log_prior, log_prior_grad, sample_prior
from .train import AnnealReport, TrainConfig, fit

__version__ = "0.1.0"
