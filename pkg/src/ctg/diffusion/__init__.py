"""Conditional diffusion over action trajectories with states tied to them by rollout."""
from .context import ContextBatch, SceneContext
from .model import CheckpointError, DiffusionModel
from .network import ArchConfig, NonFiniteError
from .normalizer import Normalizer
from .sampler import SampleResult, add_noise, initial_noise, reverse_step, sample, unguided_mean
from .schedule import VarianceSchedule, forward_corrupt, make_cosine_schedule, posterior_coefficients, posterior_mean
from .train import TrainConfig, TrainingData, TrainingError, TrainState, init_training, load_training, loss_terms, save_training, train

__all__ = [name for name in dir() if not name.startswith("_")]
