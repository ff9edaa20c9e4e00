"""Unguided reverse diffusion over normalized action sequences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from ..dynamics import rollout
from .context import ContextBatch
from .model import DiffusionModel
from .schedule import VarianceSchedule, posterior_mean


@dataclass
class SampleResult:
    """Clean sample in the agents' own frames: physical actions/states plus the normalized actions."""

    actions: np.ndarray  # (B, T, 2)
    states: np.ndarray  # (B, T, 4)
    actions_norm: np.ndarray
    s0: np.ndarray


# hook(k, actions_norm, states) fires for every intermediate trajectory tau^{k-1}
StepHook = Callable[[int, np.ndarray, np.ndarray], None]


def add_noise(mu: np.ndarray, k: int, sched: VarianceSchedule, rng: np.random.Generator) -> np.ndarray:
    """Sample N(mu, beta_k I); the final step (k = 1) returns the mean itself."""
    if k == 1:
        return mu
    return mu + np.sqrt(sched.beta(k)) * rng.standard_normal(mu.shape)


def unguided_mean(model: DiffusionModel, xk: np.ndarray, k: int, feat: torch.Tensor, s0: np.ndarray) -> np.ndarray:
    x0_hat = model.denoise_predict(xk, k, feat, s0)
    return posterior_mean(x0_hat, xk, k, model.schedule)


def reverse_step(model, xk, k, feat, s0, rng) -> tuple[np.ndarray, np.ndarray]:
    """One reverse transition; returns (normalized actions, states) of tau^{k-1}."""
    if not 1 <= k <= model.schedule.K:
        raise ValueError(f"diffusion step k={k} outside 1..{model.schedule.K}")
    x = add_noise(unguided_mean(model, xk, k, feat, s0), k, model.schedule, rng)
    return x, rollout(s0, model.normalizer.denorm_actions(x), model.dt)


def initial_noise(model: DiffusionModel, B: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((B, model.arch.T, 2))


def sample(
    model: DiffusionModel,
    ctx: ContextBatch,
    s0: np.ndarray,
    rng: np.random.Generator,
    hook: Optional[StepHook] = None,
) -> SampleResult:
    """Draw one trajectory per context by running all K reverse steps."""
    s0 = np.asarray(s0, float)
    feat = model.encode_context(ctx)
    x = initial_noise(model, len(ctx), rng)
    for k in range(model.schedule.K, 0, -1):
        x, states = reverse_step(model, x, k, feat, s0, rng)
        if hook is not None:
            hook(k, x, states)
    actions = model.normalizer.denorm_actions(x)
    return SampleResult(actions, rollout(s0, actions, model.dt), x, s0)
