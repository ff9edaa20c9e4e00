"""Training data container and the x0-parameterized denoising objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..dynamics import DT, rollout_torch
from . import container
from .context import ContextBatch
from .model import DiffusionModel
from .network import ArchConfig, NonFiniteError
from .normalizer import Normalizer

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingData:
    """Examples in the target agent's frame: context, start state, future actions and states."""

    context: ContextBatch
    s0: np.ndarray  # (N, 4)
    actions: np.ndarray  # (N, T, 2)
    states: np.ndarray  # (N, T, 4)

    def __len__(self) -> int:
        return self.s0.shape[0]

    def take(self, idx) -> "TrainingData":
        return TrainingData(self.context.take(idx), self.s0[idx], self.actions[idx], self.states[idx])

    @classmethod
    def concat(cls, parts) -> "TrainingData":
        parts = list(parts)
        return cls(
            ContextBatch(*(np.concatenate([getattr(p.context, f) for p in parts]) for f in ("raster", "past", "mask"))),
            np.concatenate([p.s0 for p in parts]),
            np.concatenate([p.actions for p in parts]),
            np.concatenate([p.states for p in parts]),
        )

    def save_shards(self, directory, shard_size: int = 1024, dt: float = DT) -> list[Path]:
        directory = Path(directory)
        paths = []
        n = len(self)
        n_shards = max(1, -(-n // shard_size))
        for s in range(n_shards):
            idx = np.arange(s * shard_size, min((s + 1) * shard_size, n))
            part = self.take(idx)
            header = {"format": "ctg-dataset", "records": int(idx.size), "shard": s, "shards": n_shards, "dt": dt}
            tensors = {
                "raster": part.context.raster,
                "past": part.context.past,
                "mask": part.context.mask,
                "s0": part.s0,
                "actions": part.actions,
                "states": part.states,
            }
            path = directory / f"shard_{s:04d}.ctgd"
            container.save(path, header, tensors)
            paths.append(path)
        return paths

    @classmethod
    def load_shards(cls, directory) -> "TrainingData":
        paths = sorted(Path(directory).glob("shard_*.ctgd"))
        if not paths:
            raise FileNotFoundError(f"no dataset shards in {directory}")
        parts = []
        for p in paths:
            header, t = container.load(p)
            if header.get("format") != "ctg-dataset":
                raise ValueError(f"{p} is not a dataset shard")
            parts.append(
                cls(ContextBatch(t["raster"], t["past"], t["mask"]), t["s0"].astype(float),
                    t["actions"].astype(float), t["states"].astype(float))
            )
        return cls.concat(parts)


@dataclass
class TrainConfig:
    steps: int = 20000
    batch: int = 64
    lr: float = 1e-3
    lambda_s: float = 1.0
    seed: int = 0
    K: int = 100
    ckpt_every: int = 0  # 0 disables periodic checkpoints
    log_every: int = 100
    arch: ArchConfig = field(default_factory=ArchConfig)


@dataclass
class TrainState:
    model: DiffusionModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)  # (step, loss, action loss, state loss)


def loss_terms(model: DiffusionModel, batch: TrainingData, k: np.ndarray, eps: np.ndarray, lambda_s: float):
    """Denoising loss on one batch with given diffusion steps and noise; returns (total, action, state)."""
    dtype = model.dtype
    nz = model.normalizer
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
    x0 = t(nz.norm_actions(batch.actions))
    ab = t(model.schedule.alpha_bar[k])[:, None, None]
    xk = ab.sqrt() * x0 + (1 - ab).sqrt() * t(eps)
    s0 = t(batch.s0)
    a_std, a_mean = t(nz.action_std), t(nz.action_mean)
    s_std, s_mean = t(nz.state_std), t(nz.state_mean)
    with torch.no_grad():
        sk = rollout_torch(s0, xk * a_std + a_mean, model.dt)
    inp = torch.cat([xk, (sk - s_mean) / s_std], dim=-1)
    ctx = batch.context
    feat = model.net.encode(t(ctx.raster), t(ctx.past), t(ctx.mask))
    x0_hat = model.net(inp, t(k), feat)
    loss_a = ((x0_hat - x0) ** 2).mean()
    s_hat = rollout_torch(s0, x0_hat * a_std + a_mean, model.dt)
    loss_s = ((((s_hat - s_mean) / s_std) - ((t(batch.states) - s_mean) / s_std)) ** 2).mean()
    return loss_a + lambda_s * loss_s, loss_a, loss_s


def init_training(data: TrainingData, cfg: TrainConfig, model: Optional[DiffusionModel] = None) -> TrainState:
    if len(data) == 0:
        raise TrainingError("empty dataset")
    if model is None:
        nz = Normalizer.fit(data.actions, data.states)
        model = DiffusionModel.create(cfg.arch, nz, cfg.K, seed=cfg.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr)
    return TrainState(model, opt)


def train(
    data: TrainingData,
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    checkpoint: Optional[Path] = None,
    on_log: Optional[Callable[[int, float], None]] = None,
) -> TrainState:
    """Run ``cfg.steps`` optimizer steps (continuing from ``state.step`` when resuming)."""
    state = state or init_training(data, cfg)
    model = state.model
    model.net.train()
    rng = np.random.default_rng([cfg.seed, state.step])
    n = len(data)
    target = state.step + cfg.steps
    while state.step < target:
        idx = rng.integers(0, n, size=cfg.batch)
        k = rng.integers(1, model.schedule.K + 1, size=cfg.batch)
        batch = data.take(idx)
        eps = rng.standard_normal(batch.actions.shape)
        try:
            loss, la, ls = loss_terms(model, batch, k, eps, cfg.lambda_s)
        except NonFiniteError as e:
            raise TrainingError(f"non-finite loss at step {state.step}: {e}") from e
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {state.step}: action term {la.item()}, state term {ls.item()}, "
                f"diffusion steps {sorted(set(k.tolist()))[:8]}"
            )
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.step += 1
        state.history.append((state.step, loss.item(), la.item(), ls.item()))
        if on_log and (state.step % max(cfg.log_every, 1) == 0 or state.step == target):
            on_log(state.step, loss.item())
        if checkpoint is not None and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
            save_training(state, checkpoint)
    model.net.eval()
    return state


def save_training(state: TrainState, path) -> None:
    """Checkpoint with optimizer moments so training can resume exactly where it stopped."""
    model = state.model
    model.meta = {**model.meta, "step": state.step}
    extra = {}
    names = {id(p): n for n, p in model.net.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if st:
                extra[f"opt.{names[id(p)]}.m"] = st["exp_avg"].detach().numpy()
                extra[f"opt.{names[id(p)]}.v"] = st["exp_avg_sq"].detach().numpy()
    model.save(path, extra)


def load_training(path, cfg: TrainConfig) -> TrainState:
    header, tensors = container.load(path)
    model = DiffusionModel.from_parts(header, tensors, cfg.arch)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr)
    step = int(model.meta.get("step", 0))
    for n, p in model.net.named_parameters():
        if f"opt.{n}.m" in tensors:
            opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(tensors[f"opt.{n}.m"]),
                "exp_avg_sq": torch.from_numpy(tensors[f"opt.{n}.v"]),
            }
    return TrainState(model, opt, step)
