"""Trained denoiser bundle: network weights, normalizer, schedule, checkpoint I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ..dynamics import DT, rollout
from . import container
from .context import ContextBatch
from .network import ArchConfig, Denoiser, build_network
from .normalizer import Normalizer
from .schedule import VarianceSchedule, make_cosine_schedule

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class DiffusionModel:
    arch: ArchConfig
    net: Denoiser
    normalizer: Normalizer
    schedule: VarianceSchedule
    dt: float = DT
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, arch: ArchConfig, normalizer: Normalizer, K: int = 100, seed: int = 0, dtype=torch.float32):
        return cls(arch, build_network(arch, seed, dtype), normalizer, make_cosine_schedule(K))

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def _t(self, a) -> torch.Tensor:
        return torch.as_tensor(np.asarray(a), dtype=self.dtype)

    # -------------------------------------------------------------- inference
    @torch.inference_mode()
    def encode_context(self, ctx: ContextBatch) -> torch.Tensor:
        if self.net.training:
            self.net.eval()
        return self.net.encode(self._t(ctx.raster), self._t(ctx.past), self._t(ctx.mask))

    def model_input(self, xk: np.ndarray, s0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stack normalized actions with the normalized states they produce; also return raw states."""
        states = rollout(s0, self.normalizer.denorm_actions(xk), self.dt)
        return np.concatenate([xk, self.normalizer.norm_states(states)], axis=-1), states

    @torch.inference_mode()
    def denoise_predict(self, xk: np.ndarray, k: int, feat: torch.Tensor, s0: np.ndarray) -> np.ndarray:
        """Predicted clean normalized actions (B, T, 2) from noisy normalized actions xk."""
        if self.net.training:
            self.net.eval()
        inp, _ = self.model_input(xk, s0)
        kk = torch.full((inp.shape[0],), float(k), dtype=self.dtype)
        out = self.net(self._t(inp), kk, feat)
        return out.double().numpy()

    # -------------------------------------------------------------- checkpoint
    def state_tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}

    def header(self) -> dict:
        return {
            "format": "ctg-checkpoint",
            "version": FORMAT_VERSION,
            "architecture": self.arch.to_json(),
            "schedule": self.schedule.to_json(),
            "normalizer": self.normalizer.to_json(),
            "dt": self.dt,
            "meta": self.meta,
        }

    def save(self, path, extra_tensors: Optional[dict] = None) -> None:
        tensors = {f"net.{k}": v for k, v in self.state_tensors().items()}
        tensors.update(extra_tensors or {})
        container.save(path, self.header(), tensors)

    @classmethod
    def load(cls, path, arch: Optional[ArchConfig] = None) -> "DiffusionModel":
        header, tensors = container.load(path)
        return cls.from_parts(header, tensors, arch)

    @classmethod
    def from_parts(cls, header: dict, tensors: dict, arch: Optional[ArchConfig] = None) -> "DiffusionModel":
        if header.get("format") != "ctg-checkpoint":
            raise CheckpointError("file is not a model checkpoint")
        saved = ArchConfig.from_json(header["architecture"])
        if arch is not None and arch != saved:
            raise CheckpointError(f"architecture mismatch: checkpoint has {saved}, expected {arch}")
        net = build_network(saved)
        state = {k[4:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("net.")}
        expect = net.state_dict()
        if set(state) != set(expect):
            raise CheckpointError(f"tensor names do not match the architecture: {sorted(set(state) ^ set(expect))[:5]}")
        for name, t in state.items():
            if tuple(t.shape) != tuple(expect[name].shape):
                raise CheckpointError(f"tensor {name}: shape {tuple(t.shape)} != {tuple(expect[name].shape)}")
            if not torch.isfinite(t).all():
                raise CheckpointError(f"tensor {name} has non-finite values")
        net.load_state_dict(state)
        return cls(
            saved,
            net,
            Normalizer.from_json(header["normalizer"]),
            VarianceSchedule.from_json(header["schedule"]),
            float(header.get("dt", DT)),
            dict(header.get("meta", {})),
        )
