from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-3


@dataclass(frozen=True)
class Normalizer:
    """Per-channel affine maps for actions (2 channels) and states (4 channels)."""

    action_mean: np.ndarray
    action_std: np.ndarray
    state_mean: np.ndarray
    state_std: np.ndarray

    def __post_init__(self) -> None:
        for name in ("action_std", "state_std"):
            if not np.all(np.asarray(getattr(self, name)) > 1e-6):
                raise ValueError(f"{name} must exceed 1e-6 in every channel")

    @classmethod
    def fit(cls, actions: np.ndarray, states: np.ndarray) -> "Normalizer":
        a = np.asarray(actions, float).reshape(-1, 2)
        s = np.asarray(states, float).reshape(-1, 4)
        return cls(a.mean(0), np.maximum(a.std(0), STD_FLOOR), s.mean(0), np.maximum(s.std(0), STD_FLOOR))

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(np.zeros(2), np.ones(2), np.zeros(4), np.ones(4))

    def norm_actions(self, a):
        return (a - self.action_mean) / self.action_std

    def denorm_actions(self, a):
        return a * self.action_std + self.action_mean

    def norm_states(self, s):
        return (s - self.state_mean) / self.state_std

    def denorm_states(self, s):
        return s * self.state_std + self.state_mean

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("action_mean", "action_std", "state_mean", "state_std")}

    @classmethod
    def from_json(cls, obj: dict) -> "Normalizer":
        return cls(*(np.asarray(obj[k], float) for k in ("action_mean", "action_std", "state_mean", "state_std")))
