from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SceneContext:
    """Conditioning input for one agent, all in that agent's frame.

    raster: (C, S, S) map crop (drivable flag, lane-direction cos, sin).
    past: (M + 1, H + 1, 4) past states; index 0 is the target agent, time runs
    oldest to current.
    mask: (M + 1,) neighbour presence; absent slots are zero-filled.
    """

    raster: np.ndarray
    past: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.raster = np.asarray(self.raster, np.float32)
        self.past = np.asarray(self.past, np.float32)
        self.mask = np.asarray(self.mask, np.float32)
        if self.mask.shape != self.past.shape[:1]:
            raise ValueError(f"mask {self.mask.shape} does not match past {self.past.shape}")
        if self.mask[0] != 1.0:
            raise ValueError("the target agent (slot 0) must be present")


@dataclass
class ContextBatch:
    raster: np.ndarray  # (B, C, S, S)
    past: np.ndarray  # (B, M + 1, H + 1, 4)
    mask: np.ndarray  # (B, M + 1)

    @classmethod
    def stack(cls, contexts) -> "ContextBatch":
        contexts = list(contexts)
        return cls(
            np.stack([c.raster for c in contexts]),
            np.stack([c.past for c in contexts]),
            np.stack([c.mask for c in contexts]),
        )

    def __len__(self) -> int:
        return self.raster.shape[0]

    def take(self, idx) -> "ContextBatch":
        return ContextBatch(self.raster[idx], self.past[idx], self.mask[idx])

    def repeat(self, n: int) -> "ContextBatch":
        """Each context repeated ``n`` times consecutively (sample-major within agent)."""
        return ContextBatch(*(np.repeat(a, n, axis=0) for a in (self.raster, self.past, self.mask)))
