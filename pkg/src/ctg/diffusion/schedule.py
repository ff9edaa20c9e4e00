"""Cosine variance schedule, forward corruption and the clean-sample posterior."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_MAX = 0.999


@dataclass(frozen=True)
class VarianceSchedule:
    """``betas[k - 1]`` is beta_k for k = 1..K; ``alpha_bar[k]`` is the product up to k (alpha_bar[0] = 1)."""

    K: int
    betas: np.ndarray
    alpha_bar: np.ndarray

    def beta(self, k: int) -> float:
        self._check(k)
        return float(self.betas[k - 1])

    def abar(self, k: int) -> float:
        if not 0 <= k <= self.K:
            raise ValueError(f"k={k} outside 0..{self.K}")
        return float(self.alpha_bar[k])

    def _check(self, k: int) -> None:
        if not 1 <= k <= self.K:
            raise ValueError(f"diffusion step k={k} outside 1..{self.K}")

    def to_json(self) -> dict:
        return {"K": self.K, "kind": "cosine", "betas": self.betas.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "VarianceSchedule":
        betas = np.asarray(obj["betas"], float)
        return cls(int(obj["K"]), betas, _cumulative(betas))


def _cumulative(betas: np.ndarray) -> np.ndarray:
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def make_cosine_schedule(K: int = 100, s: float = 0.008) -> VarianceSchedule:
    if K < 1:
        raise ValueError("K must be >= 1")
    k = np.arange(K + 1, dtype=float)
    g = np.cos(((k / K + s) / (1 + s)) * np.pi / 2) ** 2
    abar = g / g[0]
    betas = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, BETA_MAX)
    # products are recomputed from the clipped betas so the two stay consistent
    return VarianceSchedule(K, betas, _cumulative(betas))


def forward_corrupt(x0: np.ndarray, k: int, sched: VarianceSchedule, eps: np.ndarray) -> np.ndarray:
    x0 = np.asarray(x0, float)
    eps = np.asarray(eps, float)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match input {x0.shape}")
    ab = sched.abar(k)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_coefficients(k: int, sched: VarianceSchedule) -> tuple[float, float]:
    """Weights (c0, ck) of the posterior mean mu = c0 * x0_hat + ck * x_k."""
    b = sched.beta(k)
    ab, ab_prev = sched.abar(k), sched.abar(k - 1)
    c0 = np.sqrt(ab_prev) * b / (1.0 - ab)
    ck = np.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
    return float(c0), float(ck)


def posterior_mean(x0_hat: np.ndarray, xk: np.ndarray, k: int, sched: VarianceSchedule) -> np.ndarray:
    c0, ck = posterior_coefficients(k, sched)
    return c0 * np.asarray(x0_hat) + ck * np.asarray(xk)
