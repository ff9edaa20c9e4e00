from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .ast import ACTION_CHANNELS, STATE_CHANNELS


@dataclass(frozen=True)
class DistanceField:
    """Signed distance grid sampled at cell centres, bilinearly interpolated.

    ``values[i, j]`` is the value at world point
    ``(origin[0] + (j + 0.5) * cell, origin[1] + (i + 0.5) * cell)``.
    Queries outside the grid clamp to the border cells.
    """

    values: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    cell: float = 1.0

    def sample(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (value, d/dx, d/dy) at the query points."""
        h, w = self.values.shape
        fx = (np.asarray(x, float) - self.origin[0]) / self.cell - 0.5
        fy = (np.asarray(y, float) - self.origin[1]) / self.cell - 0.5
        fx_c = np.clip(fx, 0.0, w - 1.0)
        fy_c = np.clip(fy, 0.0, h - 1.0)
        j0 = np.minimum(np.floor(fx_c).astype(int), max(w - 2, 0))
        i0 = np.minimum(np.floor(fy_c).astype(int), max(h - 2, 0))
        j1 = np.minimum(j0 + 1, w - 1)
        i1 = np.minimum(i0 + 1, h - 1)
        tx = fx_c - j0
        ty = fy_c - i0
        v00 = self.values[i0, j0]
        v01 = self.values[i0, j1]
        v10 = self.values[i1, j0]
        v11 = self.values[i1, j1]
        top = v00 * (1 - tx) + v01 * tx
        bot = v10 * (1 - tx) + v11 * tx
        val = top * (1 - ty) + bot * ty
        # zero gradient along clamped axes
        inside_x = (fx >= 0.0) & (fx <= w - 1.0)
        inside_y = (fy >= 0.0) & (fy <= h - 1.0)
        dx = ((v01 - v00) * (1 - ty) + (v11 - v10) * ty) / self.cell * inside_x
        dy = (bot - top) / self.cell * inside_y
        return val, dx, dy


@dataclass
class Signal:
    """A discrete-time signal: states (..., T, 4) and actions (..., T, 2).

    Leading dimensions, if any, form a batch. ``constants`` holds scene
    constants: scalars, per-step arrays shaped (T,), or batched arrays shaped
    (B, 1) / (B, T). Special entries: ``box`` (cx, cy, half_w, half_h) for the
    ``in_box`` channel, ``offroad_field`` (a :class:`DistanceField`) for
    ``offroad``, and ``others`` (M, T, 2) or (B, M, T, 2) positions for
    ``nearest_agent``. ``channels`` lists the base channels actually present
    (None means all of them).
    """

    states: np.ndarray
    actions: np.ndarray
    dt: float = 0.1
    constants: dict[str, Any] = field(default_factory=dict)
    channels: Optional[frozenset] = None

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.states.shape[-1] != 4 or self.actions.shape[-1] != 2:
            raise ValueError("states must be (..., T, 4) and actions (..., T, 2)")
        if self.states.shape[:-1] != self.actions.shape[:-1]:
            raise ValueError(f"states {self.states.shape} and actions {self.actions.shape} disagree on (batch, T)")
        if self.states.ndim not in (2, 3):
            raise ValueError("signal must be (T, 4) or batched (B, T, 4)")
        if self.T < 1:
            raise ValueError("signal must have at least one step")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def T(self) -> int:
        return self.states.shape[-2]

    @property
    def batched(self) -> bool:
        return self.states.ndim == 3

    def has(self, name: str) -> bool:
        return self.channels is None or name in self.channels

    @classmethod
    def from_columns(cls, columns: dict[str, np.ndarray], dt: float = 0.1, constants=None) -> "Signal":
        """Build an unbatched signal from named columns; absent base channels stay unavailable."""
        lengths = {len(np.atleast_1d(v)) for v in columns.values()}
        if len(lengths) != 1:
            raise ValueError("all columns must have the same length")
        T = lengths.pop()
        states = np.full((T, 4), np.nan)
        actions = np.full((T, 2), np.nan)
        present = set()
        for i, name in enumerate(STATE_CHANNELS):
            if name in columns:
                states[:, i] = columns[name]
                present.add(name)
        for i, name in enumerate(ACTION_CHANNELS):
            if name in columns:
                actions[:, i] = columns[name]
                present.add(name)
        consts = dict(constants or {})
        for name, col in columns.items():
            if name not in STATE_CHANNELS and name not in ACTION_CHANNELS:
                consts[name] = np.asarray(col, float)
        return cls(states, actions, dt, consts, frozenset(present))
