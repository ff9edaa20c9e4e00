"""Agent-centric conditioning: rotated map crops and neighbour histories."""
from __future__ import annotations

import numpy as np

from ..diffusion.context import ContextBatch, SceneContext
from ..dynamics import wrap_angle
from .maps import SceneMap

# crop window in the agent frame (x forward, y left), metres
WINDOW = (-8.0, 24.0, -16.0, 16.0)
RASTER = 32
NEIGHBOURS = 4


def to_local(states: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """Express world states (..., 4) in the frame of ``origin`` (x, y, v, theta)."""
    c, s = np.cos(origin[3]), np.sin(origin[3])
    dx = states[..., 0] - origin[0]
    dy = states[..., 1] - origin[1]
    out = np.empty_like(states, dtype=float)
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = states[..., 2]
    out[..., 3] = wrap_angle(states[..., 3] - origin[3])
    return out


def crop_points(origin, size: int = RASTER, window=WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of the crop's sample points (cell centres), each (size, size).

    Row index runs along local y, column index along local x.
    """
    x0, x1, y0, y1 = window
    lx = x0 + (np.arange(size) + 0.5) * (x1 - x0) / size
    ly = y0 + (np.arange(size) + 0.5) * (y1 - y0) / size
    gx, gy = np.meshgrid(lx, ly)
    c, s = np.cos(origin[3]), np.sin(origin[3])
    return origin[0] + c * gx - s * gy, origin[1] + s * gx + c * gy


def crop_map(smap: SceneMap, origin, size: int = RASTER, window=WINDOW) -> np.ndarray:
    """(3, size, size) raster: drivable flag and lane direction (cos, sin) in the agent frame."""
    wx, wy = crop_points(origin, size, window)
    i, j = smap.cell_index(wx, wy)
    h, w = smap.shape
    inside = (i >= 0) & (i < h) & (j >= 0) & (j < w)
    ii, jj = np.where(inside, i, 0), np.where(inside, j, 0)
    drv = np.where(inside, smap.drivable[ii, jj], False).astype(np.float32)
    dc = np.where(inside, smap.lane_dir[0, ii, jj], 0.0)
    ds = np.where(inside, smap.lane_dir[1, ii, jj], 0.0)
    c, s = np.cos(origin[3]), np.sin(origin[3])
    return np.stack([drv, c * dc + s * ds, -s * dc + c * ds]).astype(np.float32)


def nearest_neighbours(current: np.ndarray, agent: int, M: int) -> np.ndarray:
    """Indices of the M agents closest to ``agent`` right now (ties by index)."""
    d = np.linalg.norm(current[:, :2] - current[agent, :2], axis=-1)
    order = [int(k) for k in np.argsort(d, kind="stable") if k != agent]
    return np.array(order[:M], int)


def agent_context(smap: SceneMap, history: np.ndarray, agent: int, M: int = NEIGHBOURS,
                  size: int = RASTER, window=WINDOW) -> SceneContext:
    """Context for one agent from world histories ``history`` (A, H + 1, 4), last entry = now."""
    A, H1, _ = history.shape
    origin = history[agent, -1]
    past = np.zeros((M + 1, H1, 4))
    mask = np.zeros(M + 1)
    slots = [agent, *nearest_neighbours(history[:, -1], agent, M)]
    for n, a in enumerate(slots):
        past[n] = to_local(history[a], origin)
        mask[n] = 1.0
    return SceneContext(crop_map(smap, origin, size, window), past, mask)


def build_contexts(smap: SceneMap, history: np.ndarray, M: int = NEIGHBOURS, size: int = RASTER,
                   window=WINDOW) -> ContextBatch:
    return ContextBatch.stack(agent_context(smap, history, a, M, size, window) for a in range(history.shape[0]))


def local_start(current: np.ndarray) -> np.ndarray:
    """Start states in each agent's own frame: only the speed survives."""
    s0 = np.zeros_like(current, dtype=float)
    s0[:, 2] = current[:, 2]
    return s0
