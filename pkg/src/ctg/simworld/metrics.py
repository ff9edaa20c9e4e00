"""Scene-level evaluation: realism deviation and failure rate."""
from __future__ import annotations

import numpy as np

from ..dynamics import wrap_angle
from .maps import SceneMap

PROPERTIES = ("accel", "lat_accel", "jerk")
BINS = 20


def kinematic_properties(states: np.ndarray, dt: float) -> dict[str, np.ndarray]:
    """Pooled |longitudinal accel|, |lateral accel| and |jerk| samples from states (A, T, 4)."""
    states = np.asarray(states, float)
    v = states[..., 2]
    acc = np.diff(v, axis=-1) / dt
    yaw = wrap_angle(np.diff(states[..., 3], axis=-1)) / dt
    return {
        "accel": np.abs(acc).ravel(),
        "lat_accel": np.abs(v[..., :-1] * yaw).ravel(),
        "jerk": np.abs(np.diff(acc, axis=-1) / dt).ravel(),
    }


def histogram_distance(p: np.ndarray, q: np.ndarray, width: float) -> float:
    """W1 between two normalized histograms on the same equal-width bins."""
    return float(np.abs(np.cumsum(p) - np.cumsum(q)).sum() * width)


def histogram_w1(a: np.ndarray, b: np.ndarray, bins: int = BINS) -> float:
    """W1 between normalized histograms of a and b on shared bins spanning the pooled range."""
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("realism deviation needs non-empty samples")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, edges)[0] / a.size
    q = np.histogram(b, edges)[0] / b.size
    return histogram_distance(p, q, edges[1] - edges[0])


def realism_deviation(sim_states, gt_states, dt: float = 0.1, bins: int = BINS) -> tuple[float, dict[str, float]]:
    """Mean over the three kinematic properties of the histogram W1 distance."""
    sim = kinematic_properties(sim_states, dt)
    gt = kinematic_properties(gt_states, dt)
    parts = {k: histogram_w1(sim[k], gt[k], bins) for k in PROPERTIES}
    return float(np.mean(list(parts.values()))), parts


def failed_agents(states: np.ndarray, smap: SceneMap, radii) -> np.ndarray:
    """Per-agent failure flag: a centre distance at or under r_i + r_j, or a position off the drivable grid."""
    states = np.asarray(states, float)
    A = states.shape[0]
    off = ~smap.is_drivable(states[..., 0], states[..., 1])
    fail = off.any(axis=1)
    if A > 1:
        r = np.asarray(radii, float)
        pos = states[..., :2]
        d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
        hit = d <= (r[:, None] + r[None, :])[..., None]
        hit[np.arange(A), np.arange(A)] = False
        fail |= hit.any(axis=(1, 2))
    return fail


def failure_rate(states: np.ndarray, smap: SceneMap, radii) -> float:
    f = failed_agents(states, smap, radii)
    return float(f.mean()) if f.size else 0.0
