"""Unicycle vehicle model: state (x, y, v, theta), action (accel, yaw rate).

Explicit Euler at fixed ``dt``. ``rollout`` is written as a cumulative sum
seeded with the initial value so that it is bit-identical to applying
:func:`step` repeatedly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DT = 0.1
STATE_DIM = 4
ACTION_DIM = 2

# physical envelope enforced by the simulator when executing actions
MAX_ACCEL = 4.0
MAX_YAWRATE = 1.0


class DynamicsError(ValueError):
    pass


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    v: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.theta])

    @classmethod
    def from_array(cls, a) -> "AgentState":
        return cls(*(float(c) for c in a))


@dataclass(frozen=True)
class AgentAction:
    accel: float
    yawrate: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.yawrate])


def wrap_angle(theta):
    """Wrap to (-pi, pi]; for display only, dynamics keep theta unwrapped."""
    out = np.mod(np.asarray(theta) + np.pi, 2 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DynamicsError("non-finite state or action")


def step(s, a, dt: float = DT):
    """One Euler step. Accepts dataclasses or arrays (..., 4) / (..., 2)."""
    if not dt > 0:
        raise DynamicsError("dt must be positive")
    as_obj = isinstance(s, AgentState)
    sa = s.as_array() if as_obj else np.asarray(s, float)
    aa = a.as_array() if isinstance(a, AgentAction) else np.asarray(a, float)
    _check_finite(sa, aa)
    x, y, v, th = sa[..., 0], sa[..., 1], sa[..., 2], sa[..., 3]
    out = np.stack(
        [
            x + v * np.cos(th) * dt,
            y + v * np.sin(th) * dt,
            v + aa[..., 0] * dt,
            th + aa[..., 1] * dt,
        ],
        axis=-1,
    )
    return AgentState.from_array(out) if as_obj else out


def rollout(s0, actions, dt: float = DT) -> np.ndarray:
    """States s_1..s_T for actions a_0..a_{T-1}; batched over leading dims."""
    if not dt > 0:
        raise DynamicsError("dt must be positive")
    s0 = s0.as_array() if isinstance(s0, AgentState) else np.asarray(s0, float)
    actions = np.asarray(actions, float)
    if actions.ndim < 2 or actions.shape[-1] != ACTION_DIM or actions.shape[-2] < 1:
        raise DynamicsError(f"actions must be (..., T>=1, 2), got {actions.shape}")
    if s0.shape[-1] != STATE_DIM:
        raise DynamicsError(f"initial state must be (..., 4), got {s0.shape}")
    _check_finite(s0, actions)
    s0 = np.broadcast_to(s0, actions.shape[:-2] + (STATE_DIM,))
    # v_0..v_T and theta_0..theta_T, sequential sums seeded with the start value
    v = np.cumsum(np.concatenate([s0[..., 2:3], actions[..., 0] * dt], axis=-1), axis=-1)
    th = np.cumsum(np.concatenate([s0[..., 3:4], actions[..., 1] * dt], axis=-1), axis=-1)
    vp, thp = v[..., :-1], th[..., :-1]
    x = np.cumsum(np.concatenate([s0[..., 0:1], vp * np.cos(thp) * dt], axis=-1), axis=-1)
    y = np.cumsum(np.concatenate([s0[..., 1:2], vp * np.sin(thp) * dt], axis=-1), axis=-1)
    return np.stack([x[..., 1:], y[..., 1:], v[..., 1:], th[..., 1:]], axis=-1)


def rollout_vjp(s0, actions, dt: float, cotangent) -> np.ndarray:
    """Gradient of <cotangent, rollout(s0, actions)> with respect to the actions."""
    s0 = s0.as_array() if isinstance(s0, AgentState) else np.asarray(s0, float)
    actions = np.asarray(actions, float)
    cot = np.asarray(cotangent, float)
    if cot.shape[:-1] != actions.shape[:-1] or cot.shape[-1] != STATE_DIM:
        raise DynamicsError(f"cotangent shape {cot.shape} does not match actions {actions.shape}")
    s0 = np.broadcast_to(s0, actions.shape[:-2] + (STATE_DIM,))
    v = np.cumsum(np.concatenate([s0[..., 2:3], actions[..., 0] * dt], axis=-1), axis=-1)[..., :-1]
    th = np.cumsum(np.concatenate([s0[..., 3:4], actions[..., 1] * dt], axis=-1), axis=-1)[..., :-1]
    gx, gy, gv, gth = (cot[..., i] for i in range(4))
    # position at step t+1 sums increments u = 0..t, so increment u collects cotangents t >= u
    Gx = np.flip(np.cumsum(np.flip(gx, -1), -1), -1)
    Gy = np.flip(np.cumsum(np.flip(gy, -1), -1), -1)
    c, s = np.cos(th), np.sin(th)
    # d/dv_u and d/dtheta_u for u = 0..T-1 through the position increments
    dv = (Gx * c + Gy * s) * dt
    dth = (-Gx * s + Gy * c) * v * dt
    # v_{u} for u >= 1 also appears directly as states[u-1]
    dv_full = np.concatenate([dv[..., 1:], np.zeros_like(dv[..., :1])], axis=-1) + gv
    dth_full = np.concatenate([dth[..., 1:], np.zeros_like(dth[..., :1])], axis=-1) + gth
    # a_w feeds v_u for all u > w: reverse cumulative sum
    g_acc = np.flip(np.cumsum(np.flip(dv_full, -1), -1), -1) * dt
    g_yaw = np.flip(np.cumsum(np.flip(dth_full, -1), -1), -1) * dt
    return np.stack([g_acc, g_yaw], axis=-1)


def rollout_torch(s0, actions, dt: float = DT):
    """Differentiable rollout for training; same recurrence as :func:`rollout`."""
    import torch

    v = torch.cumsum(torch.cat([s0[..., 2:3], actions[..., 0] * dt], dim=-1), dim=-1)
    th = torch.cumsum(torch.cat([s0[..., 3:4], actions[..., 1] * dt], dim=-1), dim=-1)
    vp, thp = v[..., :-1], th[..., :-1]
    x = torch.cumsum(torch.cat([s0[..., 0:1], vp * torch.cos(thp) * dt], dim=-1), dim=-1)
    y = torch.cumsum(torch.cat([s0[..., 1:2], vp * torch.sin(thp) * dt], dim=-1), dim=-1)
    return torch.stack([x[..., 1:], y[..., 1:], v[..., 1:], th[..., 1:]], dim=-1)


def clamp_actions(state, actions, dt: float = DT) -> np.ndarray:
    """Clip actions to the physical envelope; accel is also limited so speed stays >= 0.

    ``state`` is the state before the first action; actions are applied in order.
    """
    actions = np.array(actions, float)
    s = np.asarray(state, float).copy()
    out = np.empty_like(actions)
    for t in range(actions.shape[-2]):
        acc = np.clip(actions[..., t, 0], -MAX_ACCEL, MAX_ACCEL)
        acc = np.maximum(acc, -s[..., 2] / dt)
        yaw = np.clip(actions[..., t, 1], -MAX_YAWRATE, MAX_YAWRATE)
        out[..., t, 0] = acc
        out[..., t, 1] = yaw
        s = step(s, out[..., t, :], dt)
    return out


@dataclass(frozen=True)
class Trajectory:
    """Actions paired with the states they produce; construction enforces states == rollout(s0, actions)."""

    s0: np.ndarray
    actions: np.ndarray
    states: np.ndarray
    dt: float = DT

    def __post_init__(self) -> None:
        expect = rollout(self.s0, self.actions, self.dt)
        states = np.asarray(self.states, float)
        if states.shape != expect.shape:
            raise DynamicsError(f"states shape {states.shape} != rollout shape {expect.shape}")
        err = np.max(np.abs(states - expect))
        if err > 1e-9:
            raise DynamicsError(f"states are not the rollout of the actions (max error {err:.3e})")

    @classmethod
    def from_actions(cls, s0, actions, dt: float = DT) -> "Trajectory":
        s0 = np.asarray(s0, float)
        actions = np.asarray(actions, float)
        return cls(s0, actions, rollout(s0, actions, dt), dt)

    @property
    def T(self) -> int:
        return self.actions.shape[-2]
