import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctg.dynamics import (
    AgentAction,
    AgentState,
    DynamicsError,
    Trajectory,
    clamp_actions,
    rollout,
    rollout_torch,
    rollout_vjp,
    step,
    wrap_angle,
)

from oracles import central_difference, rollout_loop


def test_step_straight_line():
    out = step(AgentState(0, 0, 1, 0), AgentAction(0, 0), 0.1)
    assert out == AgentState(0.1, 0.0, 1.0, 0.0)


def test_step_zero_speed_accelerates_in_place():
    out = step(AgentState(0, 0, 0, 0.7), AgentAction(2, 0), 0.1)
    assert out.x == 0.0 and out.y == 0.0
    assert out.v == pytest.approx(0.2)
    assert out.theta == 0.7


def test_step_heading_north():
    out = step(AgentState(0, 0, 2, math.pi / 2), AgentAction(0, 0.5), 0.1)
    # x = 2 cos(pi/2) 0.1 is 1.2e-17, not exactly zero
    assert out.x == pytest.approx(2 * math.cos(math.pi / 2) * 0.1, abs=0)
    assert abs(out.x) < 1e-15
    assert out.y == pytest.approx(0.2)
    assert out.v == 2.0
    assert out.theta == pytest.approx(math.pi / 2 + 0.05)


def test_step_rejects_nonfinite_and_bad_dt():
    with pytest.raises(DynamicsError):
        step(AgentState(0, 0, float("nan"), 0), AgentAction(0, 0))
    with pytest.raises(DynamicsError):
        step(AgentState(0, 0, 1, 0), AgentAction(0, 0), 0.0)


def test_rollout_constant_speed():
    states = rollout(np.array([0, 0, 1, 0.0]), np.zeros((3, 2)), 0.1)
    np.testing.assert_allclose(states[:, 0], [0.1, 0.2, 0.3], atol=1e-15)
    assert not states[:, 1].any()
    assert np.all(states[:, 2] == 1.0)


def test_rollout_first_state_is_one_step():
    rng = np.random.default_rng(0)
    s0 = rng.normal(size=4)
    a = rng.normal(size=(6, 2))
    np.testing.assert_array_equal(rollout(s0, a, 0.1)[0], step(s0, a[0], 0.1))


@pytest.mark.parametrize("seed", range(10))
def test_rollout_matches_independent_loop(seed):
    rng = np.random.default_rng(seed)
    s0 = rng.normal(size=4)
    a = rng.normal(size=(10, 2))
    np.testing.assert_allclose(rollout(s0, a, 0.1), rollout_loop(s0, a, 0.1), rtol=0, atol=1e-12)


def test_rollout_bitwise_equals_repeated_step():
    rng = np.random.default_rng(1)
    s0 = rng.normal(size=4)
    a = rng.normal(size=(2 * 25, 2))
    s = s0
    seq = []
    for t in range(a.shape[0]):
        s = step(s, a[t], 0.1)
        seq.append(s)
    np.testing.assert_array_equal(rollout(s0, a, 0.1), np.array(seq))


def test_rollout_composes_over_repeated_actions():
    rng = np.random.default_rng(2)
    s0 = rng.normal(size=4)
    a = rng.normal(size=(8, 2))
    rep = np.concatenate([a, a])
    first = rollout(s0, a, 0.1)
    second = rollout(first[-1], a, 0.1)
    np.testing.assert_array_equal(rollout(s0, rep, 0.1), np.concatenate([first, second]))


def test_rollout_batched():
    rng = np.random.default_rng(3)
    s0 = rng.normal(size=(5, 4))
    a = rng.normal(size=(5, 7, 2))
    batched = rollout(s0, a, 0.1)
    for b in range(5):
        np.testing.assert_array_equal(batched[b], rollout(s0[b], a[b], 0.1))


@settings(max_examples=50, deadline=None)
@given(
    phi=st.floats(-math.pi, math.pi),
    dx=st.floats(-50, 50),
    dy=st.floats(-50, 50),
    seed=st.integers(0, 10_000),
)
def test_rollout_translation_rotation_equivariance(phi, dx, dy, seed):
    rng = np.random.default_rng(seed)
    s0 = np.array([0.0, 0.0, abs(rng.normal()) * 5, rng.normal()])
    a = rng.normal(size=(12, 2))
    base = rollout(s0, a, 0.1)
    c, s = math.cos(phi), math.sin(phi)
    moved = np.array([dx, dy, s0[2], s0[3] + phi])
    out = rollout(moved, a, 0.1)
    back_x = c * (out[:, 0] - dx) + s * (out[:, 1] - dy)
    back_y = -s * (out[:, 0] - dx) + c * (out[:, 1] - dy)
    np.testing.assert_allclose(back_x, base[:, 0], atol=1e-9)
    np.testing.assert_allclose(back_y, base[:, 1], atol=1e-9)
    np.testing.assert_allclose(out[:, 3] - phi, base[:, 3], atol=1e-9)


def test_vjp_zero_cotangent():
    rng = np.random.default_rng(0)
    g = rollout_vjp(rng.normal(size=4), rng.normal(size=(5, 2)), 0.1, np.zeros((5, 4)))
    assert not g.any()


def test_vjp_final_speed():
    T, dt = 6, 0.1
    cot = np.zeros((T, 4))
    cot[-1, 2] = 1.0
    g = rollout_vjp(np.array([0, 0, 1.0, 0]), np.zeros((T, 2)), dt, cot)
    np.testing.assert_allclose(g[:, 0], dt)
    np.testing.assert_allclose(g[:, 1], 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_vjp_finite_differences(seed):
    rng = np.random.default_rng(seed)
    s0 = rng.normal(size=4) + np.array([0, 0, 3, 0])
    a = rng.normal(size=(8, 2))
    cot = rng.normal(size=(8, 4))
    g = rollout_vjp(s0, a, 0.1, cot)
    fd = central_difference(lambda aa: float(np.sum(cot * rollout(s0, aa, 0.1))), a, 1e-5)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-5


def test_vjp_batched_and_shape_check():
    rng = np.random.default_rng(9)
    s0 = rng.normal(size=(3, 4))
    a = rng.normal(size=(3, 5, 2))
    cot = rng.normal(size=(3, 5, 4))
    g = rollout_vjp(s0, a, 0.1, cot)
    for b in range(3):
        np.testing.assert_allclose(g[b], rollout_vjp(s0[b], a[b], 0.1, cot[b]), atol=1e-14)
    with pytest.raises(DynamicsError):
        rollout_vjp(s0, a, 0.1, cot[:, :4])


def test_torch_rollout_matches_numpy():
    import torch

    rng = np.random.default_rng(4)
    s0 = rng.normal(size=(2, 4))
    a = rng.normal(size=(2, 9, 2))
    got = rollout_torch(torch.tensor(s0), torch.tensor(a), 0.1).numpy()
    np.testing.assert_allclose(got, rollout(s0, a, 0.1), atol=1e-12)


def test_trajectory_rejects_inconsistent_states():
    rng = np.random.default_rng(5)
    traj = Trajectory.from_actions(np.array([0, 0, 2.0, 0.3]), rng.normal(size=(10, 2)))
    for _ in range(20):
        bad = traj.states.copy()
        t, c = rng.integers(10), rng.integers(4)
        bad[t, c] += rng.choice([-1, 1]) * 10 ** rng.uniform(-8, 0)
        with pytest.raises(DynamicsError):
            Trajectory(traj.s0, traj.actions, bad)


def test_clamp_actions_envelope():
    s0 = np.array([0, 0, 0.3, 0.0])
    a = np.array([[-9.0, 3.0], [10.0, -2.0], [-1.0, 0.2]])
    out = clamp_actions(s0, a, 0.1)
    assert out[0, 0] == pytest.approx(-3.0)  # stops exactly at zero speed
    assert out[1, 0] == 4.0 and out[0, 1] == 1.0 and out[1, 1] == -1.0
    assert np.all(rollout(s0, out, 0.1)[:, 2] >= -1e-12)


def test_wrap_angle():
    np.testing.assert_allclose(wrap_angle([np.pi, -np.pi, 3 * np.pi / 2]), [np.pi, np.pi, -np.pi / 2])
