import numpy as np
import pytest

from ctg.dynamics import rollout
from ctg.rules import (
    CollisionGuide,
    MissingAgentError,
    RuleError,
    RuleSpec,
    agent_constants,
    build_formula,
    evaluate_metric,
)
from ctg.stl import RobustnessConfig, Signal, parse_formula, robustness, robustness_and_grad, to_text
from ctg.stl.signal import DistanceField

from oracles import central_difference


def _states_with_speed(v):
    v = np.asarray(v, float)
    s = np.zeros((len(v), 4))
    s[:, 0] = np.cumsum(v) * 0.1
    s[:, 2] = v
    return s


def test_speed_limit_formula_shape():
    f = build_formula(RuleSpec("speed_limit", {"v_limit": 10.0}))
    assert str(f) == "always[0,inf] (((v - 10.0) < 0.0))"


def test_waypoint_formula_value():
    spec = RuleSpec("goal_waypoint", {"goal": {"0": [5.0, 5.0]}})
    f = build_formula(spec)
    s = np.zeros((3, 4))
    s[:, 0] = [0.0, 4.0, 5.0]
    s[:, 1] = [0.0, 4.0, 5.5]
    sig = Signal(s[None], np.zeros((1, 3, 2)), constants=agent_constants(spec, ["0"], T=3))
    assert robustness(f, sig)[0] == pytest.approx(2.0 - 0.5)


def test_stop_sign_round_trips_through_text():
    f = build_formula(RuleSpec("stop_sign", {"box": {"0": [0, 0, 10, 10]}, "m": 5}))
    assert parse_formula(to_text(f)) == f
    text = to_text(f)
    assert "implies" in text and "eventually" in text and "always[0,5]" in text


def test_composites_are_conjunctions():
    f = build_formula(RuleSpec("waypoint_targetspeed", {"goal": {"0": [1, 1]}, "v_target": {"0": [1.0]}}))
    assert f.__class__.__name__ == "And"
    assert isinstance(build_formula(RuleSpec("no_collision")), CollisionGuide)


def test_spec_validation():
    with pytest.raises(RuleError):
        RuleSpec("speed_limit")
    with pytest.raises(RuleError):
        RuleSpec("goal_waypoint", {"goal": {"0": [0, 0]}, "eps": -1.0})
    with pytest.raises(RuleError):
        RuleSpec("speed_limit", {"v_limit": float("nan")})
    with pytest.raises(RuleError):
        RuleSpec("banana")
    spec = RuleSpec("stop_sign", {"box": {"3": [1, 2, 10, 10]}})
    assert RuleSpec.from_json(spec.to_json()) == spec
    assert spec.params["m"] == 5 and spec.params["eps_v"] == 0.1


def test_missing_scene_constant():
    spec = RuleSpec("goal_waypoint", {"goal": {"0": [0, 0]}})
    with pytest.raises(MissingAgentError):
        agent_constants(spec, ["1"])
    with pytest.raises(RuleError):
        agent_constants(RuleSpec("no_offroad"), ["0"])


def test_h_speed_limit_example():
    rep = evaluate_metric(RuleSpec("speed_limit", {"v_limit": 10.0}), _states_with_speed([9, 11, 12]))
    assert rep.values["speed_limit"] == 3.0


def test_h_collision_constant_distance():
    T = 7
    s = np.zeros((2, T, 4))
    s[1, :, 0] = 3.0
    rep = evaluate_metric(RuleSpec("no_collision", {"eps": 4.0}), s)
    assert rep.values["no_collision"] == T
    assert list(rep.per_agent["no_collision"]) == [T, T]


def test_h_collision_from_radii():
    s = np.zeros((2, 3, 4))
    s[1, :, 0] = [4.0, 4.3, 5.0]
    rep = evaluate_metric(RuleSpec("no_collision"), s, radii=[2.2, 2.2])
    assert rep.values["no_collision"] == 2


def test_h_stop_sign_min_in_box_speed():
    # agent drives through a box at x in (10, 30), slowest in-box speed 0.4
    v = np.array([5.0, 3.0, 1.0, 0.4, 0.9, 2.0, 5.0, 6.0])
    x = np.array([5.0, 12.0, 15.0, 20.0, 25.0, 28.0, 35.0, 41.0])
    s = np.zeros((8, 4))
    s[:, 0], s[:, 2] = x, v
    spec = RuleSpec("stop_sign", {"box": {"0": [20.0, 0.0, 10.0, 10.0]}})
    assert evaluate_metric(spec, s).values["stop_sign"] == pytest.approx(0.4)
    # never entering the box contributes nothing
    s[:, 1] = 50.0
    assert evaluate_metric(spec, s).values["stop_sign"] == 0.0


def test_h_waypoint_and_target():
    s = _states_with_speed([1.0, 2.0, 3.0])
    spec = RuleSpec("waypoint_targetspeed", {"goal": {"0": [0.3, 0.4]}, "v_target": {"0": [9.0, 1.0, 1.0, 1.0]}})
    rep = evaluate_metric(spec, s, t_start=1)
    assert set(rep.values) == {"goal_waypoint", "target_speed"}
    assert rep.values["target_speed"] == pytest.approx(0 + 1 + 2)
    d = np.hypot(s[:, 0] - 0.3, 0.4).min()
    assert rep.values["goal_waypoint"] == pytest.approx(d)


def test_h_offroad_counts_agents_once():
    grid = np.full((10, 10), 3.0)
    grid[:, 7:] = -1.0
    field = DistanceField(grid)
    s = np.zeros((2, 5, 4))
    s[:, :, 1] = 5.0
    s[0, :, 0] = 2.0
    s[1, :, 0] = [2.0, 5.0, 8.0, 9.0, 9.0]  # drives off for three steps
    rep = evaluate_metric(RuleSpec("no_offroad"), s, offroad_field=field)
    assert list(rep.per_agent["no_offroad"]) == [0.0, 1.0]
    assert rep.values["no_offroad"] == 1.0


def test_missing_agent_in_rollout():
    spec = RuleSpec("goal_waypoint", {"goal": {"0": [0, 0], "1": [1, 1]}})
    with pytest.raises(MissingAgentError):
        evaluate_metric(spec, np.zeros((1, 3, 4)), agent_ids=["0"])


def _random_rollout(rng, A, T):
    s0 = np.column_stack([rng.uniform(0, 20, A), rng.uniform(0, 20, A), rng.uniform(0, 8, A), rng.uniform(-3, 3, A)])
    a = rng.normal(0, 1.5, size=(A, T, 2))
    return rollout(s0, a, 0.1), a


@pytest.mark.parametrize("seed", range(40))
def test_consistency_positive_robustness_means_zero_violation(seed):
    rng = np.random.default_rng(seed)
    A, T = 3, 20
    s, a = _random_rollout(rng, A, T)
    ids = [str(i) for i in range(A)]
    grid = rng.uniform(-2, 6, size=(24, 24))
    field = DistanceField(grid)
    checks = [
        (RuleSpec("speed_limit", {"v_limit": float(rng.uniform(2, 10))}), "speed_limit"),
        (RuleSpec("no_offroad"), "no_offroad"),
    ]
    for spec, name in checks:
        f = build_formula(spec)
        sig = Signal(s, a, constants=agent_constants(spec, ids, T=T, offroad_field=field))
        rho = robustness(f, sig)
        h = evaluate_metric(spec, s, ids, offroad_field=field).per_agent[name]
        assert np.all(h[rho > 0] == 0)
    # waypoint: h is the closest approach, so satisfaction means it is below eps
    goals = {i: list(s[int(i), rng.integers(T), :2] + rng.normal(0, 2, 2)) for i in ids}
    spec = RuleSpec("goal_waypoint", {"goal": goals})
    rho = robustness(build_formula(spec), Signal(s, a, constants=agent_constants(spec, ids, T=T)))
    h = evaluate_metric(spec, s, ids).per_agent["goal_waypoint"]
    assert np.all(h[rho > 0] < spec.params["eps"])
    # collision through the per-agent nearest-agent view
    eps = float(rng.uniform(1, 8))
    guide = build_formula(RuleSpec("no_collision", {"eps": eps}))
    h = evaluate_metric(RuleSpec("no_collision", {"eps": eps}), s, ids).per_agent["no_collision"]
    for i in range(A):
        others = np.delete(s[..., :2], i, axis=0)
        rho_i = robustness(guide.formula(eps), Signal(s[i], a[i], constants={"others": others}))
        if rho_i > 0:
            assert h[i] == 0


@pytest.mark.parametrize("seed", range(20))
def test_speed_limit_monotone_in_speed(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0, 15, size=(3, 25, 4))
    spec = RuleSpec("speed_limit", {"v_limit": 8.0})
    faster = s.copy()
    faster[..., 2] += rng.uniform(0, 3, size=s.shape[:2])
    assert evaluate_metric(spec, faster).values["speed_limit"] >= evaluate_metric(spec, s).values["speed_limit"]


def test_stop_sign_formula_gradient():
    rng = np.random.default_rng(3)
    T = 12
    s0 = np.array([[0.0, 0.2, 3.0, 0.05]])
    a = rng.normal(0, 1, size=(1, T, 2))
    spec = RuleSpec("stop_sign", {"box": {"0": [2.0, 0.0, 1.5, 1.5]}, "m": 3})
    f = build_formula(spec)
    consts = agent_constants(spec, ["0"], T=T)
    cfg = RobustnessConfig("smooth", 10.0)

    def J(act):
        st = rollout(s0, act, 0.1)
        return float(robustness(f, Signal(st, act, constants=consts), cfg=cfg)[0])

    st = rollout(s0, a, 0.1)
    _, gS, gA = robustness_and_grad(f, Signal(st, a, constants=consts), cfg)
    from ctg.dynamics import rollout_vjp

    g = rollout_vjp(s0, a, 0.1, gS) + gA
    fd = central_difference(J, a, 1e-6)
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)
