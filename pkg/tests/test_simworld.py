import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctg.diffusion import ArchConfig, DiffusionModel, Normalizer
from ctg.dynamics import rollout
from ctg.guidance import GuidanceConfig
from ctg.rules import RuleSpec, evaluate_metric
from ctg.simworld import (
    Route,
    Scene,
    SceneConfig,
    SceneGenerationError,
    SimulationError,
    agent_context,
    build_contexts,
    build_map,
    crop_map,
    failed_agents,
    failure_rate,
    generate_scenes,
    histogram_w1,
    load_scenes,
    realism_deviation,
    recipe,
    rle_decode,
    rle_encode,
    save_scenes,
    simulate,
    simulate_many,
    to_local,
    training_examples,
)
from ctg.simworld.metrics import histogram_distance
from ctg.simworld.simulate import _discharged

import fixtures


@pytest.fixture(scope="module")
def scenes():
    return generate_scenes(SceneConfig(n_scenes=3, density=2, rules=("speed_limit", "target_speed")), seed=5)


@pytest.fixture(scope="module")
def tiny_model(scenes):
    arch = ArchConfig(T=10, H=10, M=4, width=8, feat=8, k_embed=8, kernel=3)
    data = training_examples(scenes, T=10)
    return DiffusionModel.create(arch, Normalizer.fit(data.actions, data.states), K=8, seed=0)


# ------------------------------------------------------------------ maps


@pytest.mark.parametrize("arch", ["straight", "curve", "intersection"])
def test_map_invariants(arch):
    m = build_map(arch)
    assert m.drivable.shape == (256, 256)
    for lane in m.lanes:
        assert m.is_drivable(lane[:, 0].clip(0, 255.9), lane[:, 1].clip(0, 255.9)).all()
    # the distance field is positive exactly on drivable cells, so its zero level
    # sits between the centres of neighbouring drivable / non-drivable cells
    assert np.array_equal(m.sdf.values > 0, m.drivable)
    assert np.all(m.sdf.values != 0)
    lengths = np.linalg.norm(m.lane_dir[:, m.drivable], axis=0)
    np.testing.assert_allclose(lengths, 1.0)


def test_unknown_archetype():
    with pytest.raises(ValueError, match="archetype"):
        build_map("roundabout")
    with pytest.raises(ValueError):
        SceneConfig(archetypes=("roundabout",))


def test_intersection_has_stop_boxes():
    m = build_map("intersection")
    assert len(m.stop_boxes) == 2 and len(m.stop_lines) == 4
    for cx, cy, hw, hh in m.stop_boxes:
        assert m.is_drivable(np.array([cx]), np.array([cy]))[0]


@given(st.lists(st.booleans(), min_size=1, max_size=60), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_rle_round_trip(bits, width):
    n = len(bits) - len(bits) % width or width
    grid = np.resize(np.array(bits, bool), n).reshape(-1, width)
    assert np.array_equal(rle_decode(rle_encode(grid)), grid)


def test_rle_rejects_bad_runs():
    with pytest.raises(ValueError):
        rle_decode({"shape": [2, 2], "first": 0, "runs": [1, 1]})


def test_route_projection():
    r = Route(np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]))
    assert r.length == 20.0
    np.testing.assert_allclose(r.point(15.0), [10.0, 5.0])
    s, lat = r.project((4.0, 1.5), 0.0, 20.0)
    assert s == pytest.approx(4.0) and lat == pytest.approx(1.5)
    assert r.heading(12.0) == pytest.approx(np.pi / 2)


# ------------------------------------------------------------------ scenes


def test_generation_is_deterministic(tmp_path):
    cfg = SceneConfig(n_scenes=3, density=2)
    a = [s.dumps() for s in generate_scenes(cfg, 11)]
    b = [s.dumps() for s in generate_scenes(cfg, 11)]
    c = [s.dumps() for s in generate_scenes(cfg, 12)]
    assert a == b and a != c


def test_logs_are_clean_and_feasible(scenes):
    for sc in scenes:
        ids = sc.agent_ids
        col = evaluate_metric(RuleSpec("no_collision", {}), sc.states, ids, radii=sc.radii)
        off = evaluate_metric(RuleSpec("no_offroad", {}), sc.states, ids, offroad_field=sc.map.sdf)
        assert col.values["no_collision"] == 0 and off.values["no_offroad"] == 0
        assert sc.map.is_drivable(sc.states[:, 0, 0], sc.states[:, 0, 1]).all()
        np.testing.assert_allclose(rollout(sc.states[:, 0], sc.actions), sc.states[:, 1:], atol=1e-9, rtol=0)
        assert sc.states.shape[1] == 261 and sc.history == 10
        assert np.abs(sc.actions[..., 0]).max() <= 4.0 and np.abs(sc.actions[..., 1]).max() <= 1.0


def test_logs_cover_twenty_seconds(scenes):
    assert (scenes[0].states.shape[1] - 1) * scenes[0].dt >= 20.0


def test_density_zero_gives_single_agent():
    sc = generate_scenes(SceneConfig(n_scenes=3, density=0), 0)
    assert all(len(s.agents) == 1 for s in sc)


def test_unsatisfiable_density_fails_after_retries():
    with pytest.raises(SceneGenerationError, match="could not place"):
        generate_scenes(SceneConfig(n_scenes=1, density=60, archetypes=("straight",), spawn_retries=20), 0)


def test_scene_file_round_trip(scenes, tmp_path):
    paths = save_scenes(scenes, tmp_path)
    again = load_scenes(tmp_path)
    for p, a, b in zip(paths, scenes, again):
        assert b.dumps() == a.dumps() == p.read_text()
        assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.map.drivable, b.map.drivable)
        assert b.rules == a.rules


def test_scene_file_rejects_other_formats():
    with pytest.raises(ValueError, match="not a scene file"):
        Scene.from_json({"format": "something-else"})


def test_recipes(scenes):
    sc = scenes[0]
    v = sc.states[:, 10:211, 2]
    moving = v.mean(axis=1) > 0.5
    assert recipe("speed_limit", sc).params["v_limit"] == pytest.approx(np.quantile(v[moving], 0.75))
    vt = recipe("target_speed", sc).params["v_target"]
    np.testing.assert_allclose(vt["0"][:201], 0.5 * v[0])
    goal = recipe("goal_waypoint", sc).params["goal"]
    np.testing.assert_allclose(goal["1"], sc.states[1, 10 + 150, :2])
    box = recipe("stop_sign", sc).params["box"]["0"]
    np.testing.assert_allclose(box, [*sc.states[0, 10 + 50, :2], 10.0, 10.0])
    comp = recipe("waypoint_targetspeed", sc).params
    np.testing.assert_allclose(comp["goal"]["0"], sc.states[0, 110, :2])
    np.testing.assert_allclose(comp["v_target"]["0"][:201], v[0])
    with pytest.raises(ValueError):
        recipe("teleport", sc)


# ------------------------------------------------------------------ context


def test_to_local():
    origin = np.array([3.0, 4.0, 2.0, np.pi / 2])
    pt = np.array([[3.0, 6.0, 5.0, np.pi / 2]])
    np.testing.assert_allclose(to_local(pt, origin), [[2.0, 0.0, 5.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(to_local(origin[None], origin), [[0.0, 0.0, 2.0, 0.0]], atol=1e-12)


def test_crop_on_straight_lane():
    m = build_map("straight")
    y = 128 - 3.5
    r = crop_map(m, np.array([100.0, y, 5.0, 0.0]))
    assert r.shape == (3, 32, 32)
    # row 16 runs along the agent's own lane; lane direction is straight ahead
    assert r[0, 16].all()
    np.testing.assert_allclose(r[1, 16], 1.0)
    np.testing.assert_allclose(r[2, 16], 0.0, atol=1e-12)
    flipped = crop_map(m, np.array([100.0, y, 5.0, np.pi]))
    np.testing.assert_allclose(flipped[1, 16], -1.0)


def test_context_locality(scenes):
    sc = scenes[0]
    hist = sc.states[:, :11]
    before = agent_context(sc.map, hist, 0)
    far = sc.map.__class__(sc.map.archetype, sc.map.drivable.copy(), sc.map.lanes, sc.map.routes,
                           sc.map.stop_boxes, sc.map.stop_lines, sc.map.cell, sc.map.lane_dir.copy(), sc.map.sdf)
    x, y = hist[0, -1, :2]
    yy, xx = np.mgrid[0:256, 0:256]
    outside = np.hypot(xx + 0.5 - x, yy + 0.5 - y) > 40.0  # crop reaches at most ~29 m
    far.drivable[outside] = ~far.drivable[outside]
    far.lane_dir[:, outside] = 0.3
    after = agent_context(far, hist, 0)
    np.testing.assert_array_equal(before.raster, after.raster)
    np.testing.assert_array_equal(before.past, after.past)


def test_context_neighbours_and_mask(scenes):
    sc = scenes[0]
    hist = sc.states[:, :11]
    ctx = agent_context(sc.map, hist, 1, M=4)
    A = len(sc.agents)
    assert ctx.mask.tolist() == [1.0] * A + [0.0] * (5 - A)
    assert np.all(ctx.past[A:] == 0)
    np.testing.assert_allclose(ctx.past[0, -1], [0.0, 0.0, hist[1, -1, 2], 0.0], atol=1e-9)
    d = [np.linalg.norm(ctx.past[n, -1, :2]) for n in range(1, A)]
    assert d == sorted(d)
    batch = build_contexts(sc.map, hist, 4)
    assert len(batch) == A


def test_training_examples(scenes):
    data = training_examples(scenes, T=50)
    per_scene = sum(len(s.agents) for s in scenes) * len(range(10, 260 - 50 + 1, 10))
    assert len(data) == per_scene
    np.testing.assert_allclose(data.states, rollout(data.s0, data.actions), atol=1e-12)
    assert np.all(data.s0[:, [0, 1, 3]] == 0)


# ------------------------------------------------------------------ metrics


def test_realism_identical_logs_is_zero(scenes):
    real, parts = realism_deviation(scenes[0].states, scenes[0].states)
    assert real == 0 and all(v == 0 for v in parts.values())


def test_point_masses_unit_bins():
    assert histogram_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0) == 1.0


def _quantile_w1(a, b, bins=20):
    """W1 of the binned samples via sorted quantile coupling (equal sample counts)."""
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    w = (hi - lo) / bins
    centre = lambda x: lo + (np.minimum(np.floor((x - lo) / w), bins - 1) + 0.5) * w  # noqa: E731
    return float(np.mean(np.abs(np.sort(centre(a)) - np.sort(centre(b)))))


@pytest.mark.parametrize("seed", range(10))
def test_w1_matches_quantile_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.gamma(2.0, 1.0, size=400)
    b = rng.normal(3.0, 1.5, size=400) ** 2
    assert histogram_w1(a, b) == pytest.approx(_quantile_w1(a, b), rel=1e-9, abs=1e-12)


def test_realism_needs_data():
    with pytest.raises(ValueError):
        histogram_w1(np.array([]), np.array([1.0]))


@pytest.mark.parametrize("make", [fixtures.static_fixture, fixtures.offroad_fixture, fixtures.crossing_fixture])
def test_failure_fixtures(make):
    smap, states, expected = make()
    assert failure_rate(states, smap, fixtures.RADII) == expected


def test_crossing_fixture_flags_the_pair():
    smap, states, _ = fixtures.crossing_fixture()
    assert failed_agents(states, smap, fixtures.RADII).tolist() == [True, True, False, False]
    d = np.linalg.norm(states[0, :, :2] - states[1, :, :2], axis=-1)
    assert int(np.argmin(d)) == 30  # t = 3 s


# ------------------------------------------------------------------ simulation


def test_replay_reproduces_the_log(scenes):
    for sc in scenes:
        rep = simulate(sc, None, GuidanceConfig(), 0, replay=True)
        assert rep.steps == 200 and rep.replans == 40
        assert rep.real == 0 and rep.fail == 0
        np.testing.assert_array_equal(rep.states, sc.states[:, 10:211])


def test_closed_loop_feasibility_and_determinism(scenes, tiny_model):
    seen, worst = [], [0.0]

    def hook(r, k, actions, states, s0):
        seen.append((r, k))
        worst[0] = max(worst[0], np.abs(rollout(s0, actions) - states).max())

    cfg = GuidanceConfig(filtration=2)
    a = simulate(scenes[1], tiny_model, cfg, 4, steps=20, hook=hook)
    b = simulate(scenes[1], tiny_model, cfg, 4, steps=20)
    assert a.replans == 4 and len(seen) == 4 * 8
    assert worst[0] <= 1e-6 and a.feasibility_error <= 1e-6
    np.testing.assert_allclose(rollout(a.states[:, 0], a.actions), a.states[:, 1:], atol=1e-6)
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)
    assert a.jsonl() == b.jsonl()
    assert set(a.metric_values()) == {"h_speedlimit", "h_targetspeed"}


def test_simulate_many_keeps_scenes_apart(scenes, tiny_model):
    reps = simulate_many(scenes, tiny_model, GuidanceConfig(filtration=2), 0, steps=10)
    assert [r.scene_id for r in reps] == [s.scene_id for s in scenes]
    for r, sc in zip(reps, scenes):
        assert r.states.shape == (len(sc.agents), 11, 4)
        assert all(len(sel) == len(sc.agents) for sel in r.selected)


def test_log_records(scenes):
    rep = simulate(scenes[0], None, GuidanceConfig(), 0, replay=True, steps=10)
    recs = list(rep.log_records())
    assert len(recs) == len(scenes[0].agents) * 10
    assert recs[0]["scene"] == scenes[0].scene_id and recs[0]["step"] == 0


def test_model_mismatch_is_reported(scenes, tiny_model):
    with pytest.raises(SimulationError, match="trained model"):
        simulate(scenes[0], None, GuidanceConfig(), 0)
    bad = DiffusionModel(tiny_model.arch, tiny_model.net, tiny_model.normalizer, tiny_model.schedule, dt=0.2)
    with pytest.raises(SimulationError, match="dt"):
        simulate(scenes[0], bad, GuidanceConfig(), 0)


def test_rule_discharge():
    ex = np.zeros((2, 10, 4))
    ex[0, :, 0] = np.linspace(0, 9, 10)
    goal = RuleSpec("goal_waypoint", {"goal": {"0": [5.0, 0.0], "1": [50.0, 0.0]}})
    assert _discharged(goal, ex, ["0", "1"]).tolist() == [True, False]
    stop = RuleSpec("stop_sign", {"box": {"0": [0.0, 0.0, 3.0, 3.0], "1": [40.0, 0.0, 3.0, 3.0]}, "m": 3})
    ex2 = np.zeros((2, 10, 4))
    ex2[:, :, 2] = 1.0
    ex2[0, 2:6, 2] = 0.0
    assert _discharged(stop, ex2, ["0", "1"]).tolist() == [True, False]
    assert _discharged(RuleSpec("speed_limit", {"v_limit": 3.0}), ex, ["0", "1"]) is None
