"""Hand-built rollouts with known failure outcomes, shared by unit and acceptance tests."""
import numpy as np

from ctg.dynamics import rollout
from ctg.simworld.maps import LANE_OFFSET, build_map

RADII = np.full(4, 2.25)
STEPS = 200


def _drive(s0, actions):
    s0 = np.asarray(s0, float)
    return np.concatenate([s0[:, None], rollout(s0, actions)], axis=1)


def static_fixture():
    """Four parked cars on the eastbound lane, 20 m apart: nobody fails."""
    smap = build_map("straight")
    y = smap.shape[0] / 2 - LANE_OFFSET
    s0 = np.array([[20.0 + 20 * i, y, 0.0, 0.0] for i in range(4)])
    return smap, _drive(s0, np.zeros((4, STEPS, 2))), 0.0


def offroad_fixture():
    """Four cars cruising east; the last one gets a scripted steering override and leaves the road."""
    smap = build_map("straight")
    y = smap.shape[0] / 2 - LANE_OFFSET
    s0 = np.array([[20.0 + 25 * i, y, 5.0, 0.0] for i in range(4)])
    actions = np.zeros((4, STEPS, 2))
    actions[3, :20, 1] = -0.5  # turn right for 2 s, then hold heading
    return smap, _drive(s0, actions), 0.25


def crossing_fixture():
    """An eastbound and a southbound car reach the same junction point at t = 3 s.

    Two more cars wait far away on the main road. Exactly the crossing pair fails.
    """
    smap = build_map("intersection")
    c = smap.shape[0] / 2
    meet = np.array([c - LANE_OFFSET, c - LANE_OFFSET])
    v, t_meet = 10.0, 3.0
    s0 = np.array([
        [meet[0] - v * t_meet, meet[1], v, 0.0],
        [meet[0], meet[1] + v * t_meet, v, -np.pi / 2],
        [30.0, c - LANE_OFFSET, 0.0, 0.0],
        [smap.shape[1] - 30.0, c + LANE_OFFSET, 0.0, np.pi],
    ])
    actions = np.zeros((4, STEPS, 2))
    actions[:2, 40:65, 0] = -4.0  # both brake to a stop once clear of the junction
    return smap, _drive(s0, actions), 0.5
