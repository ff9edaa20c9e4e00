"""Traffic rules as STL formulas plus their evaluation metrics.

Rule specs are plain JSON objects ``{"kind": ..., "params": {...}}``. Per-agent
parameters are dicts keyed by agent id (as a string); time-varying ones are
lists indexed by scene step (index 0 is the simulation start state).

Kinds and parameters (defaults in brackets):

=====================  ===============================================================
speed_limit            v_limit (m/s, scalar or per agent), eps [0.0]
target_speed           v_target (per agent, list over scene steps), eps [0.5]
no_collision           eps (m) [sum of the two circumscribed radii]
no_offroad             eps (m) [0.5, half a map cell]
goal_waypoint          goal (per agent, [x, y]), eps [2.0]
stop_sign              box (per agent, [cx, cy, half_w, half_h]), m (steps) [5], eps_v [0.1]
stopsign_offroad       stop_sign params + offroad_eps [0.5]
waypoint_targetspeed   goal_waypoint params + v_target, target_eps [0.5]
=====================  ===============================================================
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .stl import ast as A
from .stl.signal import DistanceField

KINDS = (
    "speed_limit",
    "target_speed",
    "no_collision",
    "no_offroad",
    "goal_waypoint",
    "stop_sign",
    "stopsign_offroad",
    "waypoint_targetspeed",
)

DEFAULTS: dict[str, dict[str, Any]] = {
    "speed_limit": {"eps": 0.0},
    "target_speed": {"eps": 0.5},
    "no_collision": {"eps": None},
    "no_offroad": {"eps": 0.5},
    "goal_waypoint": {"eps": 2.0},
    "stop_sign": {"m": 5, "eps_v": 0.1},
    "stopsign_offroad": {"m": 5, "eps_v": 0.1, "offroad_eps": 0.5},
    "waypoint_targetspeed": {"eps": 2.0, "target_eps": 0.5},
}

REQUIRED = {
    "speed_limit": ("v_limit",),
    "target_speed": ("v_target",),
    "no_collision": (),
    "no_offroad": (),
    "goal_waypoint": ("goal",),
    "stop_sign": ("box",),
    "stopsign_offroad": ("box",),
    "waypoint_targetspeed": ("goal", "v_target"),
}

# metric names reported by each kind
COMPONENTS = {
    "speed_limit": ("speed_limit",),
    "target_speed": ("target_speed",),
    "no_collision": ("no_collision",),
    "no_offroad": ("no_offroad",),
    "goal_waypoint": ("goal_waypoint",),
    "stop_sign": ("stop_sign",),
    "stopsign_offroad": ("stop_sign", "no_offroad"),
    "waypoint_targetspeed": ("goal_waypoint", "target_speed"),
}


class RuleError(ValueError):
    pass


class MissingAgentError(RuleError):
    pass


@dataclass(frozen=True)
class RuleSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise RuleError(f"unknown rule kind {self.kind!r}; expected one of {KINDS}")
        merged = {**DEFAULTS[self.kind], **self.params}
        for key in REQUIRED[self.kind]:
            if key not in merged:
                raise RuleError(f"{self.kind}: missing parameter {key!r}")
        for key, val in merged.items():
            if key in ("v_limit", "v_target", "goal", "box") or val is None:
                _check_finite(self.kind, key, val)
                continue
            if not np.isfinite(val):
                raise RuleError(f"{self.kind}: parameter {key} must be finite")
            if key != "eps" or self.kind != "speed_limit":
                if val <= 0:
                    raise RuleError(f"{self.kind}: threshold {key} must be > 0, got {val}")
        object.__setattr__(self, "params", merged)

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(self.params)}

    @classmethod
    def from_json(cls, obj) -> "RuleSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        if set(obj) - {"kind", "params"}:
            raise RuleError(f"unexpected keys in rule spec: {sorted(set(obj) - {'kind', 'params'})}")
        return cls(obj["kind"], dict(obj.get("params", {})))

    @property
    def components(self) -> tuple[str, ...]:
        return COMPONENTS[self.kind]

    @property
    def scene_level(self) -> bool:
        return self.kind == "no_collision"

    def agent_ids(self) -> Optional[list[str]]:
        """Agents named by per-agent parameters, or None if the rule is agent-agnostic."""
        for key in ("v_target", "goal", "box", "v_limit"):
            val = self.params.get(key)
            if isinstance(val, dict):
                return list(val)
        return None


def _check_finite(kind, key, val) -> None:
    if val is None:
        return
    items = val.values() if isinstance(val, dict) else [val]
    for v in items:
        if not np.all(np.isfinite(np.asarray(v, float))):
            raise RuleError(f"{kind}: parameter {key} must be finite")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


# ------------------------------------------------------------------ formulas


@dataclass(frozen=True)
class CollisionGuide:
    """Scene-level rule: every pair keeps centre distance above its threshold.

    ``eps`` overrides the per-pair threshold (sum of circumscribed radii).
    ``formula`` is the per-agent view, used when all thresholds coincide.
    """

    eps: Optional[float] = None

    def formula(self, eps: float) -> A.Formula:
        return A.Always(A.Pred(A.Channel("nearest_agent"), ">", A.Num(float(eps))))


V = A.Channel("v")


def _speed_limit(p) -> A.Formula:
    limit = A.Num(float(p["v_limit"])) if np.ndim(p["v_limit"]) == 0 and not isinstance(p["v_limit"], dict) \
        else A.Const("v_limit")
    return A.Always(A.Pred(A.BinOp("-", V, limit), "<", A.Num(float(p["eps"]))))


def _target_speed(eps) -> A.Formula:
    return A.Always(A.Pred(A.Abs(A.BinOp("-", V, A.Const("v_target"))), "<", A.Num(float(eps))))


def _waypoint(eps) -> A.Formula:
    d = A.Dist(A.Channel("x"), A.Channel("y"), A.Const("goal_x"), A.Const("goal_y"))
    return A.Eventually(A.Pred(d, "<", A.Num(float(eps))))


def _offroad(eps) -> A.Formula:
    return A.Always(A.Pred(A.Channel("offroad"), ">", A.Num(float(eps))))


def _stop_sign(m: int, eps_v: float) -> A.Formula:
    inside = A.Pred(A.Channel("in_box"), ">", A.Num(0.0))
    stopped = A.Pred(A.Channel("speed"), "<", A.Num(float(eps_v)))
    hold = A.Always(A.And(inside, stopped), A.Interval(0, int(m)))
    return A.Always(A.Implies(inside, A.Eventually(hold)))


def build_formula(spec: RuleSpec):
    """Per-agent STL formula for ``spec``, or a :class:`CollisionGuide` for no_collision.

    Scene- and agent-specific values enter as named constants (``v_limit``,
    ``v_target``, ``goal_x``/``goal_y``, ``box``, ``offroad_field``) supplied by
    :func:`agent_constants`.
    """
    p = spec.params
    k = spec.kind
    if k == "speed_limit":
        return _speed_limit(p)
    if k == "target_speed":
        return _target_speed(p["eps"])
    if k == "no_collision":
        return CollisionGuide(p["eps"])
    if k == "no_offroad":
        return _offroad(p["eps"])
    if k == "goal_waypoint":
        return _waypoint(p["eps"])
    if k == "stop_sign":
        return _stop_sign(p["m"], p["eps_v"])
    if k == "stopsign_offroad":
        return A.And(_stop_sign(p["m"], p["eps_v"]), _offroad(p["offroad_eps"]))
    return A.And(_waypoint(p["eps"]), _target_speed(p["target_eps"]))


def guide_terms(spec: RuleSpec) -> list:
    """Formulas whose robustness values are summed in a guide.

    A composite is still the conjunction of its parts for checking and metrics,
    but a guide sums the parts so that each keeps its own gradient instead of
    the soft-min handing nearly all weight to the worse one.
    """
    f = build_formula(spec)
    if spec.kind in ("stopsign_offroad", "waypoint_targetspeed"):
        return [f.left, f.right]
    return [f]


def _per_agent(spec: RuleSpec, key: str, agent_ids) -> list:
    val = spec.params[key]
    if not isinstance(val, dict):
        return [val] * len(agent_ids)
    try:
        return [val[str(a)] for a in agent_ids]
    except KeyError as e:
        raise MissingAgentError(f"{spec.kind}: no {key} for agent {e.args[0]}") from None


def agent_constants(
    spec: RuleSpec,
    agent_ids,
    t_start: int = 0,
    T: Optional[int] = None,
    offroad_field: Optional[DistanceField] = None,
) -> dict[str, Any]:
    """Batched constants (leading axis = agents) for evaluating ``build_formula(spec)``.

    Time-varying parameters are sliced to scene steps ``t_start .. t_start + T - 1``;
    steps past the end of the recorded parameter repeat its last value.
    """
    p = spec.params
    k = spec.kind
    out: dict[str, Any] = {}
    if k == "speed_limit" and isinstance(p["v_limit"], dict):
        out["v_limit"] = np.array(_per_agent(spec, "v_limit", agent_ids), float)[:, None]
    if "v_target" in p and k in ("target_speed", "waypoint_targetspeed"):
        if T is None:
            raise RuleError("target speeds need the horizon length T")
        rows = []
        for tr in _per_agent(spec, "v_target", agent_ids):
            tr = np.asarray(tr, float).reshape(-1)
            idx = np.minimum(np.arange(t_start, t_start + T), tr.size - 1)
            rows.append(tr[idx])
        out["v_target"] = np.array(rows)
    if "goal" in p and k in ("goal_waypoint", "waypoint_targetspeed"):
        goals = np.array(_per_agent(spec, "goal", agent_ids), float).reshape(-1, 2)
        out["goal_x"] = goals[:, :1]
        out["goal_y"] = goals[:, 1:]
    if k in ("stop_sign", "stopsign_offroad"):
        out["box"] = np.array(_per_agent(spec, "box", agent_ids), float).reshape(-1, 4)
    if k in ("no_offroad", "stopsign_offroad"):
        if offroad_field is None:
            raise RuleError(f"{k}: needs the map distance field")
        out["offroad_field"] = offroad_field
    return out


# ------------------------------------------------------------------ metrics


@dataclass
class RuleMetricReport:
    """Violation values h for one rule on one scene rollout.

    ``values`` maps each component metric to its scene total; ``per_agent``
    maps it to the per-agent contributions (collision counts each agent's
    colliding steps, so per-agent values sum to twice the pair count).
    """

    kind: str
    values: dict[str, float]
    per_agent: dict[str, np.ndarray]
    agent_ids: list[str]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "values": dict(self.values),
            "per_agent": {k: v.tolist() for k, v in self.per_agent.items()},
            "agent_ids": list(self.agent_ids),
        }


def _collision_eps(spec: RuleSpec, radii, n: int) -> np.ndarray:
    if spec.params.get("eps") is not None:
        return np.full((n, n), float(spec.params["eps"]))
    if radii is None:
        raise RuleError("no_collision: pass footprint radii or an explicit eps")
    r = np.asarray(radii, float)
    return r[:, None] + r[None, :]


def pair_distances(states: np.ndarray) -> np.ndarray:
    """Centre distances (A, A, T)."""
    pos = states[..., :2]
    return np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)


def offroad_distance(states: np.ndarray, offroad_field: DistanceField) -> np.ndarray:
    """Interpolated distance to the nearest non-drivable cell centre, (A, T)."""
    val, _, _ = offroad_field.sample(states[..., 0], states[..., 1])
    return val


def _h(name: str, spec: RuleSpec, states, agent_ids, t_start, offroad_field, radii) -> np.ndarray:
    p = spec.params
    A_, T = states.shape[:2]
    v = states[..., 2]
    if name == "speed_limit":
        if isinstance(p["v_limit"], dict):
            lim = np.array(_per_agent(spec, "v_limit", agent_ids), float)[:, None]
        else:
            lim = float(p["v_limit"])
        return np.maximum(0.0, v - lim).sum(axis=1)
    if name == "target_speed":
        vt = agent_constants(RuleSpec("target_speed", {"v_target": p["v_target"]}), agent_ids, t_start, T)["v_target"]
        return np.abs(v - vt).sum(axis=1)
    if name == "goal_waypoint":
        goals = np.array(_per_agent(spec, "goal", agent_ids), float).reshape(-1, 2)
        return np.linalg.norm(states[..., :2] - goals[:, None, :], axis=-1).min(axis=1)
    if name == "stop_sign":
        box = np.array(_per_agent(spec, "box", agent_ids), float).reshape(-1, 4)
        cx, cy, hw, hh = (box[:, i : i + 1] for i in range(4))
        inside = np.minimum(hw - np.abs(states[..., 0] - cx), hh - np.abs(states[..., 1] - cy)) > 0
        speed = np.where(inside, np.abs(v), np.inf).min(axis=1)
        return np.where(np.isfinite(speed), speed, 0.0)
    if name == "no_offroad":
        if offroad_field is None:
            raise RuleError("no_offroad: needs the map distance field")
        eps = p["offroad_eps"] if spec.kind == "stopsign_offroad" else p["eps"]
        return (offroad_distance(states, offroad_field).min(axis=1) <= eps).astype(float)
    if name == "no_collision":
        eps = _collision_eps(spec, radii, A_)
        hit = pair_distances(states) <= eps[..., None]
        hit[np.arange(A_), np.arange(A_)] = False
        return hit.sum(axis=(1, 2)).astype(float)
    raise RuleError(name)


def evaluate_metric(
    spec: RuleSpec,
    states,
    agent_ids=None,
    offroad_field: Optional[DistanceField] = None,
    radii=None,
    t_start: int = 0,
) -> RuleMetricReport:
    """Table-style violation metrics on a rollout ``states`` (A, T, 4).

    ``states[:, j]`` is the world state at scene step ``t_start + j``.
    """
    states = np.asarray(states, float)
    if states.ndim == 2:
        states = states[None]
    ids = [str(a) for a in (agent_ids if agent_ids is not None else range(states.shape[0]))]
    if len(ids) != states.shape[0]:
        raise RuleError(f"{len(ids)} agent ids for {states.shape[0]} trajectories")
    named = spec.agent_ids()
    if named is not None:
        missing = sorted(set(named) - set(ids))
        if missing:
            raise MissingAgentError(f"{spec.kind}: agents {missing} missing from rollout")
    values, per_agent = {}, {}
    for name in spec.components:
        h = _h(name, spec, states, ids, t_start, offroad_field, radii)
        per_agent[name] = h
        # collisions: each unordered pair counted once per step
        values[name] = float(h.sum() / 2 if name == "no_collision" else h.sum())
    return RuleMetricReport(spec.kind, values, per_agent, ids)
