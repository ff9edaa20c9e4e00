"""Procedural scenes: lane-following traffic producing ground-truth logs.

A scene log covers ``history`` steps before the simulation start, the
simulated span and one planning horizon after it, so every replan in the
closed loop (and every training window) has a full future to compare with.
Log index ``history`` is scene step 0.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from ..diffusion.container import atomic_write_bytes
from ..diffusion.context import ContextBatch
from ..diffusion.train import TrainingData
from ..dynamics import DT, MAX_ACCEL, MAX_YAWRATE, clamp_actions, rollout, step, wrap_angle
from ..rules import RuleSpec, evaluate_metric
from .context import NEIGHBOURS, agent_context, local_start
from .maps import ARCHETYPES, SceneMap, build_map

log = logging.getLogger(__name__)

SCENE_FORMAT = "ctg-scene/1"


class SceneGenerationError(RuntimeError):
    pass


# ------------------------------------------------------------------ routes


class Route:
    """Polyline with arc-length parametrisation."""

    def __init__(self, pts: np.ndarray):
        self.pts = np.asarray(pts, float)
        seg = np.diff(self.pts, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.s[-1])

    def point(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        k = min(int(np.searchsorted(self.s, s, side="right")) - 1, len(self.seg_len) - 1)
        u = (s - self.s[k]) / self.seg_len[k]
        return self.pts[k] + u * (self.pts[k + 1] - self.pts[k])

    def heading(self, s: float) -> float:
        k = min(max(int(np.searchsorted(self.s, s, side="right")) - 1, 0), len(self.seg_len) - 1)
        d = self.pts[k + 1] - self.pts[k]
        return float(np.arctan2(d[1], d[0]))

    def project(self, p, lo: float, hi: float) -> tuple[float, float]:
        """Arc length and lateral distance of ``p`` projected on the part of the route in [lo, hi]."""
        k0 = max(int(np.searchsorted(self.s, lo, side="right")) - 1, 0)
        k1 = min(int(np.searchsorted(self.s, hi, side="left")), len(self.seg_len))
        if k1 <= k0:
            k1 = min(k0 + 1, len(self.seg_len))
        a = self.pts[k0:k1]
        d = self.pts[k0 + 1 : k1 + 1] - a
        L = self.seg_len[k0:k1]
        u = np.clip(((p[0] - a[:, 0]) * d[:, 0] + (p[1] - a[:, 1]) * d[:, 1]) / L**2, 0.0, 1.0)
        q = a + u[:, None] * d
        dist = np.hypot(p[0] - q[:, 0], p[1] - q[:, 1])
        b = int(np.argmin(dist))
        return float(self.s[k0 + b] + u[b] * L[b]), float(dist[b])


# ------------------------------------------------------------------ agents and controller


@dataclass
class AgentSpec:
    id: str
    length: float
    width: float
    route: int
    v_des: float

    @property
    def radius(self) -> float:
        # footprint disc used for collision checks
        return self.length / 2


@dataclass
class DriverParams:
    a_max: float = 1.5
    b: float = 2.0
    headway: float = 1.5
    jam: float = 2.5  # bumper-to-bumper standstill gap
    jitter: float = 0.3  # OU noise scale on acceleration, m/s^2
    ou_rate: float = 1.0
    steer_jitter: float = 0.1  # OU noise scale on yaw rate, rad/s; gives the logs lateral wander to recover from
    steer_rate: float = 0.5
    stop_hold: int = 10  # steps spent at standstill on a stop line


class LaneFollower:
    """Pure-pursuit steering and IDM car following for every agent of a scene."""

    def __init__(self, smap: SceneMap, agents: list[AgentSpec], s_init, rng, params: DriverParams = DriverParams()):
        self.routes = [Route(r) for r in smap.routes]
        self.agents = agents
        self.p = params
        self.rng = rng
        self.s = np.array(s_init, float)
        self.ou = np.zeros(len(agents))
        self.ou_yaw = np.zeros(len(agents))
        self.stops = {}
        for a, spec in enumerate(agents):
            lines = [sl for r, sl in smap.stop_lines if r == spec.route and sl > self.s[a] + 3.0]
            self.stops[a] = {"s": min(lines) if lines else None, "held": 0}

    def _idm(self, v, v0, leaders):
        p = self.p
        free = 1.0 - (v / v0) ** 4
        inter = 0.0
        for gap, v_lead, jam in leaders:
            s_star = jam + max(0.0, v * p.headway + v * (v - v_lead) / (2 * np.sqrt(p.a_max * p.b)))
            inter = max(inter, (s_star / max(gap, 0.1)) ** 2)
        return p.a_max * (free - inter)

    def actions(self, states: np.ndarray) -> np.ndarray:
        out = np.zeros((len(self.agents), 2))
        for a, spec in enumerate(self.agents):
            x, y, v, th = states[a]
            route = self.routes[spec.route]
            self.s[a], _ = route.project((x, y), self.s[a] - 3.0, self.s[a] + 15.0)
            s = self.s[a]
            # pure pursuit
            Ld = max(5.0, 0.8 * v + 3.0)
            tx, ty = route.point(s + Ld)
            alpha = wrap_angle(np.arctan2(ty - y, tx - x) - th)
            yaw = np.clip(2.0 * max(v, 0.5) * np.sin(alpha) / Ld, -0.8 * MAX_YAWRATE, 0.8 * MAX_YAWRATE)
            # leaders: other vehicles on this route ahead, the route end, a stop line
            leaders = [(route.length - 5.0 - s, 0.0, 0.5)]
            for b, other in enumerate(self.agents):
                if b == a:
                    continue
                sb, lat = route.project(states[b, :2], s + 0.5, s + 60.0)
                if lat < 3.0 and sb > s + 0.5:
                    leaders.append((sb - s - (spec.length + other.length) / 2, states[b, 2], self.p.jam))
            stop = self.stops[a]
            if stop["s"] is not None:
                gap = stop["s"] - s - spec.length / 2
                if gap < 3.0 and v < 0.2:
                    stop["held"] += 1
                if stop["held"] >= self.p.stop_hold:
                    stop["s"] = None
                else:
                    leaders.append((gap, 0.0, 0.5))
            acc = self._idm(v, spec.v_des, leaders)
            self.ou[a] += -self.p.ou_rate * self.ou[a] * DT + self.p.jitter * np.sqrt(DT) * self.rng.standard_normal()
            self.ou_yaw[a] += (-self.p.steer_rate * self.ou_yaw[a] * DT
                               + self.p.steer_jitter * np.sqrt(DT) * self.rng.standard_normal())
            yaw = np.clip(yaw + self.ou_yaw[a], -MAX_YAWRATE, MAX_YAWRATE)
            out[a] = (np.clip(acc + self.ou[a], -MAX_ACCEL, MAX_ACCEL), yaw)
        return out


# ------------------------------------------------------------------ scenes


@dataclass
class SceneConfig:
    n_scenes: int = 20
    archetypes: tuple = ("straight", "curve", "intersection")
    density: int = 3  # agents besides the target
    history: int = 10
    sim_steps: int = 200
    horizon: int = 50
    dt: float = DT
    v_des: tuple = (2.0, 8.0)
    min_gap: float = 15.0
    spawn_retries: int = 200
    log_retries: int = 20
    rules: tuple = ()

    def __post_init__(self) -> None:
        self.archetypes = tuple(self.archetypes)
        self.rules = tuple(self.rules)
        self.v_des = tuple(self.v_des)
        if self.n_scenes < 0 or self.density < 0:
            raise ValueError("n_scenes and density must be >= 0")
        for a in self.archetypes:
            if a not in ARCHETYPES:
                raise ValueError(f"unknown map archetype {a!r}")

    @property
    def log_steps(self) -> int:
        return self.history + self.sim_steps + self.horizon


@dataclass
class Scene:
    scene_id: str
    map: SceneMap
    agents: list[AgentSpec]
    states: np.ndarray  # (A, L + 1, 4) ground-truth log
    actions: np.ndarray  # (A, L, 2)
    history: int
    dt: float = DT
    rules: list[RuleSpec] = field(default_factory=list)
    seed: int = 0

    @property
    def agent_ids(self) -> list[str]:
        return [a.id for a in self.agents]

    @property
    def radii(self) -> np.ndarray:
        return np.array([a.radius for a in self.agents])

    def log_index(self, scene_step: int) -> int:
        return self.history + scene_step

    def start_states(self) -> np.ndarray:
        return self.states[:, self.history]

    def speeds(self, first: int, last: int) -> np.ndarray:
        """Logged speeds for scene steps first..last inclusive, (A, n)."""
        return self.states[:, self.log_index(first) : self.log_index(last) + 1, 2]

    def position(self, scene_step: int) -> np.ndarray:
        return self.states[:, min(self.log_index(scene_step), self.states.shape[1] - 1), :2]

    # ------------------------------------------------------------ file format
    def to_json(self) -> dict:
        m = self.map
        return {
            "format": SCENE_FORMAT,
            "scene_id": self.scene_id,
            "seed": self.seed,
            "dt": self.dt,
            "history": self.history,
            "map": {
                "archetype": m.archetype,
                "cell": m.cell,
                "drivable": rle_encode(m.drivable),
                "lanes": [l.tolist() for l in m.lanes],
                "routes": [r.tolist() for r in m.routes],
                "stop_boxes": [list(b) for b in m.stop_boxes],
                "stop_lines": [list(s) for s in m.stop_lines],
            },
            "agents": [
                {"id": a.id, "length": a.length, "width": a.width, "route": a.route, "v_des": a.v_des}
                for a in self.agents
            ],
            "log": {"states": self.states.tolist(), "actions": self.actions.tolist()},
            "rules": [r.to_json() for r in self.rules],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        if d.get("format") != SCENE_FORMAT:
            raise ValueError(f"not a scene file (format {d.get('format')!r})")
        m = d["map"]
        smap = _cached_map(m["archetype"], rle_decode(m["drivable"]).tobytes(), m["drivable"]["shape"][0],
                           m["drivable"]["shape"][1], json.dumps([m["lanes"], m["routes"], m["stop_boxes"],
                                                                  m["stop_lines"]]), m["cell"])
        agents = [AgentSpec(a["id"], a["length"], a["width"], a["route"], a["v_des"]) for a in d["agents"]]
        A = len(agents)
        states = np.array(d["log"]["states"], float).reshape(A, -1, 4)
        actions = np.array(d["log"]["actions"], float).reshape(A, -1, 2)
        return cls(d["scene_id"], smap, agents, states, actions, d["history"], d["dt"],
                   [RuleSpec.from_json(r) for r in d["rules"]], d["seed"])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        atomic_write_bytes(Path(path), self.dumps().encode())

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_json(json.loads(Path(path).read_text()))


@lru_cache(maxsize=16)
def _cached_map(archetype, grid_bytes, h, w, geometry, cell) -> SceneMap:
    # scenes on the same map share one SceneMap (distance field and direction field are costly)
    lanes, routes, boxes, lines = json.loads(geometry)
    drivable = np.frombuffer(grid_bytes, bool).reshape(h, w).copy()
    return SceneMap(archetype, drivable, [np.array(l, float) for l in lanes], [np.array(r, float) for r in routes],
                    [tuple(b) for b in boxes], [(int(r), float(s)) for r, s in lines], cell)


def rle_encode(grid: np.ndarray) -> dict:
    flat = np.asarray(grid, bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    return {"shape": list(grid.shape), "first": int(flat[0]) if flat.size else 0, "runs": np.diff(bounds).tolist()}


def rle_decode(d: dict) -> np.ndarray:
    runs = np.asarray(d["runs"], int)
    vals = (np.arange(runs.size) + d["first"]) % 2
    flat = np.repeat(vals.astype(bool), runs)
    shape = tuple(d["shape"])
    if flat.size != int(np.prod(shape)):
        raise ValueError(f"run lengths cover {flat.size} cells, grid has {int(np.prod(shape))}")
    return flat.reshape(shape)


@lru_cache(maxsize=8)
def map_for(archetype: str) -> SceneMap:
    return build_map(archetype)


def _spawn(smap: SceneMap, cfg: SceneConfig, rng) -> tuple[list[AgentSpec], np.ndarray, np.ndarray]:
    routes = [Route(r) for r in smap.routes]
    n = cfg.density + 1
    for _ in range(cfg.spawn_retries):
        agents, s_init, st = [], [], []
        ok = True
        for k in range(n):
            r = int(rng.integers(len(routes)))
            route = routes[r]
            if smap.archetype == "curve":
                s = float(rng.uniform(0.0, route.length / 3))
            else:
                s = float(rng.uniform(10.0, 0.3 * route.length))
            p = route.point(s)
            th = route.heading(s)
            for q in st:
                d = np.hypot(*(p - q[:2]))
                same_way = np.cos(th - q[3]) > 0
                if d < (cfg.min_gap if same_way else 6.0):
                    ok = False
                    break
            if not ok:
                break
            v_des = float(rng.uniform(*cfg.v_des))
            v0 = float(rng.uniform(0.85, 1.0) * v_des)
            agents.append(AgentSpec(str(k), 4.5, 1.8, r, v_des))
            s_init.append(s)
            st.append(np.array([p[0], p[1], v0, th]))
        if ok:
            return agents, np.array(s_init), np.array(st)
    raise SceneGenerationError(f"could not place {n} agents on a {smap.archetype} map after {cfg.spawn_retries} tries")


def _drive(smap, agents, s_init, x0, steps, rng) -> tuple[np.ndarray, np.ndarray]:
    ctl = LaneFollower(smap, agents, s_init, rng)
    A = len(agents)
    states = np.empty((A, steps + 1, 4))
    actions = np.empty((A, steps, 2))
    states[:, 0] = x0
    for t in range(steps):
        a = clamp_actions(states[:, t], ctl.actions(states[:, t])[:, None, :])[:, 0]
        actions[:, t] = a
        states[:, t + 1] = step(states[:, t], a)
    return states, actions


def log_is_clean(smap: SceneMap, agents: list[AgentSpec], states: np.ndarray) -> bool:
    """No collision and no departure from the road anywhere in the log (checked with the rule metrics)."""
    ids = [a.id for a in agents]
    radii = np.array([a.radius for a in agents])
    col = evaluate_metric(RuleSpec("no_collision", {}), states, ids, radii=radii).values["no_collision"]
    off = evaluate_metric(RuleSpec("no_offroad", {}), states, ids, offroad_field=smap.sdf).values["no_offroad"]
    return col == 0 and off == 0 and bool(smap.is_drivable(states[..., 0], states[..., 1]).all())


def generate_scene(cfg: SceneConfig, archetype: str, seed, scene_id: str) -> Scene:
    smap = map_for(archetype)
    rng = np.random.default_rng(seed)
    for attempt in range(cfg.log_retries):
        agents, s_init, x0 = _spawn(smap, cfg, rng)
        states, actions = _drive(smap, agents, s_init, x0, cfg.log_steps, rng)
        if log_is_clean(smap, agents, states):
            scene = Scene(scene_id, smap, agents, states, actions, cfg.history, cfg.dt, [], int(np.asarray(seed).ravel()[0]))
            scene.rules = [recipe(name, scene) for name in cfg.rules]
            return scene
        log.debug("scene %s attempt %d produced a collision or departure; redrawing", scene_id, attempt)
    raise SceneGenerationError(f"scene {scene_id}: no clean log after {cfg.log_retries} attempts (density too high?)")


def generate_scenes(cfg: SceneConfig, seed: int = 0) -> list[Scene]:
    scenes = []
    for i in range(cfg.n_scenes):
        arch = cfg.archetypes[i % len(cfg.archetypes)]
        scenes.append(generate_scene(cfg, arch, [seed, i], f"scene_{i:04d}"))
    return scenes


# ------------------------------------------------------------------ rule recipes


def _moving_speeds(scene: Scene, first: int, last: int) -> np.ndarray:
    v = scene.speeds(first, last)
    moving = v.mean(axis=1) > 0.5
    return v[moving] if moving.any() else v


def _target_speeds(scene: Scene, scale: float) -> dict:
    last = scene.states.shape[1] - 1 - scene.history
    v = scene.speeds(0, last)
    return {a: (scale * v[i]).tolist() for i, a in enumerate(scene.agent_ids)}


def _goals(scene: Scene, seconds: float) -> dict:
    pos = scene.position(int(round(seconds / scene.dt)))
    return {a: pos[i].tolist() for i, a in enumerate(scene.agent_ids)}


def _boxes(scene: Scene, seconds: float = 5.0, half: float = 10.0) -> dict:
    pos = scene.position(int(round(seconds / scene.dt)))
    return {a: [float(pos[i, 0]), float(pos[i, 1]), half, half] for i, a in enumerate(scene.agent_ids)}


def recipe(kind: str, scene: Scene, sim_steps: int = 200) -> RuleSpec:
    """Rule instance for a scene derived from its ground-truth log."""
    if kind == "speed_limit":
        return RuleSpec(kind, {"v_limit": float(np.quantile(_moving_speeds(scene, 0, sim_steps), 0.75))})
    if kind == "target_speed":
        return RuleSpec(kind, {"v_target": _target_speeds(scene, 0.5)})
    if kind == "goal_waypoint":
        return RuleSpec(kind, {"goal": _goals(scene, 15.0)})
    if kind == "stop_sign":
        return RuleSpec(kind, {"box": _boxes(scene)})
    if kind in ("no_offroad", "no_collision"):
        return RuleSpec(kind, {})
    if kind == "waypoint_targetspeed":
        return RuleSpec(kind, {"goal": _goals(scene, 10.0), "v_target": _target_speeds(scene, 1.0)})
    if kind == "stopsign_offroad":
        return RuleSpec(kind, {"box": _boxes(scene)})
    raise ValueError(f"no recipe for rule kind {kind!r}")


# ------------------------------------------------------------------ training export


def training_examples(scenes, T: int = 50, M: int = NEIGHBOURS, stride: int = 10) -> TrainingData:
    """Agent-frame (context, s0, future) windows cut from the ground-truth logs."""
    ctxs, s0s, acts, sts = [], [], [], []
    for sc in scenes:
        H = sc.history
        L = sc.actions.shape[1]
        for i in range(H, L - T + 1, stride):
            hist = sc.states[:, i - H : i + 1]
            s0 = local_start(sc.states[:, i])
            for a in range(len(sc.agents)):
                ctxs.append(agent_context(sc.map, hist, a, M))
                act = sc.actions[a, i : i + T]
                s0s.append(s0[a])
                acts.append(act)
                sts.append(rollout(s0[a], act, sc.dt))
    if not ctxs:
        raise SceneGenerationError("no training windows: logs shorter than history + horizon")
    return TrainingData(ContextBatch.stack(ctxs), np.array(s0s), np.array(acts), np.array(sts))


def save_scenes(scenes, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for sc in scenes:
        p = directory / f"{sc.scene_id}.json"
        sc.save(p)
        paths.append(p)
    return paths


def load_scenes(directory) -> list[Scene]:
    paths = sorted(Path(directory).glob("scene_*.json"))
    if not paths:
        raise FileNotFoundError(f"no scene files in {directory}")
    return [Scene.load(p) for p in paths]
