"""Closed-loop multi-agent rollout with periodic guided replanning."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from ..diffusion.context import ContextBatch
from ..diffusion.model import DiffusionModel
from ..dynamics import clamp_actions, rollout
from ..guidance import Guide, GuidanceConfig, SceneBatchGuide, guided_sample
from ..rules import RuleMetricReport, RuleSpec, evaluate_metric
from .context import build_contexts, local_start
from .metrics import failed_agents, realism_deviation
from .scenes import Scene

REPLAN_EVERY = 5
COMPOSITES = ("stopsign_offroad", "waypoint_targetspeed")
SIM_STEPS = 200


class SimulationError(RuntimeError):
    pass


@dataclass
class SimReport:
    scene_id: str
    agent_ids: list[str]
    rules: dict[str, RuleMetricReport]
    real: float
    real_parts: dict[str, float]
    fail: float
    failed: np.ndarray
    states: np.ndarray  # (A, steps + 1, 4) executed world states, scene steps 0..steps
    actions: np.ndarray  # (A, steps, 2)
    replans: int
    feasibility_error: float
    selected: list = field(default_factory=list)  # filtration values per replan

    @property
    def steps(self) -> int:
        return self.actions.shape[1]

    def metric_values(self) -> dict[str, float]:
        out = {}
        for r in self.rules.values():
            for name, v in r.values.items():
                out["h_" + name.replace("_", "")] = v
        return out

    def summary(self) -> dict:
        return {"scene_id": self.scene_id, **self.metric_values(), "real": self.real, "fail": self.fail}

    def to_json(self) -> dict:
        return {
            **self.summary(),
            "real_parts": dict(self.real_parts),
            "failed_agents": [a for a, f in zip(self.agent_ids, self.failed) if f],
            "rules": {k: r.to_json() for k, r in self.rules.items()},
            "steps": self.steps,
            "replans": self.replans,
            "feasibility_error": self.feasibility_error,
        }

    def log_records(self, dt: float = 0.1) -> Iterator[dict]:
        """One record per (agent, executed step): the state before the step and the action taken."""
        for a, aid in enumerate(self.agent_ids):
            for t in range(self.steps):
                x, y, v, th = self.states[a, t]
                yield {"scene": self.scene_id, "agent": aid, "step": t, "time": round(t * dt, 10),
                       "x": x, "y": y, "v": v, "theta": th,
                       "accel": self.actions[a, t, 0], "yaw_rate": self.actions[a, t, 1]}

    def jsonl(self, dt: float = 0.1) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log_records(dt))


def _discharged(spec: RuleSpec, executed: np.ndarray, ids) -> Optional[np.ndarray]:
    """Agents that have already satisfied a one-shot rule on the executed prefix (A, t, 4).

    For composites this concerns the waypoint or stop part only (the first term).
    """
    p = spec.params
    if spec.kind in ("goal_waypoint", "waypoint_targetspeed"):
        goals = np.array([p["goal"][i] for i in ids], float) if isinstance(p["goal"], dict) \
            else np.tile(np.asarray(p["goal"], float), (len(ids), 1))
        d = np.linalg.norm(executed[..., :2] - goals[:, None], axis=-1)
        return (d < p["eps"]).any(axis=1)
    if spec.kind in ("stop_sign", "stopsign_offroad"):
        box = np.array([p["box"][i] for i in ids], float) if isinstance(p["box"], dict) \
            else np.tile(np.asarray(p["box"], float), (len(ids), 1))
        inside = (np.abs(executed[..., 0] - box[:, None, 0]) < box[:, None, 2]) & \
                 (np.abs(executed[..., 1] - box[:, None, 1]) < box[:, None, 3])
        ok = inside & (executed[..., 2] < p["eps_v"])
        run = int(p["m"]) + 1
        if ok.shape[1] < run:
            return np.zeros(len(ids), bool)
        windows = np.lib.stride_tricks.sliding_window_view(ok, run, axis=1)
        return windows.all(axis=-1).any(axis=1)
    return None


def _check_model(model: DiffusionModel, scene: Scene, replan_every: int) -> None:
    if model is None:
        raise SimulationError("closed-loop simulation needs a trained model (or replay mode)")
    if abs(model.dt - scene.dt) > 1e-12:
        raise SimulationError(f"model dt {model.dt} does not match scene dt {scene.dt}")
    if model.arch.T < replan_every:
        raise SimulationError(f"model horizon {model.arch.T} shorter than the replan interval {replan_every}")
    if scene.history < model.arch.H:
        raise SimulationError(f"scene history {scene.history} shorter than the model's {model.arch.H}")


def simulate(
    scene: Scene,
    model: Optional[DiffusionModel],
    cfg: GuidanceConfig,
    seed: int,
    rules: Optional[list[RuleSpec]] = None,
    steps: int = SIM_STEPS,
    replan_every: int = REPLAN_EVERY,
    replay: bool = False,
    hook: Optional[Callable] = None,
    discharge: bool = True,
) -> SimReport:
    """Roll every agent of ``scene`` forward for ``steps`` steps, replanning every ``replan_every``.

    ``hook(replan, k, actions, states, s0)`` observes every intermediate sample of every
    replan (physical actions, agent-frame states and the start states they roll out from).
    Replay mode executes the logged actions and needs no model.
    """
    return simulate_many([scene], model, cfg, seed, None if rules is None else [rules], steps, replan_every,
                         replay, hook, discharge)[0]


def simulate_many(
    scenes: list[Scene],
    model: Optional[DiffusionModel],
    cfg: GuidanceConfig,
    seed: int,
    rules: Optional[list[list[RuleSpec]]] = None,
    steps: int = SIM_STEPS,
    replan_every: int = REPLAN_EVERY,
    replay: bool = False,
    hook: Optional[Callable] = None,
    discharge: bool = True,
) -> list[SimReport]:
    """Simulate several scenes in lockstep so each diffusion step is one batched network call.

    Scenes never interact: every scene has its own guide and its own filtration.
    Results depend on the batch composition only through the shared noise stream.
    """
    rules = [list(sc.rules) for sc in scenes] if rules is None else [list(r) for r in rules]
    if len(rules) != len(scenes):
        raise SimulationError(f"{len(rules)} rule lists for {len(scenes)} scenes")
    if not replay:
        for sc in scenes:
            _check_model(model, sc, replan_every)
    for sc in scenes:
        if sc.actions.shape[1] < sc.history + steps:
            raise SimulationError(f"{sc.scene_id}: log covers fewer than {steps} simulated steps")
    H = None if replay else model.arch.H
    rng = np.random.default_rng(seed)
    hists = []
    for sc in scenes:
        h = np.empty((len(sc.agents), sc.history + 1 + steps, 4))
        h[:, : sc.history + 1] = sc.states[:, : sc.history + 1]
        hists.append(h)
    executed = [np.empty((len(sc.agents), steps, 2)) for sc in scenes]
    selected = [[] for _ in scenes]
    use_guide = any(rules) and (cfg.guidance_enabled or cfg.filtration_enabled)
    replans = 0
    t = 0
    while t < steps:
        n = min(replan_every, steps - t)
        current = [h[:, sc.history + t] for sc, h in zip(scenes, hists)]
        if replay:
            plans = [sc.actions[:, sc.log_index(t) : sc.log_index(t) + n] for sc in scenes]
        else:
            ctx = [build_contexts(sc.map, h[:, sc.history + t - H : sc.history + t + 1], model.arch.M,
                                  model.arch.map_size) for sc, h in zip(scenes, hists)]
            ctx = ContextBatch(*(np.concatenate([getattr(c, f) for c in ctx]) for f in ("raster", "past", "mask")))
            guide = None
            if use_guide:
                guides = []
                for sc, h, cur, rs in zip(scenes, hists, current, rules):
                    active = {}
                    if discharge and t > 0:
                        for i, spec in enumerate(rs):
                            done = _discharged(spec, h[:, sc.history + 1 : sc.history + t + 1], sc.agent_ids)
                            if done is not None and done.any():
                                active[(i, 0) if spec.kind in COMPOSITES else i] = ~done
                    guides.append(Guide(rs, sc.agent_ids, cur, model.normalizer, cfg.n_samples, t_start=t + 1,
                                        T=model.arch.T, dt=sc.dt, temperature=cfg.temperature,
                                        offroad_field=sc.map.sdf, radii=sc.radii, active=active))
                guide = guides[0] if len(guides) == 1 else SceneBatchGuide(guides)
            s0_local = local_start(np.concatenate(current))
            inner = None
            if hook is not None:
                rows = np.repeat(s0_local, cfg.n_samples, axis=0)
                inner = lambda k, a, s, r=replans: hook(r, k, model.normalizer.denorm_actions(a), s, rows)  # noqa: E731
            res = guided_sample(model, ctx, s0_local, guide, cfg, rng, inner)
            plans, rows = [], 0
            for i, sc in enumerate(scenes):
                A = len(sc.agents)
                plans.append(res.actions[rows : rows + A, :n])
                rows += A
            _split_selected(res, guide, scenes, selected)
        for i, sc in enumerate(scenes):
            plan = clamp_actions(current[i], plans[i], sc.dt)
            hists[i][:, sc.history + t + 1 : sc.history + t + n + 1] = rollout(current[i], plan, sc.dt)
            executed[i][:, t : t + n] = plan
        replans += 1
        t += n
    reports = []
    for sc, h, act, rs, sel in zip(scenes, hists, executed, rules, selected):
        states = h[:, sc.history :]
        feas = float(np.abs(rollout(states[:, 0], act, sc.dt) - states[:, 1:]).max())
        reports.append(evaluate_rollout(sc, states, act, rs, replans, feas, sel))
    return reports


def _split_selected(res, guide, scenes, selected) -> None:
    """Record each scene's filtration values for this replan."""
    if guide is None:
        for sel in selected:
            sel.append([])
        return
    guides = guide.guides if isinstance(guide, SceneBatchGuide) else [guide]
    row = 0
    for g, sc, sel in zip(guides, scenes, selected):
        k = 1 if g.joint else len(sc.agents)
        sel.append(res.selected[row : row + k].tolist())
        row += k


def evaluate_rollout(scene: Scene, states, actions, rules, replans: int = 0, feasibility_error: float = 0.0,
                     selected=None) -> SimReport:
    """Rule metrics, realism and failure for executed states covering scene steps 0..steps."""
    ids = scene.agent_ids
    steps = actions.shape[1]
    reports = {}
    for spec in rules:
        key = spec.kind if spec.kind not in reports else f"{spec.kind}_{len(reports)}"
        reports[key] = evaluate_metric(spec, states[:, 1:], ids, scene.map.sdf, scene.radii, t_start=1)
    gt = scene.states[:, scene.log_index(0) : scene.log_index(steps) + 1]
    real, parts = realism_deviation(states, gt, scene.dt)
    failed = failed_agents(states, scene.map, scene.radii)
    return SimReport(scene.scene_id, ids, reports, real, parts, float(failed.mean()), failed, states,
                     actions, replans, feasibility_error, selected or [])
