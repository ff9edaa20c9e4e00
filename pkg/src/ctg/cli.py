"""Command-line entry point: gen-data, train, simulate, evaluate, stl-eval.

Every command reads a JSON run config; flags override single keys and the
``CTG_SEED`` environment variable overrides the seed. Exit codes: 0 ok,
1 configuration or input error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .diffusion import (
    ArchConfig,
    CheckpointError,
    DiffusionModel,
    TrainConfig,
    TrainingData,
    TrainingError,
    init_training,
    load_training,
    save_training,
    train,
)
from .diffusion.container import ContainerError, atomic_write_bytes
from .dynamics import step
from .guidance import GuidanceConfig, GuidanceError
from .rules import KINDS, RuleError
from .simworld import (
    SceneConfig,
    SceneGenerationError,
    SimulationError,
    evaluate_rollout,
    generate_scenes,
    load_scenes,
    recipe,
    save_scenes,
    simulate_many,
    training_examples,
)
from .stl import EvaluationError, MissingChannelError, RobustnessConfig, Signal, StlSyntaxError, parse_formula
from .stl.robustness import robustness, robustness_grad

log = logging.getLogger("ctg")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ run config


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Strict):
    output: str = "out"
    scenes: Optional[str] = None  # default <output>/scenes
    dataset: Optional[str] = None  # default <output>/dataset
    checkpoint: Optional[str] = None  # default <output>/model.ckpt


class GenerationConfig(_Strict):
    n_scenes: int = Field(20, ge=0)
    archetypes: list[str] = ["straight", "curve", "intersection"]
    density: int = Field(2, ge=0)
    history: int = Field(10, ge=1)
    sim_steps: int = Field(200, ge=1)
    horizon: int = Field(50, ge=1)
    example_stride: int = Field(10, ge=1)
    shard_size: int = Field(1024, ge=1)


class DiffusionSection(_Strict):
    T: int = 50
    H: int = 10
    M: int = 4
    map_size: int = 32
    width: int = 16
    feat: int = 32
    k_embed: int = 32
    kernel: int = 5
    K: int = Field(100, ge=1)
    steps: int = Field(6000, ge=0)
    batch: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    lambda_s: float = Field(1.0, ge=0)
    ckpt_every: int = Field(0, ge=0)
    log_every: int = Field(100, ge=1)
    resume: bool = False

    def arch(self) -> ArchConfig:
        return ArchConfig(T=self.T, H=self.H, M=self.M, map_size=self.map_size, width=self.width, feat=self.feat,
                          k_embed=self.k_embed, kernel=self.kernel)


class GuidanceSection(_Strict):
    alpha: float = Field(0.05, gt=0)
    inner_steps: int = Field(1, ge=1)
    filtration: int = Field(4, ge=1)
    temperature: float = Field(10.0, gt=0)
    guidance_enabled: bool = True
    filtration_enabled: bool = True

    def build(self) -> GuidanceConfig:
        return GuidanceConfig(**self.model_dump())


class SimulationSection(_Strict):
    steps: int = Field(200, ge=1)
    replan_every: int = Field(5, ge=1)
    replay: bool = False
    lockstep: int = Field(20, ge=1)  # scenes advanced together in one batch
    plots: bool = True


class RunConfig(_Strict):
    seed: int = 0
    workers: int = Field(1, ge=1)
    rules: list[str] = []
    paths: PathsConfig = PathsConfig()
    generation: GenerationConfig = GenerationConfig()
    diffusion: DiffusionSection = DiffusionSection()
    guidance: GuidanceSection = GuidanceSection()
    simulation: SimulationSection = SimulationSection()

    @field_validator("rules")
    @classmethod
    def _known_rules(cls, v):
        for r in v:
            if r not in KINDS:
                raise ValueError(f"unknown rule {r!r}; choose from {list(KINDS)}")
        return v

    # resolved locations -------------------------------------------------
    def _path(self, value: Optional[str], default: str) -> Path:
        return Path(value) if value is not None else Path(self.paths.output) / default

    @property
    def output(self) -> Path:
        return Path(self.paths.output)

    @property
    def scenes_dir(self) -> Path:
        return self._path(self.paths.scenes, "scenes")

    @property
    def dataset_dir(self) -> Path:
        return self._path(self.paths.dataset, "dataset")

    @property
    def checkpoint(self) -> Path:
        return self._path(self.paths.checkpoint, "model.ckpt")


def _set_key(obj: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        obj = obj.setdefault(k, {})
    obj[keys[-1]] = value


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    raw: dict = {}
    base = Path(".")
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        text = p.read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: the top level must be a JSON object")
        base = p.parent
    for k, v in overrides.items():
        if v is not None:
            _set_key(raw, k, v)
    if "CTG_SEED" in os.environ:
        try:
            raw["seed"] = int(os.environ["CTG_SEED"])
        except ValueError:
            raise ConfigError(f"CTG_SEED must be an integer, got {os.environ['CTG_SEED']!r}") from None
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        lines = [f"{'.'.join(str(x) for x in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None
    # relative paths are relative to the config file
    paths = cfg.paths
    for name in ("output", "scenes", "dataset", "checkpoint"):
        v = getattr(paths, name)
        if v is not None and not Path(v).is_absolute():
            setattr(paths, name, str(base / v))
    return cfg


# ------------------------------------------------------------------ output helpers


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_text(path, buf.getvalue())


def scene_svg(scene, report, size: int = 512) -> str:
    """Top-down plot: drivable cells, logged (dashed) and simulated (solid) paths."""
    grid = scene.map.drivable
    h, w = grid.shape
    s = size / max(h, w)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="#1d2a1d"/>', '<g fill="#5a5a5a">']
    for i in range(h):
        row = grid[i]
        edges = np.flatnonzero(np.diff(np.concatenate([[0], row.astype(int), [0]])))
        for a, b in zip(edges[::2], edges[1::2]):
            parts.append(f'<rect x="{a * s:.2f}" y="{(h - 1 - i) * s:.2f}" width="{(b - a) * s:.2f}" height="{s:.2f}"/>')
    parts.append("</g>")
    colours = ["#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6"]

    def pts(xy):
        return " ".join(f"{x * s:.1f},{(h - y) * s:.1f}" for x, y in xy)

    gt = scene.states[:, scene.history : scene.history + report.steps + 1, :2]
    for a in range(len(scene.agents)):
        c = colours[a % len(colours)]
        parts.append(f'<polyline points="{pts(gt[a])}" fill="none" stroke="{c}" stroke-width="1" stroke-dasharray="4 3"/>')
        parts.append(f'<polyline points="{pts(report.states[a, :, :2])}" fill="none" stroke="{c}" stroke-width="2"/>')
        x0, y0 = report.states[a, 0, :2]
        parts.append(f'<circle cx="{x0 * s:.1f}" cy="{(h - y0) * s:.1f}" r="3" fill="{c}"/>')
    parts.append(f'<text x="6" y="16" fill="white" font-size="12">{scene.scene_id} real={report.real:.3f} '
                 f'fail={report.fail:.2f}</text></svg>')
    return "\n".join(parts) + "\n"


def aggregate(reports) -> dict:
    keys = sorted({k for r in reports for k in r.metric_values()})
    out = {k: float(np.mean([r.metric_values().get(k, 0.0) for r in reports])) for k in keys}
    out["real"] = float(np.mean([r.real for r in reports]))
    out["fail"] = float(np.mean([r.fail for r in reports]))
    return out


def write_report(directory: Path, reports, cfg: RunConfig, scenes, plots: bool) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    agg = aggregate(reports)
    _write_json(directory / "report.json", {
        "seed": cfg.seed,
        "rules": cfg.rules,
        "guidance": cfg.guidance.model_dump(),
        "aggregate": agg,
        "scenes": [r.to_json() for r in reports],
    })
    metric_keys = [k for k in agg if k.startswith("h_")]
    _write_csv(directory / "summary.csv", ["rule", "value", "real", "fail"],
               [[k[2:], agg[k], agg["real"], agg["fail"]] for k in metric_keys] or [["none", "", agg["real"], agg["fail"]]])
    _write_csv(directory / "scenes.csv", ["scene_id", *metric_keys, "real", "fail"],
               [[r.scene_id, *[r.metric_values().get(k, 0.0) for k in metric_keys], r.real, r.fail] for r in reports])
    if plots:
        for sc, r in zip(scenes, reports):
            _write_text(directory / "plots" / f"{sc.scene_id}.svg", scene_svg(sc, r))
    return agg


def _rules_for(scene, names):
    return [recipe(n, scene) for n in names] if names else list(scene.rules)


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig) -> int:
    g = cfg.generation
    scfg = SceneConfig(n_scenes=g.n_scenes, archetypes=tuple(g.archetypes), density=g.density, history=g.history,
                       sim_steps=g.sim_steps, horizon=g.horizon, rules=tuple(cfg.rules))
    scenes = generate_scenes(scfg, cfg.seed)
    save_scenes(scenes, cfg.scenes_dir)
    d = cfg.diffusion
    if scenes:
        data = training_examples(scenes, T=d.T, M=d.M, stride=g.example_stride)
        cfg.dataset_dir.mkdir(parents=True, exist_ok=True)
        for old in cfg.dataset_dir.glob("shard_*.ctgd"):
            old.unlink()
        data.save_shards(cfg.dataset_dir, g.shard_size)
        n = len(data)
    else:
        n = 0
    print(f"wrote {len(scenes)} scenes to {cfg.scenes_dir} and {n} training examples to {cfg.dataset_dir}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    d = cfg.diffusion
    data = TrainingData.load_shards(cfg.dataset_dir)
    tcfg = TrainConfig(steps=d.steps, batch=d.batch, lr=d.lr, lambda_s=d.lambda_s, seed=cfg.seed, K=d.K,
                       ckpt_every=d.ckpt_every, log_every=d.log_every, arch=d.arch())
    loss_csv = cfg.output / "loss.csv"
    previous = []
    if d.resume and cfg.checkpoint.exists():
        state = load_training(cfg.checkpoint, tcfg)
        if loss_csv.exists():
            with loss_csv.open() as f:
                previous = [row for row in csv.reader(f)][1:]
        print(f"resuming from step {state.step}")
    else:
        state = init_training(data, tcfg)
    state = train(data, tcfg, state, cfg.checkpoint, on_log=lambda s, l: print(f"step {s} loss {l:.5f}"))
    save_training(state, cfg.checkpoint)
    rows = previous + [[s, f"{l:.8g}", f"{la:.8g}", f"{ls:.8g}"] for s, l, la, ls in state.history]
    _write_csv(loss_csv, ["step", "loss", "action_loss", "state_loss"], rows)
    print(f"checkpoint at step {state.step} written to {cfg.checkpoint}")
    return 0


def _simulate_chunk(args):
    scene_paths, ckpt, arch, gcfg, seed, rule_names, steps, replan, replay = args
    from .simworld import Scene

    scenes = [Scene.load(p) for p in scene_paths]
    model = None if replay else DiffusionModel.load(ckpt, arch)
    rules = [_rules_for(sc, rule_names) for sc in scenes]
    return simulate_many(scenes, model, gcfg, seed, rules, steps, replan, replay)


def cmd_simulate(cfg: RunConfig) -> int:
    sim = cfg.simulation
    scene_paths = sorted(cfg.scenes_dir.glob("scene_*.json"))
    if not scene_paths:
        raise ConfigError(f"no scene files in {cfg.scenes_dir}")
    if not sim.replay and not cfg.checkpoint.exists():
        raise ConfigError(f"checkpoint {cfg.checkpoint} not found")
    gcfg = cfg.guidance.build()
    chunks = [scene_paths[i : i + sim.lockstep] for i in range(0, len(scene_paths), sim.lockstep)]
    jobs = [(c, cfg.checkpoint, cfg.diffusion.arch(), gcfg, [cfg.seed, i], cfg.rules, sim.steps, sim.replan_every,
             sim.replay) for i, c in enumerate(chunks)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_simulate_chunk, jobs))
    else:
        results = [_simulate_chunk(j) for j in jobs]
    reports = [r for chunk in results for r in chunk]
    scenes = load_scenes(cfg.scenes_dir)
    out = cfg.output / "sim"
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "rollouts.jsonl", "".join(r.jsonl(sc.dt) for sc, r in zip(scenes, reports)))
    agg = write_report(out, reports, cfg, scenes, sim.plots)
    print(json.dumps(agg, sort_keys=True))
    return 0


def read_rollouts(path: Path, scenes) -> dict:
    """Executed states and actions per scene from a rollout JSON-lines file."""
    by_scene: dict = {}
    with path.open() as f:
        for line in f:
            r = json.loads(line)
            by_scene.setdefault(r["scene"], {}).setdefault(r["agent"], []).append(r)
    out = {}
    for sc in scenes:
        recs = by_scene.get(sc.scene_id)
        if recs is None:
            raise ConfigError(f"{path}: no rollout records for {sc.scene_id}")
        A = len(sc.agents)
        steps = len(recs[sc.agent_ids[0]])
        states = np.empty((A, steps + 1, 4))
        actions = np.empty((A, steps, 2))
        for a, aid in enumerate(sc.agent_ids):
            rows = sorted(recs[aid], key=lambda r: r["step"])
            states[a, :steps] = [[r["x"], r["y"], r["v"], r["theta"]] for r in rows]
            actions[a] = [[r["accel"], r["yaw_rate"]] for r in rows]
        states[:, steps] = step(states[:, steps - 1], actions[:, steps - 1], sc.dt)
        out[sc.scene_id] = (states, actions)
    return out


def cmd_evaluate(cfg: RunConfig) -> int:
    scenes = load_scenes(cfg.scenes_dir)
    path = cfg.output / "sim" / "rollouts.jsonl"
    if not path.exists():
        raise ConfigError(f"rollout log {path} not found; run simulate first")
    logs = read_rollouts(path, scenes)
    reports = []
    for sc in scenes:
        states, actions = logs[sc.scene_id]
        reports.append(evaluate_rollout(sc, states, actions, _rules_for(sc, cfg.rules), replans=0))
    agg = write_report(cfg.output / "eval", reports, cfg, scenes, plots=False)
    print(json.dumps(agg, sort_keys=True))
    return 0


def read_trajectory(path: Path) -> tuple[dict, float]:
    """Named columns from a CSV (header row) or JSON (object of lists, optional "dt") file."""
    text = path.read_text()
    dt = 0.1
    if path.suffix.lower() == ".json":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
        dt = float(obj.pop("dt", dt))
        cols = {k: np.asarray(v, float) for k, v in obj.items()}
    else:
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ConfigError(f"{path}: empty trajectory file")
        header = [h.strip() for h in rows[0]]
        try:
            body = np.array([[float(x) for x in r] for r in rows[1:] if r], float).reshape(-1, len(header))
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from None
        cols = {h: body[:, i] for i, h in enumerate(header)}
    if not cols:
        raise ConfigError(f"{path}: no columns")
    return cols, dt


def cmd_stl_eval(args) -> int:
    fpath, tpath = Path(args.formula), Path(args.trajectory)
    for p in (fpath, tpath):
        if not p.is_file():
            raise ConfigError(f"{p} not found")
    try:
        phi = parse_formula(fpath.read_text(), dt=args.dt_bounds)
    except StlSyntaxError as e:
        raise ConfigError(f"{fpath}: {e}") from None
    cols, dt = read_trajectory(tpath)
    sig = Signal.from_columns(cols, dt)
    exact = float(robustness(phi, sig, args.t))
    smooth_cfg = RobustnessConfig("smooth", args.nu)
    smooth = float(robustness(phi, sig, args.t, smooth_cfg))
    print(f"exact {exact:.10g}")
    print(f"smooth {smooth:.10g}")
    if args.grad:
        gS, gA = robustness_grad(phi, sig, smooth_cfg, args.t)
        names = ["x", "y", "v", "theta", "accel", "yawrate"]
        keep = [i for i, n in enumerate(names) if n in cols]
        g = np.concatenate([gS, gA], axis=-1)[:, keep]
        _write_csv(Path(args.grad), ["t", *[names[i] for i in keep]],
                   [[t, *[f"{x:.10g}" for x in g[t]]] for t in range(g.shape[0])])
    return 0


# ------------------------------------------------------------------ entry point


def _on_off(v: str) -> bool:
    if v.lower() in ("on", "true", "1", "yes"):
        return True
    if v.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {v!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctg", description="Rule-guided traffic diffusion at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="run config JSON")
        s.add_argument("--seed", type=int)
        s.add_argument("--output", help="output directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. diffusion.steps=200 (value parsed as JSON)")
        return s

    with_config("gen-data", "generate scenes and the training dataset")
    t = with_config("train", "train the diffusion model")
    t.add_argument("--steps", type=int)
    t.add_argument("--lambda-s", type=float, help="state loss weight (0 = action-only loss)")
    t.add_argument("--resume", action="store_true", default=None)
    s = with_config("simulate", "closed-loop simulation with guided sampling")
    s.add_argument("--guidance", type=_on_off)
    s.add_argument("--filtration", type=_on_off)
    s.add_argument("--rules", help="comma-separated rule kinds to attach via recipes")
    s.add_argument("--replay", action="store_true", default=None)
    e = with_config("evaluate", "recompute metrics from a rollout log")
    e.add_argument("--rules", help="comma-separated rule kinds to attach via recipes")
    st = sub.add_parser("stl-eval", help="robustness of a formula on a trajectory file")
    st.add_argument("formula")
    st.add_argument("trajectory")
    st.add_argument("--nu", type=float, default=10.0, help="smoothing temperature")
    st.add_argument("--t", type=int, default=0, help="evaluation step")
    st.add_argument("--dt-bounds", type=float, default=None, help="read interval bounds as seconds with this dt")
    st.add_argument("--grad", help="write the smooth-robustness gradient CSV here")
    return p


def _overrides(args) -> dict:
    o = {"seed": args.seed, "paths.output": args.output}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            o[k] = json.loads(v)
        except json.JSONDecodeError:
            o[k] = v
    cmd = args.command
    if cmd == "train":
        o.update({"diffusion.steps": args.steps, "diffusion.lambda_s": args.lambda_s, "diffusion.resume": args.resume})
    if cmd == "simulate":
        o.update({"guidance.guidance_enabled": args.guidance, "guidance.filtration_enabled": args.filtration,
                  "simulation.replay": args.replay})
    if cmd in ("simulate", "evaluate") and args.rules is not None:
        o["rules"] = [r.strip() for r in args.rules.split(",") if r.strip()]
    return o


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "stl-eval":
            return cmd_stl_eval(args)
        cfg = load_config(args.config, _overrides(args))
        cfg.output.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except MissingChannelError as e:
        print(f"error: trajectory is missing channel {e.name!r}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, ContainerError, TrainingError, SimulationError, GuidanceError,
            SceneGenerationError, RuleError, EvaluationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
