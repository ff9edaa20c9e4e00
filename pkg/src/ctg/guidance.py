"""Rule-guided reverse diffusion: inner Adam ascent on the guide, per-step clipping, filtration.

Samples are laid out agent-major: row ``a * N + n`` is sample ``n`` of agent ``a``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .diffusion.context import ContextBatch
from .diffusion.model import DiffusionModel
from .diffusion.sampler import add_noise, initial_noise, unguided_mean
from .dynamics import Trajectory, rollout, rollout_vjp
from .rules import CollisionGuide, RuleSpec, agent_constants, guide_terms
from .stl import RobustnessConfig, Signal, robustness, robustness_and_grad
from .stl.signal import DistanceField

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


class GuidanceError(RuntimeError):
    pass


@dataclass
class GuidanceConfig:
    alpha: float = 0.05
    inner_steps: int = 1
    filtration: int = 10
    temperature: float = 10.0
    guidance_enabled: bool = True
    filtration_enabled: bool = True
    clip_mode: str = "per-step-beta"

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.filtration < 1:
            raise ValueError("filtration count must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.clip_mode != "per-step-beta":
            raise ValueError(f"unsupported clip mode {self.clip_mode!r}")

    @property
    def n_samples(self) -> int:
        return self.filtration if self.filtration_enabled else 1


def soft_cap(rho: np.ndarray, nu: float) -> tuple[np.ndarray, np.ndarray]:
    """Smooth min(rho, 0) and its derivative.

    Capping keeps satisfied rules from pulling on the sample: the derivative
    sigmoid(-nu * rho) vanishes once the robustness is comfortably positive.
    """
    rho = np.asarray(rho, float)
    val = -np.logaddexp(0.0, -nu * rho) / nu
    # 1 / (1 + exp(nu * rho)) without overflow
    d = np.exp(-np.logaddexp(0.0, nu * rho))
    return val, d


@dataclass
class Guide:
    """Scene guide J over a stacked batch of candidate action means.

    ``s0`` holds world-frame start states per agent; ``t_start`` is the scene step
    of the first planned state. ``active`` optionally switches rules off for
    agents that have already discharged them (rule index -> bool per agent; a
    ``(rule index, term index)`` key addresses one part of a composite).
    """

    rules: Sequence[RuleSpec]
    agent_ids: Sequence[str]
    s0: np.ndarray
    normalizer: object
    n_samples: int = 1
    t_start: int = 0
    T: int = 50
    dt: float = 0.1
    temperature: float = 10.0
    offroad_field: Optional[DistanceField] = None
    radii: Optional[np.ndarray] = None
    active: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.s0 = np.asarray(self.s0, float)
        self.cfg = RobustnessConfig("smooth", self.temperature)
        self.s0_rows = np.repeat(self.s0, self.n_samples, axis=0)
        self.local, self.scene = [], []
        for i, spec in enumerate(self.rules):
            terms = guide_terms(spec)
            on = np.asarray(self.active.get(i, np.ones(len(self.agent_ids), bool)), bool)
            if isinstance(terms[0], CollisionGuide):
                self.scene.append(self._pair_eps(terms[0]))
                continue
            consts = agent_constants(spec, self.agent_ids, self.t_start, self.T, self.offroad_field)
            consts = {k: (np.repeat(v, self.n_samples, axis=0) if isinstance(v, np.ndarray) else v)
                      for k, v in consts.items()}
            for j, f in enumerate(terms):
                on_j = np.asarray(self.active.get((i, j), on), bool)
                self.local.append((spec.kind, f, consts, np.repeat(on_j, self.n_samples)))

    def _pair_eps(self, g: CollisionGuide) -> np.ndarray:
        A = len(self.agent_ids)
        if g.eps is not None:
            return np.full((A, A), float(g.eps))
        if self.radii is None:
            raise GuidanceError("collision guide needs footprint radii or an explicit eps")
        r = np.asarray(self.radii, float)
        return r[:, None] + r[None, :]

    @property
    def joint(self) -> bool:
        """True when some rule couples agents, so filtration must pick whole scene samples."""
        return bool(self.scene)

    def describe(self) -> str:
        return ", ".join(s.kind for s in self.rules)

    # ------------------------------------------------------------ evaluation
    def _collision(self, eps: np.ndarray, states: np.ndarray, grad: bool):
        A, N = len(self.agent_ids), self.n_samples
        values = np.zeros(N)
        gS = np.zeros_like(states)
        if A < 2:
            return values, gS
        pos = states[..., :2].reshape(A, N, self.T, 2)
        i, j = np.triu_indices(A, 1)
        diff = pos[i] - pos[j]  # (P, N, T, 2)
        d = np.linalg.norm(diff, axis=-1)
        margin = d - eps[i, j][:, None, None]
        nu = self.temperature
        z = -nu * np.moveaxis(margin, 1, 0).reshape(N, -1)
        lse = np.logaddexp.reduce(z, axis=1)
        rho = -lse / nu
        values, dcap = soft_cap(rho, nu)
        if grad:
            w = np.exp(z - lse[:, None]).reshape(N, len(i), self.T)  # softmin weights
            w = np.moveaxis(w, 0, 1) * dcap[None, :, None]
            unit = diff / np.maximum(d, 1e-12)[..., None]
            gpos = np.zeros_like(pos)
            np.add.at(gpos, i, w[..., None] * unit)
            np.add.at(gpos, j, -w[..., None] * unit)
            gS[..., :2] = gpos.reshape(A * N, self.T, 2)
        return values, gS

    def evaluate(self, mu: np.ndarray, grad: bool = True):
        """Per-row local values (B,), per-sample scene values (N,) and dJ/dmu for J = sum of both."""
        actions = self.normalizer.denorm_actions(np.asarray(mu, float))
        states = rollout(self.s0_rows, actions, self.dt)
        B = actions.shape[0]
        local = np.zeros(B)
        gS = np.zeros_like(states)
        gA = np.zeros_like(actions)
        for kind, f, consts, on in self.local:
            sig = Signal(states, actions, self.dt, consts)
            if grad:
                rho, s_grad, a_grad = robustness_and_grad(f, sig, self.cfg)
            else:
                rho = robustness(f, sig, cfg=self.cfg)
            val, d = soft_cap(rho, self.temperature)
            local += np.where(on, val, 0.0)
            if grad:
                w = np.where(on, d, 0.0)
                gS += s_grad * w[:, None, None]
                gA += a_grad * w[:, None, None]
        scene = np.zeros(self.n_samples)
        for eps in self.scene:
            v, g = self._collision(eps, states, grad)
            scene += v
            gS += g
        if not grad:
            return local, scene, None
        g_act = rollout_vjp(self.s0_rows, actions, self.dt, gS) + gA
        return local, scene, g_act * self.normalizer.action_std

    def total(self, mu: np.ndarray) -> float:
        local, scene, _ = self.evaluate(mu, grad=False)
        return float(local.sum() + scene.sum())

    def grad(self, mu: np.ndarray) -> np.ndarray:
        return self.evaluate(mu, grad=True)[2]

    def sample_values(self, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Agent-local guide values (A, N) and scene-level values (N,) per candidate sample."""
        local, scene, _ = self.evaluate(mu, grad=False)
        return local.reshape(len(self.agent_ids), self.n_samples), scene

    def select(self, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Filtration over the N candidates: (chosen index per agent, candidate values, selected values)."""
        local, scene = self.sample_values(mu)
        A = local.shape[0]
        if self.joint:
            # scene-coupled rules: whole scene samples are kept together
            candidates = (local.sum(axis=0) + scene)[None, :]
            pick = filtrate([(None, v) for v in candidates[0]])
            return np.full(A, pick.index), candidates, np.array([pick.value])
        picks = [filtrate([(None, v) for v in local[a]]) for a in range(A)]
        return np.array([p.index for p in picks], int), local, np.array([p.value for p in picks])


class SceneBatchGuide:
    """Independent scene guides stacked along the row axis (scene-major, then agent-major)."""

    def __init__(self, guides: Sequence[Guide]):
        self.guides = list(guides)
        ns = {g.n_samples for g in self.guides}
        if len(ns) != 1:
            raise GuidanceError(f"scene guides disagree on the sample count: {sorted(ns)}")
        self.n_samples = ns.pop()
        rows = [len(g.agent_ids) * self.n_samples for g in self.guides]
        self.bounds = np.concatenate([[0], np.cumsum(rows)])

    def _blocks(self, mu):
        for g, lo, hi in zip(self.guides, self.bounds[:-1], self.bounds[1:]):
            yield g, mu[lo:hi]

    @property
    def joint(self) -> bool:
        return any(g.joint for g in self.guides)

    def describe(self) -> str:
        return "; ".join(g.describe() for g in self.guides)

    def total(self, mu: np.ndarray) -> float:
        return float(sum(g.total(m) for g, m in self._blocks(mu)))

    def grad(self, mu: np.ndarray) -> np.ndarray:
        return np.concatenate([g.grad(m) for g, m in self._blocks(mu)])

    def select(self, mu: np.ndarray):
        """Per-scene filtration; candidate rows of all scenes are stacked."""
        parts = [g.select(m) for g, m in self._blocks(mu)]
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


# ---------------------------------------------------------------- Algorithm 1


@dataclass
class StepRecord:
    k: int
    beta: float
    mu_unguided: np.ndarray
    mu_guided: np.ndarray


def guide_mean(mu0: np.ndarray, k: int, beta: float, guide: Guide, cfg: GuidanceConfig) -> np.ndarray:
    """Inner Adam ascent on J from the unguided mean, with the displacement clipped to [-beta, beta]."""
    x = mu0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for j in range(1, cfg.inner_steps + 1):
        g = guide.grad(x)
        if not np.all(np.isfinite(g)):
            raise GuidanceError(f"non-finite guide gradient ({guide.describe()}) at diffusion step {k}, inner step {j}")
        m = ADAM_B1 * m + (1 - ADAM_B1) * g
        v = ADAM_B2 * v + (1 - ADAM_B2) * g * g
        mhat = m / (1 - ADAM_B1**j)
        vhat = v / (1 - ADAM_B2**j)
        x = x + cfg.alpha * mhat / (np.sqrt(vhat) + ADAM_EPS)
        x = _clip_around(x, mu0, beta)
    return x


def _clip_around(x: np.ndarray, mu0: np.ndarray, beta: float) -> np.ndarray:
    """mu0 + clip(x - mu0, -beta, beta), with |result - mu0| <= beta holding exactly in floating point."""
    x = mu0 + np.clip(x - mu0, -beta, beta)
    # the addition can round one ulp past the bound; step those entries back toward mu0
    for _ in range(4):
        over = np.abs(x - mu0) > beta
        if not over.any():
            break
        x = np.where(over, np.nextafter(x, mu0), x)
    return x


def guided_reverse_step(
    mu: np.ndarray,
    k: int,
    guide: Optional[Guide],
    cfg: GuidanceConfig,
    schedule,
    rng: np.random.Generator,
    record: Optional[list] = None,
) -> np.ndarray:
    """Perturb the predicted mean by the guide, then sample tau^{k-1} with variance beta_k."""
    beta = schedule.beta(k)
    guided = mu
    if guide is not None and cfg.guidance_enabled:
        guided = guide_mean(mu, k, beta, guide, cfg)
    if record is not None:
        record.append(StepRecord(k, beta, mu, guided))
    return add_noise(guided, k, schedule, rng)


@dataclass
class FiltrationResult:
    trajectory: object
    value: float
    index: int


def filtrate(samples: Sequence[tuple]) -> FiltrationResult:
    """Pick the (trajectory, J) pair with the largest J; ties go to the lowest index."""
    if not samples:
        raise ValueError("filtration needs at least one sample")
    values = np.array([float(v) for _, v in samples])
    i = int(np.argmax(values))
    return FiltrationResult(samples[i][0], float(values[i]), i)


@dataclass
class GuidedSample:
    """Chosen trajectory per agent (agent frame) plus the guide values behind the choice."""

    actions: np.ndarray  # (A, T, 2) physical
    states: np.ndarray  # (A, T, 4) from the agent-frame start states
    chosen: np.ndarray  # (A,) sample index per agent
    candidates: np.ndarray  # (A, N) per-agent values, or (1, N) scene totals under joint selection
    # (stacked per scene when sampling several scenes at once)
    selected: np.ndarray  # value of each filtrated choice, one per row of ``candidates``


Hook = Callable[[int, np.ndarray, np.ndarray], None]


def guided_sample(
    model: DiffusionModel,
    ctx: ContextBatch,
    s0_local: np.ndarray,
    guide: Optional[Guide],
    cfg: GuidanceConfig,
    rng: np.random.Generator,
    hook: Optional[Hook] = None,
    record: Optional[list] = None,
) -> GuidedSample:
    """Run K guided reverse steps for every agent of a scene at once, then filtrate.

    ``hook(k, actions_norm, states)`` sees every intermediate trajectory; ``record``
    collects the unguided and guided means at each step.
    """
    A = len(ctx)
    N = cfg.n_samples
    if guide is not None and guide.n_samples != N:
        raise GuidanceError(f"guide built for {guide.n_samples} samples, config asks for {N}")
    s0 = np.repeat(np.asarray(s0_local, float), N, axis=0)
    feat = model.encode_context(ctx.repeat(N) if N > 1 else ctx)
    sched = model.schedule
    x = initial_noise(model, A * N, rng)
    for k in range(sched.K, 0, -1):
        mu = unguided_mean(model, x, k, feat, s0)
        x = guided_reverse_step(mu, k, guide, cfg, sched, rng, record)
        if hook is not None:
            hook(k, x, rollout(s0, model.normalizer.denorm_actions(x), model.dt))
    if guide is not None:
        chosen, candidates, selected = guide.select(x)
    else:
        chosen, candidates, selected = np.zeros(A, int), np.zeros((A, N)), np.zeros(A)
    actions = model.normalizer.denorm_actions(x).reshape(A, N, model.arch.T, 2)
    states = rollout(s0, model.normalizer.denorm_actions(x), model.dt).reshape(A, N, model.arch.T, 4)
    idx = np.arange(A)
    out_a = actions[idx, chosen]
    out_s = states[idx, chosen]
    for a in range(A):
        Trajectory(s0_local[a], out_a[a], out_s[a], model.dt)  # feasibility check at the boundary
    return GuidedSample(out_a, out_s, chosen, candidates, selected)
