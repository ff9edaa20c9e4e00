"""Exact and log-sum-exp smoothed STL robustness with reverse-mode gradients.

Evaluation is vectorised over a batch of signals and over time: every formula
node produces a robustness trace of shape (B, T). Temporal operators reduce
over (T, T) window masks. The backward pass routes cotangents through the same
windows; exact min/max send the whole subgradient to the first attaining
argument.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .ast import (
    ACTION_CHANNELS,
    STATE_CHANNELS,
    Abs,
    Always,
    And,
    BinOp,
    Channel,
    Const,
    Dist,
    Eventually,
    Expr,
    Formula,
    Implies,
    Interval,
    Neg,
    Norm,
    Not,
    Num,
    Or,
    Pred,
    TrueF,
    Until,
    children,
)
from .signal import Signal


class EvaluationError(ValueError):
    pass


class MissingChannelError(EvaluationError):
    def __init__(self, name: str):
        super().__init__(f"signal has no channel {name!r}")
        self.name = name


@dataclass(frozen=True)
class RobustnessConfig:
    mode: str = "exact"  # "exact" or "smooth"
    temperature: float = 10.0

    def __post_init__(self) -> None:
        if self.mode not in ("exact", "smooth"):
            raise ValueError(f"mode must be 'exact' or 'smooth', got {self.mode!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


EXACT = RobustnessConfig("exact")

_STATE_INDEX = {n: i for i, n in enumerate(STATE_CHANNELS)}
_ACTION_INDEX = {n: i for i, n in enumerate(ACTION_CHANNELS)}


# ------------------------------------------------------------------ windows


@lru_cache(maxsize=512)
def _window(a: int, b: Optional[int], T: int) -> tuple[np.ndarray, np.ndarray]:
    """Mask[t, u] is True iff u lies in [t+a, min(t+b, T-1)]; also the empty-row flags."""
    t = np.arange(T)[:, None]
    u = np.arange(T)[None, :]
    hi = T - 1 if b is None else np.minimum(t + b, T - 1)
    mask = (u >= t + a) & (u <= hi)
    empty = ~mask.any(axis=1)
    mask.setflags(write=False)
    empty.setflags(write=False)
    return mask, empty


@lru_cache(maxsize=64)
def _upper(T: int) -> np.ndarray:
    """Mask[t, w] is True iff w >= t."""
    m = np.arange(T)[None, :] >= np.arange(T)[:, None]
    m.setflags(write=False)
    return m


def _op_name(f: Formula) -> str:
    return f"{type(f).__name__.lower()}{getattr(f, 'interval', '')}"


@lru_cache(maxsize=1024)
def _check_windows(f: Formula, T: int, t: int) -> None:
    need = np.zeros(T, bool)
    need[t] = True
    _demand(f, need, T)


def _demand(f: Formula, need: np.ndarray, T: int) -> None:
    if isinstance(f, (Eventually, Always, Until)):
        iv = f.interval
        mask, empty = _window(iv.a, iv.b, T)
        bad = need & empty
        if bad.any():
            t = int(np.argmax(bad))
            raise EvaluationError(
                f"empty evaluation window for {_op_name(f)} at step {t} (signal length {T})"
            )
        child_need = mask[need].any(axis=0)
        if isinstance(f, Until):
            _demand(f.right, child_need, T)
            # phi is needed on [t, t'] for every candidate t'
            last = np.where(need, np.where(mask.any(1), T - 1 - np.argmax(mask[:, ::-1], axis=1), -1), -1)
            phi_need = np.zeros(T, bool)
            for s in np.flatnonzero(need):
                phi_need[s : last[s] + 1] = True
            _demand(f.left, phi_need, T)
        else:
            _demand(f.arg, child_need, T)
        return
    for c in children(f):
        _demand(c, need, T)


# ---------------------------------------------------------- soft reductions


def _lse(Z: np.ndarray, mask: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """log-sum-exp over the last axis and its softmax weights, tolerant of +-inf entries."""
    if mask is not None:
        Z = np.where(mask, Z, -np.inf)
    m = Z.max(axis=-1)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        E = np.exp(Z - shift[..., None])
        S = E.sum(axis=-1)
        val = shift + np.log(S)
        W = E / S[..., None]
    pos = np.isposinf(m)
    neg = np.isneginf(m)
    if pos.any():
        hit = np.isposinf(Z)
        first = hit & (np.cumsum(hit, axis=-1) == 1)
        W = np.where(pos[..., None], first.astype(float), W)
        val = np.where(pos, np.inf, val)
    if neg.any():
        W = np.where(neg[..., None], 0.0, W)
        val = np.where(neg, -np.inf, val)
    return val, W


def _first_onehot(idx: np.ndarray, n: int) -> np.ndarray:
    return (idx[..., None] == np.arange(n)).astype(float)


# --------------------------------------------------------------- evaluator


class _Evaluator:
    def __init__(self, sig: Signal, cfg: RobustnessConfig):
        self.sig = sig
        self.smooth = cfg.mode == "smooth"
        self.nu = float(cfg.temperature)
        S = sig.states if sig.batched else sig.states[None]
        A = sig.actions if sig.batched else sig.actions[None]
        self.S, self.A = S, A
        self.B, self.T = S.shape[0], S.shape[1]
        self.val: dict[int, np.ndarray] = {}
        self.aux: dict[int, object] = {}
        self.gS: Optional[np.ndarray] = None
        self.gA: Optional[np.ndarray] = None

    # ---- constants
    def const(self, name: str) -> np.ndarray:
        if name not in self.sig.constants:
            raise MissingChannelError(name)
        c = np.asarray(self.sig.constants[name], float)
        if c.ndim == 0:
            return np.full((self.B, self.T), float(c))
        if c.ndim == 1:
            if c.shape[0] != self.T:
                raise EvaluationError(f"per-step constant {name!r} has length {c.shape[0]}, signal has {self.T}")
            return np.broadcast_to(c[None, :], (self.B, self.T))
        if c.ndim == 2 and c.shape[0] in (1, self.B) and c.shape[1] in (1, self.T):
            return np.broadcast_to(c, (self.B, self.T))
        raise EvaluationError(f"constant {name!r} has unsupported shape {c.shape}")

    def base(self, name: str) -> np.ndarray:
        if not self.sig.has(name):
            raise MissingChannelError(name)
        if name in _STATE_INDEX:
            return self.S[..., _STATE_INDEX[name]]
        return self.A[..., _ACTION_INDEX[name]]

    def _box(self) -> np.ndarray:
        if "box" not in self.sig.constants:
            raise MissingChannelError("box")
        box = np.asarray(self.sig.constants["box"], float)
        box = np.broadcast_to(box.reshape(-1, 4) if box.ndim <= 2 else box, (self.B, 4))
        return box

    # ---- expression forward
    def ex(self, e: Expr) -> np.ndarray:
        key = id(e)
        if key in self.val:
            return self.val[key]
        if isinstance(e, Num):
            out = np.full((self.B, self.T), e.value)
        elif isinstance(e, Const):
            out = self.const(e.name)
        elif isinstance(e, Channel):
            out = self.channel(e)
        elif isinstance(e, BinOp):
            l, r = self.ex(e.left), self.ex(e.right)
            out = l + r if e.op == "+" else l - r if e.op == "-" else l * r
        elif isinstance(e, Neg):
            out = -self.ex(e.arg)
        elif isinstance(e, Abs):
            out = np.abs(self.ex(e.arg))
        elif isinstance(e, Dist):
            dx = self.ex(e.x1) - self.ex(e.x2)
            dy = self.ex(e.y1) - self.ex(e.y2)
            out = np.hypot(dx, dy)
            self.aux[key] = (dx, dy)
        elif isinstance(e, Norm):
            a, b = self.ex(e.a), self.ex(e.b)
            out = np.hypot(a, b)
            self.aux[key] = (a, b)
        else:
            raise TypeError(f"not an expression: {e!r}")
        self.val[key] = out
        return out

    def channel(self, e: Channel) -> np.ndarray:
        name, key = e.name, id(e)
        if name in _STATE_INDEX or name in _ACTION_INDEX:
            return self.base(name)
        if name == "speed":
            return np.abs(self.base("v"))
        if name == "in_box":
            x, y = self.base("x"), self.base("y")
            box = self._box()
            cx, cy, hw, hh = (box[:, i : i + 1] for i in range(4))
            ax = hw - np.abs(x - cx)
            ay = hh - np.abs(y - cy)
            pick_x = ax <= ay
            self.aux[key] = (pick_x, np.sign(x - cx), np.sign(y - cy))
            return np.where(pick_x, ax, ay)
        if name == "offroad":
            field = self.sig.constants.get("offroad_field")
            if field is None:
                raise MissingChannelError("offroad_field")
            val, dx, dy = field.sample(self.base("x"), self.base("y"))
            self.aux[key] = (dx, dy)
            return val
        if name == "nearest_agent":
            if "others" not in self.sig.constants:
                raise MissingChannelError("others")
            others = np.asarray(self.sig.constants["others"], float)
            if others.ndim == 3:
                others = others[None]
            if others.shape[1] == 0:
                raise EvaluationError("nearest_agent needs at least one other agent")
            dx = self.base("x")[:, None, :] - others[..., 0]
            dy = self.base("y")[:, None, :] - others[..., 1]
            d = np.hypot(dx, dy)  # (B, M, T)
            j = np.argmin(d, axis=1)
            dmin = np.take_along_axis(d, j[:, None, :], axis=1)[:, 0]
            ux = np.take_along_axis(dx, j[:, None, :], axis=1)[:, 0]
            uy = np.take_along_axis(dy, j[:, None, :], axis=1)[:, 0]
            self.aux[key] = (ux, uy, dmin)
            return dmin
        raise MissingChannelError(name)

    # ---- expression backward
    def _acc_base(self, name: str, g: np.ndarray) -> None:
        if name in _STATE_INDEX:
            self.gS[..., _STATE_INDEX[name]] += g
        else:
            self.gA[..., _ACTION_INDEX[name]] += g

    def ex_back(self, e: Expr, g: np.ndarray) -> None:
        if isinstance(e, (Num, Const)):
            return
        if isinstance(e, Channel):
            self.channel_back(e, g)
        elif isinstance(e, BinOp):
            if e.op == "+":
                self.ex_back(e.left, g)
                self.ex_back(e.right, g)
            elif e.op == "-":
                self.ex_back(e.left, g)
                self.ex_back(e.right, -g)
            else:
                self.ex_back(e.left, g * self.ex(e.right))
                self.ex_back(e.right, g * self.ex(e.left))
        elif isinstance(e, Neg):
            self.ex_back(e.arg, -g)
        elif isinstance(e, Abs):
            self.ex_back(e.arg, g * np.sign(self.ex(e.arg)))
        elif isinstance(e, Dist):
            dx, dy = self.aux[id(e)]
            d = self.val[id(e)]
            safe = np.where(d > 0, d, 1.0)
            gx = np.where(d > 0, g * dx / safe, 0.0)
            gy = np.where(d > 0, g * dy / safe, 0.0)
            self.ex_back(e.x1, gx)
            self.ex_back(e.x2, -gx)
            self.ex_back(e.y1, gy)
            self.ex_back(e.y2, -gy)
        elif isinstance(e, Norm):
            a, b = self.aux[id(e)]
            d = self.val[id(e)]
            safe = np.where(d > 0, d, 1.0)
            self.ex_back(e.a, np.where(d > 0, g * a / safe, 0.0))
            self.ex_back(e.b, np.where(d > 0, g * b / safe, 0.0))

    def channel_back(self, e: Channel, g: np.ndarray) -> None:
        name = e.name
        if name in _STATE_INDEX or name in _ACTION_INDEX:
            self._acc_base(name, g)
        elif name == "speed":
            self._acc_base("v", g * np.sign(self.base("v")))
        elif name == "in_box":
            pick_x, sx, sy = self.aux[id(e)]
            self._acc_base("x", np.where(pick_x, -g * sx, 0.0))
            self._acc_base("y", np.where(pick_x, 0.0, -g * sy))
        elif name == "offroad":
            dx, dy = self.aux[id(e)]
            self._acc_base("x", g * dx)
            self._acc_base("y", g * dy)
        elif name == "nearest_agent":
            ux, uy, d = self.aux[id(e)]
            safe = np.where(d > 0, d, 1.0)
            self._acc_base("x", np.where(d > 0, g * ux / safe, 0.0))
            self._acc_base("y", np.where(d > 0, g * uy / safe, 0.0))

    # ---- formula forward
    def fx(self, f: Formula) -> np.ndarray:
        key = id(f)
        if key in self.val:
            return self.val[key]
        if isinstance(f, TrueF):
            out = np.full((self.B, self.T), np.inf)
        elif isinstance(f, Pred):
            d = self.ex(f.expr) - self.ex(f.bound)
            out = d if f.op == ">" else -d
        elif isinstance(f, Not):
            out = -self.fx(f.arg)
        elif isinstance(f, (And, Or, Implies)):
            l = self.fx(f.left)
            if isinstance(f, Implies):
                l = -l
            r = self.fx(f.right)
            out = self._pair(key, l, r, "min" if isinstance(f, And) else "max")
        elif isinstance(f, (Eventually, Always)):
            out = self._window_reduce(key, self.fx(f.arg), f.interval, "max" if isinstance(f, Eventually) else "min")
        elif isinstance(f, Until):
            out = self._until(key, f)
        else:
            raise TypeError(f"not a formula: {f!r}")
        self.val[key] = out
        return out

    def _pair(self, key: int, l: np.ndarray, r: np.ndarray, kind: str) -> np.ndarray:
        if self.smooth:
            sgn = -1.0 if kind == "min" else 1.0
            with np.errstate(invalid="ignore"):
                Z = sgn * self.nu * np.stack([l, r], axis=-1)
            val, W = _lse(Z)
            self.aux[key] = W
            return sgn * val / self.nu
        take_l = l <= r if kind == "min" else l >= r
        self.aux[key] = take_l
        return np.where(take_l, l, r)

    def _window_reduce(self, key: int, x: np.ndarray, iv: Interval, kind: str) -> np.ndarray:
        mask, empty = _window(iv.a, iv.b, self.T)
        X = x[:, None, :]
        if self.smooth:
            sgn = -1.0 if kind == "min" else 1.0
            with np.errstate(invalid="ignore"):
                val, W = _lse(sgn * self.nu * X, mask)
            out = sgn * val / self.nu
            self.aux[key] = W
        else:
            fill = np.inf if kind == "min" else -np.inf
            Xm = np.where(mask, X, fill)
            idx = Xm.argmin(-1) if kind == "min" else Xm.argmax(-1)
            out = np.take_along_axis(Xm, idx[..., None], -1)[..., 0]
            W = _first_onehot(idx, self.T) * mask
            self.aux[key] = W
        # placeholder at steps whose window is empty; never demanded
        return np.where(empty, 0.0, out)

    def _until(self, key: int, f: Until) -> np.ndarray:
        phi = self.fx(f.left)
        psi = self.fx(f.right)
        T = self.T
        mask, empty = _window(f.interval.a, f.interval.b, T)
        up = _upper(T)
        if self.smooth:
            nu = self.nu
            with np.errstate(invalid="ignore"):
                Zphi = np.where(up, -nu * phi[:, None, :], -np.inf)  # (B, t, w)
            acc = np.logaddexp.accumulate(Zphi, axis=-1)
            P = -acc / nu  # soft min of phi over [t, u]
            with np.errstate(invalid="ignore"):
                pair = -nu * np.stack([np.broadcast_to(psi[:, None, :], P.shape), P], axis=-1)
            inner_v, Wpair = _lse(pair)
            inner = -inner_v / nu
            with np.errstate(invalid="ignore"):
                out_v, Wout = _lse(nu * inner, mask)
            out = out_v / nu
            self.aux[key] = ("smooth", P, Wpair, Wout)
        else:
            Phi = np.where(up, phi[:, None, :], np.inf)
            P = np.minimum.accumulate(Phi, axis=-1)
            pidx = np.zeros(P.shape, dtype=int)
            pidx[..., 0] = 0
            for u in range(1, T):
                better = Phi[..., u] < P[..., u - 1]
                pidx[..., u] = np.where(better, u, pidx[..., u - 1])
            # rows t: entries u < t are +inf and irrelevant; first finite index is t
            pidx = np.maximum(pidx, np.arange(T)[None, :, None])
            psi_b = np.broadcast_to(psi[:, None, :], P.shape)
            take_psi = psi_b <= P
            inner = np.where(take_psi, psi_b, P)
            Im = np.where(mask, inner, -np.inf)
            idx = Im.argmax(-1)
            out = np.take_along_axis(Im, idx[..., None], -1)[..., 0]
            self.aux[key] = ("exact", idx, take_psi, pidx)
        return np.where(empty, 0.0, out)

    # ---- formula backward
    def fx_back(self, f: Formula, g: np.ndarray) -> None:
        if isinstance(f, TrueF):
            return
        if isinstance(f, Pred):
            sgn = 1.0 if f.op == ">" else -1.0
            self.ex_back(f.expr, sgn * g)
            self.ex_back(f.bound, -sgn * g)
        elif isinstance(f, Not):
            self.fx_back(f.arg, -g)
        elif isinstance(f, (And, Or, Implies)):
            aux = self.aux[id(f)]
            if self.smooth:
                gl, gr = g * aux[..., 0], g * aux[..., 1]
            else:
                gl, gr = np.where(aux, g, 0.0), np.where(aux, 0.0, g)
            if isinstance(f, Implies):
                gl = -gl
            self.fx_back(f.left, gl)
            self.fx_back(f.right, gr)
        elif isinstance(f, (Eventually, Always)):
            W = self.aux[id(f)]
            self.fx_back(f.arg, np.einsum("bt,btu->bu", g, W))
        elif isinstance(f, Until):
            self._until_back(f, g)

    def _until_back(self, f: Until, g: np.ndarray) -> None:
        aux = self.aux[id(f)]
        T = self.T
        if aux[0] == "smooth":
            _, P, Wpair, Wout = aux
            G_inner = g[..., None] * Wout  # (B, t, u)
            g_psi = (G_inner * Wpair[..., 0]).sum(axis=1)
            G_P = G_inner * Wpair[..., 1]
            phi = self.fx(f.left)
            steps = np.arange(T)
            g_phi = np.zeros((self.B, T))
            nu = self.nu
            for t in range(T):
                if not np.any(G_P[:, t]):
                    continue
                # dP[t,u]/dphi[w] = exp(-nu (phi[w] - P[t,u])) for t <= w <= u
                band = (steps[None, :] >= t) & (steps[None, :] <= steps[:, None])  # (u, w)
                with np.errstate(invalid="ignore", over="ignore"):
                    logw = -nu * (phi[:, None, :] - P[:, t, :, None])
                    Wt = np.where(band[None], np.exp(np.where(band[None], logw, -np.inf)), 0.0)
                g_phi += np.einsum("bu,buw->bw", np.nan_to_num(G_P[:, t]), Wt)
        else:
            _, idx, take_psi, pidx = aux
            bsel = np.arange(self.B)[:, None]
            tsel = np.arange(T)[None, :]
            psi_hit = take_psi[bsel, tsel, idx]
            w_phi = pidx[bsel, tsel, idx]
            g_psi = np.zeros((self.B, T))
            g_phi = np.zeros((self.B, T))
            gp = np.where(psi_hit, g, 0.0)
            gf = np.where(psi_hit, 0.0, g)
            for b in range(self.B):
                np.add.at(g_psi[b], idx[b], gp[b])
                np.add.at(g_phi[b], w_phi[b], gf[b])
        self.fx_back(f.right, g_psi)
        self.fx_back(f.left, g_phi)


def _run(phi: Formula, sig: Signal, t: int, cfg: RobustnessConfig, grad: bool):
    T = sig.T
    if not 0 <= t < T:
        raise EvaluationError(f"start step {t} outside signal of length {T}")
    _check_windows(phi, T, t)
    ev = _Evaluator(sig, cfg)
    trace = ev.fx(phi)
    value = trace[:, t].copy()
    gS = gA = None
    if grad:
        ev.gS = np.zeros(ev.S.shape)
        ev.gA = np.zeros(ev.A.shape)
        g = np.zeros((ev.B, T))
        g[:, t] = 1.0
        ev.fx_back(phi, g)
        gS, gA = ev.gS, ev.gA
    if not sig.batched:
        value = float(value[0])
        if grad:
            gS, gA = gS[0], gA[0]
    return value, gS, gA


def robustness(phi: Formula, sig: Signal, t: int = 0, cfg: RobustnessConfig = EXACT):
    """Robustness of ``phi`` on ``sig`` at step ``t``; a float, or (B,) for a batched signal."""
    return _run(phi, sig, t, cfg, grad=False)[0]


def robustness_and_grad(phi: Formula, sig: Signal, cfg: RobustnessConfig = EXACT, t: int = 0):
    """Robustness plus its gradient with respect to the state and action arrays of ``sig``."""
    return _run(phi, sig, t, cfg, grad=True)


def robustness_grad(phi: Formula, sig: Signal, cfg: RobustnessConfig = EXACT, t: int = 0):
    """Gradient of the robustness at ``t`` as ``(d_states, d_actions)`` shaped like the signal."""
    _, gS, gA = _run(phi, sig, t, cfg, grad=True)
    return gS, gA


def robustness_trace(phi: Formula, sig: Signal, cfg: RobustnessConfig = EXACT) -> np.ndarray:
    """Robustness at every step (values at steps with an empty window are 0 placeholders)."""
    ev = _Evaluator(sig, cfg)
    out = ev.fx(phi)
    return out if sig.batched else out[0]
