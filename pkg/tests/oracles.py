"""Independent reference implementations used only by the tests.

Everything here is scalar, loop-based Python written straight from the
definitions, sharing no code with the vectorised engine under test.
"""
from __future__ import annotations

import math
import random

import numpy as np

from ctg.stl import ast as A

STATE = {"x": 0, "y": 1, "v": 2, "theta": 3}
ACTION = {"accel": 0, "yawrate": 1}


def expr_value(e, states, actions, t, consts):
    if isinstance(e, A.Num):
        return e.value
    if isinstance(e, A.Const):
        c = np.asarray(consts[e.name], float)
        return float(c) if c.ndim == 0 else float(c[t])
    if isinstance(e, A.Channel):
        if e.name in STATE:
            return float(states[t][STATE[e.name]])
        if e.name in ACTION:
            return float(actions[t][ACTION[e.name]])
        if e.name == "speed":
            return abs(float(states[t][2]))
        if e.name == "in_box":
            cx, cy, hw, hh = consts["box"]
            return min(hw - abs(states[t][0] - cx), hh - abs(states[t][1] - cy))
        raise KeyError(e.name)
    if isinstance(e, A.BinOp):
        l = expr_value(e.left, states, actions, t, consts)
        r = expr_value(e.right, states, actions, t, consts)
        return {"+": l + r, "-": l - r, "*": l * r}[e.op]
    if isinstance(e, A.Neg):
        return -expr_value(e.arg, states, actions, t, consts)
    if isinstance(e, A.Abs):
        return abs(expr_value(e.arg, states, actions, t, consts))
    if isinstance(e, A.Dist):
        vals = [expr_value(a, states, actions, t, consts) for a in (e.x1, e.y1, e.x2, e.y2)]
        return math.sqrt((vals[0] - vals[2]) ** 2 + (vals[1] - vals[3]) ** 2)
    if isinstance(e, A.Norm):
        a = expr_value(e.a, states, actions, t, consts)
        b = expr_value(e.b, states, actions, t, consts)
        return math.sqrt(a * a + b * b)
    raise TypeError(e)


def _window(iv, t, T):
    lo = t + iv.a
    hi = T - 1 if iv.b is None else min(t + iv.b, T - 1)
    return range(lo, hi + 1)


def brute_robustness(f, states, actions, t=0, consts=None):
    """Exact robustness by direct recursion; Until enumerates every (t', t'') pair."""
    consts = consts or {}
    T = len(states)
    rec = lambda g, s: brute_robustness(g, states, actions, s, consts)  # noqa: E731
    if isinstance(f, A.TrueF):
        return math.inf
    if isinstance(f, A.Pred):
        lhs = expr_value(f.expr, states, actions, t, consts)
        rhs = expr_value(f.bound, states, actions, t, consts)
        return lhs - rhs if f.op == ">" else rhs - lhs
    if isinstance(f, A.Not):
        return -rec(f.arg, t)
    if isinstance(f, A.And):
        return min(rec(f.left, t), rec(f.right, t))
    if isinstance(f, A.Or):
        return max(rec(f.left, t), rec(f.right, t))
    if isinstance(f, A.Implies):
        return max(-rec(f.left, t), rec(f.right, t))
    if isinstance(f, (A.Eventually, A.Always, A.Until)):
        win = list(_window(f.interval, t, T))
        if not win:
            raise ValueError("empty window")
        if isinstance(f, A.Eventually):
            return max(rec(f.arg, s) for s in win)
        if isinstance(f, A.Always):
            return min(rec(f.arg, s) for s in win)
        best = -math.inf
        for tp in win:
            worst_phi = math.inf
            for tpp in range(t, tp + 1):
                worst_phi = min(worst_phi, rec(f.left, tpp))
            best = max(best, min(rec(f.right, tp), worst_phi))
        return best
    raise TypeError(f)


def boolean_sat(f, states, actions, t=0, consts=None):
    """Qualitative (true/false) STL semantics."""
    consts = consts or {}
    T = len(states)
    rec = lambda g, s: boolean_sat(g, states, actions, s, consts)  # noqa: E731
    if isinstance(f, A.TrueF):
        return True
    if isinstance(f, A.Pred):
        lhs = expr_value(f.expr, states, actions, t, consts)
        rhs = expr_value(f.bound, states, actions, t, consts)
        return lhs > rhs if f.op == ">" else lhs < rhs
    if isinstance(f, A.Not):
        return not rec(f.arg, t)
    if isinstance(f, A.And):
        return rec(f.left, t) and rec(f.right, t)
    if isinstance(f, A.Or):
        return rec(f.left, t) or rec(f.right, t)
    if isinstance(f, A.Implies):
        return (not rec(f.left, t)) or rec(f.right, t)
    win = list(_window(f.interval, t, T))
    if isinstance(f, A.Eventually):
        return any(rec(f.arg, s) for s in win)
    if isinstance(f, A.Always):
        return all(rec(f.arg, s) for s in win)
    if isinstance(f, A.Until):
        return any(rec(f.right, tp) and all(rec(f.left, s) for s in range(t, tp + 1)) for tp in win)
    raise TypeError(f)


# ------------------------------------------------------------ random instances

_CHANNELS = ["x", "y", "v", "theta", "accel", "yawrate"]


def random_expr(rng: random.Random, depth: int = 2):
    if depth == 0 or rng.random() < 0.4:
        return A.Channel(rng.choice(_CHANNELS))
    kind = rng.choice(["+", "-", "*", "abs", "dist", "scale"])
    if kind in "+-*":
        return A.BinOp(kind, random_expr(rng, depth - 1), random_expr(rng, depth - 1))
    if kind == "abs":
        return A.Abs(random_expr(rng, depth - 1))
    if kind == "scale":
        return A.BinOp("*", A.Num(round(rng.uniform(-2, 2), 3)), random_expr(rng, depth - 1))
    return A.Dist(
        A.Channel("x"), A.Channel("y"), A.Num(round(rng.uniform(-2, 2), 3)), A.Num(round(rng.uniform(-2, 2), 3))
    )


def random_interval(rng: random.Random):
    a = rng.randint(0, 2)
    b = None if rng.random() < 0.4 else a + rng.randint(0, 3)
    return A.Interval(a, b)


def random_formula(rng: random.Random, depth: int = 3):
    if depth == 0 or rng.random() < 0.2:
        return A.Pred(random_expr(rng, 2), rng.choice("<>"), A.Num(round(rng.uniform(-1.5, 1.5), 3)))
    kind = rng.choice(["not", "and", "or", "implies", "until", "eventually", "always"])
    sub = lambda: random_formula(rng, depth - 1)  # noqa: E731
    if kind == "not":
        return A.Not(sub())
    if kind == "and":
        return A.And(sub(), sub())
    if kind == "or":
        return A.Or(sub(), sub())
    if kind == "implies":
        return A.Implies(sub(), sub())
    if kind == "until":
        return A.Until(sub(), sub(), random_interval(rng))
    if kind == "eventually":
        return A.Eventually(sub(), random_interval(rng))
    return A.Always(sub(), random_interval(rng))


def formula_depth(f) -> int:
    kids = A.children(f)
    return 0 if not kids else 1 + max(formula_depth(k) for k in kids)


def minmax_levels(f) -> int:
    """Deepest chain of nested min/max reductions (Until counts three levels)."""
    if isinstance(f, (A.TrueF, A.Pred)):
        return 0
    if isinstance(f, A.Not):
        return minmax_levels(f.arg)
    if isinstance(f, A.Until):
        return 3 + max(minmax_levels(f.left), minmax_levels(f.right))
    return 1 + max(minmax_levels(k) for k in A.children(f))


def abs_args(f):
    """Every sub-expression whose value is a kink location (abs, dist, norm arguments)."""
    out = []

    def walk_e(e):
        if isinstance(e, A.Abs):
            out.append(e.arg)
        if isinstance(e, (A.Dist, A.Norm)):
            out.append(e)
        for c in A.expr_children(e):
            walk_e(c)

    def walk_f(g):
        if isinstance(g, A.Pred):
            walk_e(g.expr)
            walk_e(g.bound)
        for c in A.children(g):
            walk_f(c)

    walk_f(f)
    return out


def central_difference(fun, x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fun(x)
        x[i] = old - h
        fm = fun(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rollout_loop(s0, actions, dt):
    """Step-by-step unicycle rollout written out longhand."""
    x, y, v, th = (float(c) for c in s0)
    out = []
    for a in actions:
        nx = x + v * math.cos(th) * dt
        ny = y + v * math.sin(th) * dt
        nv = v + a[0] * dt
        nth = th + a[1] * dt
        x, y, v, th = nx, ny, nv, nth
        out.append((x, y, v, th))
    return np.array(out)


def wasserstein_quantile(a: np.ndarray, b: np.ndarray, edges: np.ndarray) -> float:
    """W1 between two binned samples via their quantile functions on bin centres."""
    centers = 0.5 * (edges[:-1] + edges[1:])
    ha, _ = np.histogram(a, edges)
    hb, _ = np.histogram(b, edges)
    pa = ha / ha.sum()
    pb = hb / hb.sum()
    # integrate |F_a^-1(q) - F_b^-1(q)| dq over a fine uniform grid of quantile levels
    n = 20000
    q = (np.arange(n) + 0.5) / n
    qa = centers[np.searchsorted(np.cumsum(pa), q, side="left").clip(0, len(centers) - 1)]
    qb = centers[np.searchsorted(np.cumsum(pb), q, side="left").clip(0, len(centers) - 1)]
    return float(np.mean(np.abs(qa - qb)))
