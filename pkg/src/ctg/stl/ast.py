"""Immutable AST for STL formulas and the signal expressions inside predicates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

# Channels read straight from the state/action arrays, in layout order.
STATE_CHANNELS = ("x", "y", "v", "theta")
ACTION_CHANNELS = ("accel", "yawrate")
# Channels computed from the base channels plus scene constants.
DERIVED_CHANNELS = ("speed", "in_box", "offroad", "nearest_agent")
CHANNELS = STATE_CHANNELS + ACTION_CHANNELS + DERIVED_CHANNELS
# Named scene constants that may appear in predicate expressions.
SCENE_CONSTANTS = ("v_limit", "v_target", "goal_x", "goal_y")


def _fmt_num(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------- expressions


@dataclass(frozen=True)
class Num:
    value: float

    def __str__(self) -> str:
        return _fmt_num(self.value)


@dataclass(frozen=True)
class Channel:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Const:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - *
    left: "Expr"
    right: "Expr"

    def __str__(self) -> str:
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Neg:
    arg: "Expr"

    def __str__(self) -> str:
        return f"(-{self.arg})"


@dataclass(frozen=True)
class Abs:
    arg: "Expr"

    def __str__(self) -> str:
        return f"abs({self.arg})"


@dataclass(frozen=True)
class Dist:
    """Euclidean distance between points (x1, y1) and (x2, y2)."""

    x1: "Expr"
    y1: "Expr"
    x2: "Expr"
    y2: "Expr"

    def __str__(self) -> str:
        return f"dist({self.x1}, {self.y1}, {self.x2}, {self.y2})"


@dataclass(frozen=True)
class Norm:
    """Euclidean norm of the 2-vector (a, b)."""

    a: "Expr"
    b: "Expr"

    def __str__(self) -> str:
        return f"norm({self.a}, {self.b})"


Expr = Union[Num, Channel, Const, BinOp, Neg, Abs, Dist, Norm]


def expr_children(e: Expr) -> tuple:
    if isinstance(e, BinOp):
        return (e.left, e.right)
    if isinstance(e, (Neg, Abs)):
        return (e.arg,)
    if isinstance(e, Dist):
        return (e.x1, e.y1, e.x2, e.y2)
    if isinstance(e, Norm):
        return (e.a, e.b)
    return ()


def expr_names(e: Expr) -> set[str]:
    """Channel and constant names referenced by an expression."""
    if isinstance(e, (Channel, Const)):
        return {e.name}
    out: set[str] = set()
    for c in expr_children(e):
        out |= expr_names(c)
    return out


# ------------------------------------------------------------------- formulas


@dataclass(frozen=True)
class Interval:
    """Closed step interval [a, b]; ``b is None`` means unbounded."""

    a: int = 0
    b: Optional[int] = None

    def __post_init__(self) -> None:
        if self.a < 0:
            raise ValueError(f"interval lower bound must be >= 0, got {self.a}")
        if self.b is not None and self.b < self.a:
            raise ValueError(f"malformed interval [{self.a},{self.b}]: a > b")

    @property
    def unbounded(self) -> bool:
        return self.b is None

    def __str__(self) -> str:
        hi = "inf" if self.b is None else str(self.b)
        return f"[{self.a},{hi}]"


FULL = Interval(0, None)


@dataclass(frozen=True)
class TrueF:
    def __str__(self) -> str:
        return "true"


@dataclass(frozen=True)
class Pred:
    """``expr op bound``; robustness is ``expr - bound`` for ``>`` and ``bound - expr`` for ``<``."""

    expr: Expr
    op: str
    bound: Expr = Num(0.0)

    def __post_init__(self) -> None:
        if self.op not in ("<", ">"):
            raise ValueError(f"predicate operator must be < or >, got {self.op!r}")

    def normalized(self) -> tuple[Expr, Expr]:
        """Return (mu, c) with the predicate equivalent to ``mu(z) > c``."""
        if self.op == ">":
            return self.expr, self.bound
        bound = Num(-self.bound.value) if isinstance(self.bound, Num) else Neg(self.bound)
        return Neg(self.expr), bound

    def __str__(self) -> str:
        return f"({self.expr} {self.op} {self.bound})"


@dataclass(frozen=True)
class Not:
    arg: "Formula"

    def __str__(self) -> str:
        return f"(not {self.arg})"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"

    def __str__(self) -> str:
        return f"({self.left} and {self.right})"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"

    def __str__(self) -> str:
        return f"({self.left} or {self.right})"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"

    def __str__(self) -> str:
        return f"({self.left} implies {self.right})"


@dataclass(frozen=True)
class Until:
    left: "Formula"
    right: "Formula"
    interval: Interval = FULL

    def __str__(self) -> str:
        return f"({self.left} until{self.interval} {self.right})"


@dataclass(frozen=True)
class Eventually:
    arg: "Formula"
    interval: Interval = FULL

    def __str__(self) -> str:
        return f"eventually{self.interval} ({self.arg})"


@dataclass(frozen=True)
class Always:
    arg: "Formula"
    interval: Interval = FULL

    def __str__(self) -> str:
        return f"always{self.interval} ({self.arg})"


Formula = Union[TrueF, Pred, Not, And, Or, Implies, Until, Eventually, Always]


def children(f: Formula) -> tuple:
    if isinstance(f, (Not, Eventually, Always)):
        return (f.arg,)
    if isinstance(f, (And, Or, Implies, Until)):
        return (f.left, f.right)
    return ()


def conjunction(*formulas: Formula) -> Formula:
    if not formulas:
        return TrueF()
    out = formulas[0]
    for f in formulas[1:]:
        out = And(out, f)
    return out


def formula_names(f: Formula) -> set[str]:
    if isinstance(f, Pred):
        return expr_names(f.expr) | expr_names(f.bound)
    out: set[str] = set()
    for c in children(f):
        out |= formula_names(c)
    return out


def to_text(f: Formula) -> str:
    """Pretty-print in the formula language; ``parse_formula(to_text(f)) == f``."""
    return str(f)
