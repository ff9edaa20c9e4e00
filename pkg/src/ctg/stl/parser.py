"""Recursive-descent parser for the STL formula language.

Grammar (lowest to highest precedence)::

    formula   := implies
    implies   := or ("implies" implies)?
    or        := and ("or" and)*
    and       := until ("and" until)*
    until     := unary ("until" interval? unary)?
    unary     := "not" unary
               | ("always" | "eventually") interval? "(" formula ")"
               | "true"
               | "(" formula ")"
               | pred
    pred      := expr (("<" | ">") expr)?          # bare expr means expr > 0
    expr      := term (("+" | "-") term)*
    term      := factor ("*" factor)*
    factor    := "-" factor | number | name | "(" expr ")"
               | "abs" "(" expr ")" | "dist" "(" expr "," expr "," expr "," expr ")"
               | "norm" "(" expr "," expr ")"
    interval  := "[" bound "," (bound | "inf") "]"

Interval bounds are integer steps; with ``dt`` given they are seconds and are
converted with ``floor(value / dt)``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

from .ast import (
    CHANNELS,
    SCENE_CONSTANTS,
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
)

KEYWORDS = {"true", "not", "and", "or", "implies", "until", "always", "eventually", "inf"}
FUNCTIONS = {"abs", "dist", "norm"}


class StlSyntaxError(ValueError):
    """Raised for malformed formula text; carries 1-based line and column."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class UnknownChannelError(StlSyntaxError):
    pass


@dataclass
class Token:
    kind: str  # num, name, op, eof
    text: str
    line: int
    col: int


_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r]+)"
    r"|(?P<nl>\n)"
    r"|(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[()\[\],<>+\-*])"
)


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start, pos = 1, 0, 0
    # comment lines are blanked out so columns stay accurate
    text = "\n".join("" if ln.lstrip().startswith("#") else ln for ln in text.split("\n"))
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise StlSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind != "ws":
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, dt: Optional[float]):
        self.toks = tokenize(text)
        self.i = 0
        self.dt = dt

    # -- token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("op", "name") and t.text == text

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.fail(f"expected {text!r}")
        t = self.tok
        self.i += 1
        return t

    def fail(self, message: str, tok: Optional[Token] = None):
        t = tok or self.tok
        found = "end of input" if t.kind == "eof" else repr(t.text)
        raise StlSyntaxError(f"{message}, found {found}", t.line, t.col)

    # -- formulas
    def formula(self) -> Formula:
        left = self.or_()
        if self.accept("implies"):
            return Implies(left, self.formula())
        return left

    def or_(self) -> Formula:
        out = self.and_()
        while self.accept("or"):
            out = Or(out, self.and_())
        return out

    def and_(self) -> Formula:
        out = self.until()
        while self.accept("and"):
            out = And(out, self.until())
        return out

    def until(self) -> Formula:
        left = self.unary()
        if self.accept("until"):
            iv = self.interval_opt()
            return Until(left, self.unary(), iv)
        return left

    def unary(self) -> Formula:
        if self.accept("not"):
            return Not(self.unary())
        for kw, cls in (("always", Always), ("eventually", Eventually)):
            if self.accept(kw):
                iv = self.interval_opt()
                self.expect("(")
                inner = self.formula()
                self.expect(")")
                return cls(inner, iv)
        if self.accept("true"):
            return TrueF()
        if self.at("("):
            # Either a parenthesised formula or a predicate whose expression
            # starts with "(". Try the predicate reading first and backtrack.
            start = self.i
            try:
                return self.pred()
            except StlSyntaxError:
                self.i = start
            self.expect("(")
            inner = self.formula()
            self.expect(")")
            return inner
        return self.pred()

    def pred(self) -> Pred:
        lhs = self.expr()
        for op in ("<", ">"):
            if self.accept(op):
                return Pred(lhs, op, self.expr())
        if self.at(")") or self.tok.kind == "eof" or self.tok.text in KEYWORDS:
            return Pred(lhs, ">", Num(0.0))
        self.fail("expected '<', '>' or end of predicate")

    def interval_opt(self) -> Interval:
        if not self.at("["):
            return Interval(0, None)
        open_tok = self.expect("[")
        a = self.interval_bound()
        self.expect(",")
        if self.accept("inf"):
            b = None
        else:
            b = self.interval_bound()
        self.expect("]")
        if b is not None and a > b:
            raise StlSyntaxError(f"malformed interval [{a},{b}]: lower bound exceeds upper", open_tok.line, open_tok.col)
        return Interval(a, b)

    def interval_bound(self) -> int:
        t = self.tok
        if t.kind != "num":
            self.fail("expected interval bound")
        self.i += 1
        value = float(t.text)
        if self.dt is not None:
            # tolerance guards against 1.5 / 0.1 = 14.999999999999998
            return int(math.floor(value / self.dt + 1e-9))
        if not value.is_integer():
            raise StlSyntaxError(f"interval bound {t.text} must be an integer step count", t.line, t.col)
        return int(value)

    # -- expressions
    def expr(self) -> Expr:
        out = self.term()
        while self.at("+") or self.at("-"):
            op = self.tok.text
            self.i += 1
            out = BinOp(op, out, self.term())
        return out

    def term(self) -> Expr:
        out = self.factor()
        while self.accept("*"):
            out = BinOp("*", out, self.factor())
        return out

    def factor(self) -> Expr:
        t = self.tok
        if self.accept("-"):
            if self.tok.kind == "num":
                value = float(self.tok.text)
                self.i += 1
                return Num(-value)
            return Neg(self.factor())
        if t.kind == "num":
            self.i += 1
            return Num(float(t.text))
        if self.accept("("):
            inner = self.expr()
            self.expect(")")
            return inner
        if t.kind == "name":
            if t.text in FUNCTIONS:
                self.i += 1
                self.expect("(")
                args = [self.expr()]
                while self.accept(","):
                    args.append(self.expr())
                self.expect(")")
                want = {"abs": 1, "dist": 4, "norm": 2}[t.text]
                if len(args) != want:
                    raise StlSyntaxError(f"{t.text}() takes {want} argument(s), got {len(args)}", t.line, t.col)
                if t.text == "abs":
                    return Abs(args[0])
                if t.text == "dist":
                    return Dist(*args)
                return Norm(*args)
            if t.text in KEYWORDS:
                self.fail("expected expression")
            self.i += 1
            if t.text in CHANNELS:
                return Channel(t.text)
            if t.text in SCENE_CONSTANTS:
                return Const(t.text)
            raise UnknownChannelError(f"unknown channel name {t.text!r}", t.line, t.col)
        self.fail("expected expression")


def parse_formula(text: str, dt: Optional[float] = None) -> Formula:
    """Parse formula text into an AST.

    If ``dt`` is given, interval bounds are read as seconds and floored to steps.
    """
    p = _Parser(text, dt)
    if p.tok.kind == "eof":
        p.fail("empty formula")
    out = p.formula()
    if p.tok.kind != "eof":
        p.fail("unexpected trailing input")
    return out


def parse_expr(text: str) -> Expr:
    p = _Parser(text, None)
    out = p.expr()
    if p.tok.kind != "eof":
        p.fail("unexpected trailing input")
    return out
