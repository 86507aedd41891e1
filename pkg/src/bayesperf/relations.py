"""Algebraic relations between events and the factor graph built from them.

Relations are written as s-expressions over event names::

    expr  := NAME | NUMBER | "$" PARAM | "(" OP expr expr+ ")" | "(" "sub" expr ")"
    OP    := add | sub | mul | div        (aliases: + - * /)

``add``/``mul`` fold left over any number of arguments, ``(sub x)`` is
negation, ``$name`` refers to an entry of the factor's ``params``.  Event
names may contain letters, digits, ``_``, ``.`` and ``:``.

Relation file JSON::

    {"factors": [{"id": "dram_bw", "lhs": "BW_CYCLES",
                  "rhs": "(mul (div LLC_MISS CLKS) $k)",
                  "slack_sigma": 0.01, "params": {"k": 64.0}}]}

Each factor is a soft equality: its log-density is
``-0.5 * ((lhs - rhs) / (slack_sigma * scale))**2`` where ``scale`` is
``max(|lhs|, |rhs|, 1)`` at the evaluated point, or 1 for factors marked
``"absolute": true``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (DivisionByZero, DuplicateFactorId, ExpressionSyntaxError,
                     InputError, UnknownEvent)

DEFAULT_SLACK = 0.01

_OPS = {"add": "add", "+": "add", "sub": "sub", "-": "sub",
        "mul": "mul", "*": "mul", "div": "div", "/": "div"}
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.:]*$")


# Expressions -----------------------------------------------------------------


class Expression:
    def evaluate(self, values, params=None):
        raise NotImplementedError

    def variables(self) -> frozenset:
        raise NotImplementedError

    def denominators(self) -> frozenset:
        """Events appearing anywhere inside a divisor."""
        return frozenset()


@dataclass(frozen=True)
class Var(Expression):
    name: str

    def evaluate(self, values, params=None):
        return values[self.name]

    def variables(self):
        return frozenset([self.name])

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Const(Expression):
    value: float

    def evaluate(self, values, params=None):
        return self.value

    def variables(self):
        return frozenset()

    def __str__(self):
        return repr(float(self.value))


@dataclass(frozen=True)
class Param(Expression):
    name: str

    def evaluate(self, values, params=None):
        if not params or self.name not in params:
            raise InputError(f"unbound parameter ${self.name}")
        return params[self.name]

    def variables(self):
        return frozenset()

    def __str__(self):
        return "$" + self.name


@dataclass(frozen=True)
class BinOp(Expression):
    op: str
    left: Expression
    right: Expression

    def evaluate(self, values, params=None):
        a = self.left.evaluate(values, params)
        b = self.right.evaluate(values, params)
        if self.op == "add":
            return a + b
        if self.op == "sub":
            return a - b
        if self.op == "mul":
            return a * b
        if np.any(np.asarray(b) == 0):
            raise DivisionByZero(f"division by zero in {self}")
        return a / b

    def variables(self):
        return self.left.variables() | self.right.variables()

    def denominators(self):
        inner = self.left.denominators() | self.right.denominators()
        if self.op == "div":
            inner |= self.right.variables()
        return inner

    def __str__(self):
        return f"({self.op} {self.left} {self.right})"


def Add(a, b):
    return BinOp("add", a, b)


def Sub(a, b):
    return BinOp("sub", a, b)


def Mul(a, b):
    return BinOp("mul", a, b)


def Div(a, b):
    return BinOp("div", a, b)


def _tokenize(text):
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_expression(text: str) -> Expression:
    tokens = _tokenize(text)
    if not tokens:
        raise ExpressionSyntaxError("empty expression")
    pos = 0

    def atom(tok):
        try:
            return Const(float(tok))
        except ValueError:
            pass
        if tok.startswith("$") and _NAME.match(tok[1:]):
            return Param(tok[1:])
        if _NAME.match(tok):
            return Var(tok)
        raise ExpressionSyntaxError(f"bad token {tok!r} in {text!r}")

    def parse():
        nonlocal pos
        if pos >= len(tokens):
            raise ExpressionSyntaxError(f"unexpected end of {text!r}")
        tok = tokens[pos]
        pos += 1
        if tok == ")":
            raise ExpressionSyntaxError(f"unexpected ')' in {text!r}")
        if tok != "(":
            return atom(tok)
        if pos >= len(tokens) or tokens[pos] not in _OPS:
            raise ExpressionSyntaxError(f"expected operator after '(' in {text!r}")
        op = _OPS[tokens[pos]]
        pos += 1
        args = []
        while pos < len(tokens) and tokens[pos] != ")":
            args.append(parse())
        if pos >= len(tokens):
            raise ExpressionSyntaxError(f"missing ')' in {text!r}")
        pos += 1
        if op == "sub" and len(args) == 1:
            return BinOp("sub", Const(0.0), args[0])
        if len(args) < 2 or (op in ("sub", "div") and len(args) != 2):
            raise ExpressionSyntaxError(f"wrong number of arguments to {op} in {text!r}")
        node = args[0]
        for arg in args[1:]:
            node = BinOp(op, node, arg)
        return node

    expr = parse()
    if pos != len(tokens):
        raise ExpressionSyntaxError(f"trailing tokens in {text!r}")
    return expr


# Factors ---------------------------------------------------------------------


@dataclass(frozen=True)
class RelationFactor:
    id: str
    lhs: Expression
    rhs: Expression
    slack_sigma: float = DEFAULT_SLACK
    params: Mapping[str, float] = field(default_factory=dict)
    absolute: bool = False

    def __post_init__(self):
        if isinstance(self.lhs, str):
            object.__setattr__(self, "lhs", parse_expression(self.lhs))
        if isinstance(self.rhs, str):
            object.__setattr__(self, "rhs", parse_expression(self.rhs))
        if not self.slack_sigma > 0:
            raise InputError(f"factor {self.id}: slack_sigma must be positive")
        if not self.scope:
            raise InputError(f"factor {self.id} references no events")

    def __hash__(self):
        return hash(self.id)

    @property
    def scope(self) -> frozenset:
        return self.lhs.variables() | self.rhs.variables()

    def positive_events(self) -> frozenset:
        return self.lhs.denominators() | self.rhs.denominators()

    def sides(self, values):
        return self.lhs.evaluate(values, self.params), self.rhs.evaluate(values, self.params)

    def residual(self, values):
        a, b = self.sides(values)
        return a - b

    def scale(self, values):
        a, b = self.sides(values)
        if self.absolute:
            return np.ones_like(np.asarray(a - b, dtype=float))
        return np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)

    def with_slack(self, slack_sigma: float) -> "RelationFactor":
        return RelationFactor(self.id, self.lhs, self.rhs, slack_sigma, dict(self.params),
                              self.absolute)

    def to_json(self) -> dict:
        out = {"id": self.id, "lhs": str(self.lhs), "rhs": str(self.rhs),
               "slack_sigma": self.slack_sigma}
        if self.params:
            out["params"] = dict(self.params)
        if self.absolute:
            out["absolute"] = True
        return out

    @classmethod
    def from_json(cls, obj) -> "RelationFactor":
        try:
            return cls(str(obj["id"]), parse_expression(obj["lhs"]), parse_expression(obj["rhs"]),
                       float(obj.get("slack_sigma", DEFAULT_SLACK)),
                       {k: float(v) for k, v in obj.get("params", {}).items()},
                       bool(obj.get("absolute", False)))
        except KeyError as exc:
            raise InputError(f"factor is missing field {exc}") from exc


def evaluate_factor(factor: RelationFactor, values, weight: float = 1.0):
    """Unnormalised log-density of a factor; 0 exactly when lhs == rhs.

    ``values`` may hold scalars or equally-shaped arrays (vectorised over
    MCMC chains).  ``weight`` tempers the factor (``factor ** weight``).
    """
    missing = factor.scope - set(values)
    if missing:
        raise InputError(f"factor {factor.id} needs values for {sorted(missing)}")
    a, b = factor.sides(values)
    if factor.absolute:
        scale = 1.0
    else:
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    z = (a - b) / (factor.slack_sigma * scale)
    return -0.5 * weight * z * z


def load_relations(path) -> list:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return relations_from_json(obj)


def relations_from_json(obj) -> list:
    if not isinstance(obj, dict) or "factors" not in obj:
        raise InputError("relation file needs a top-level 'factors' list")
    return [RelationFactor.from_json(f) for f in obj["factors"]]


def relations_to_json(factors) -> dict:
    return {"factors": [f.to_json() for f in factors]}


# Factor graph ----------------------------------------------------------------


@dataclass(frozen=True)
class FactorGraph:
    """Bipartite graph of event variables and relation factors."""

    variables: tuple
    factors: tuple
    edges: frozenset

    def __post_init__(self):
        neighbours = {v: set() for v in self.variables}
        factors_of = {v: [] for v in self.variables}
        for f in self.factors:
            for v in f.scope:
                factors_of[v].append(f)
                neighbours[v] |= f.scope - {v}
        object.__setattr__(self, "_neighbours", {v: frozenset(s) for v, s in neighbours.items()})
        object.__setattr__(self, "_factors_of", {v: tuple(fs) for v, fs in factors_of.items()})
        object.__setattr__(self, "_by_id", {f.id: f for f in self.factors})

    def __contains__(self, name):
        return name in self._neighbours

    def neighbours(self, name: str) -> frozenset:
        """Variables sharing at least one factor with ``name``."""
        try:
            return self._neighbours[name]
        except KeyError:
            raise UnknownEvent(name) from None

    def factors_of(self, name: str) -> tuple:
        try:
            return self._factors_of[name]
        except KeyError:
            raise UnknownEvent(name) from None

    def factor(self, factor_id: str) -> RelationFactor:
        return self._by_id[factor_id]

    def degree(self, name: str) -> int:
        return len(self.factors_of(name))


def build_factor_graph(catalog, relations) -> FactorGraph:
    names = tuple(catalog.names) if hasattr(catalog, "names") else tuple(catalog)
    known = set(names)
    seen = set()
    edges = set()
    for f in relations:
        if f.id in seen:
            raise DuplicateFactorId(f.id)
        seen.add(f.id)
        for v in sorted(f.scope):
            if v not in known:
                raise UnknownEvent(v)
            edges.add((v, f.id))
    return FactorGraph(names, tuple(relations), frozenset(edges))


def markov_blanket(graph: FactorGraph, targets) -> frozenset:
    targets = frozenset(targets)
    out = set()
    for t in targets:
        out |= graph.neighbours(t)
    return frozenset(out - targets)


def event_blanket_union(graph: FactorGraph, events) -> frozenset:
    """Union of per-event blankets (each excludes only its own event)."""
    out = set()
    for e in events:
        out |= graph.neighbours(e)
    return frozenset(out)


def solve_for(factor: RelationFactor, unknown: str, values: Mapping[str, float],
              guess: float = 1.0):
    """Value of ``unknown`` that zeroes the factor residual, others fixed.

    Returns None when no finite root is found.
    """
    from scipy.optimize import brentq

    def g(x):
        v = dict(values)
        v[unknown] = x
        try:
            return float(factor.residual(v))
        except (DivisionByZero, ZeroDivisionError):
            return math.nan

    lo, hi = max(abs(guess), 1.0) * 1e-6, max(abs(guess), 1.0)
    f_lo = g(lo)
    for _ in range(60):
        f_hi = g(hi)
        if math.isfinite(f_lo) and math.isfinite(f_hi) and f_lo * f_hi <= 0:
            try:
                return brentq(g, lo, hi, xtol=1e-12 * hi, maxiter=200)
            except (ValueError, RuntimeError):
                return None
        lo, f_lo = hi, f_hi
        hi *= 2.0
    return None
