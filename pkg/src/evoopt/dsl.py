"""Expression language for evolved candidates.

Every candidate the search produces (a server score for VM placement, or a
penalty update rule for ADMM) is a single expression in this grammar::

    expr    := "if" cond "then" expr "else" expr | sum
    cond    := sum ("<" | "<=" | ">" | ">=") sum
    sum     := product (("+" | "-") product)*
    product := unary (("*" | "/") unary)*
    unary   := "-" unary | atom
    atom    := NUMBER | NAME | FUNC "(" expr ["," expr] ")" | "(" expr ")"

Functions are ``abs``, ``log``, ``exp`` (one argument) and ``min``, ``max``
(two arguments); ``safe_log``, ``safe_exp`` and ``safe_div`` are accepted as
aliases.  ``/`` is guarded division.  A minus sign directly in front of a
number literal is folded into a negative constant; any other unary minus is
read as ``0.0 - x``.  There are no loops, assignments or calls outside the
fixed function table, so evaluation is total.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Union

MAX_SOURCE_CHARS = 4096
MAX_NODES = 256
CONST_LIMIT = 1e12
EXP_CAP = 700.0

ARITH_OPS = ("+", "-", "*", "/", "min", "max")
UNARY_OPS = ("abs", "log", "exp")
COMPARE_OPS = ("<", "<=", ">", ">=")

_FUNC_ALIASES = {
    "abs": "abs",
    "log": "log",
    "safe_log": "log",
    "exp": "exp",
    "safe_exp": "exp",
    "min": "min",
    "max": "max",
    "safe_div": "/",
}
_KEYWORDS = {"if", "then", "else"}


class DslError(ValueError):
    """Base class for every error raised by the expression language."""


class DslSyntaxError(DslError):
    def __init__(self, position: int, message: str):
        super().__init__(f"{message} at offset {position}")
        self.position = position
        self.message = message


class LimitError(DslError):
    pass


class UnboundVariable(DslError):
    def __init__(self, name: str):
        super().__init__(f"unbound variable {name!r}")
        self.name = name


class ArityError(DslError):
    pass


class StepBudgetExceeded(DslError):
    pass


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Ast"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Ast"
    right: "Ast"


@dataclass(frozen=True)
class Cond:
    """Comparison guarding an ``If``; part of the ``If`` node, not a node itself."""

    op: str
    left: "Ast"
    right: "Ast"


@dataclass(frozen=True)
class If:
    cond: Cond
    then: "Ast"
    orelse: "Ast"


Ast = Union[Const, Var, Unary, Binary, If]


@dataclass(frozen=True)
class Signature:
    name: str
    variables: tuple[str, ...]


SCHEDULE = Signature("SCHEDULE", ("req_cpu", "req_mem", "free_cpu", "free_mem", "bin_util"))
PENALTY = Signature("PENALTY", ("p", "d", "beta", "k"))
SIGNATURES = {s.name: s for s in (SCHEDULE, PENALTY)}


@dataclass(frozen=True)
class EvalLimits:
    step_budget: int = 10_000
    clamp_abs: float = 1e12
    epsilon: float = 1e-9

    def __post_init__(self):
        if not (self.step_budget > 0 and self.clamp_abs > 0 and self.epsilon > 0):
            raise ValueError("evaluation limits must be strictly positive")


@dataclass(frozen=True)
class Program:
    ast: Ast
    signature: Signature
    source: str = field(compare=False)
    canonical_hash: str = field(compare=False)

    def __str__(self) -> str:
        return self.source


def children(node: Ast) -> tuple[Ast, ...]:
    if isinstance(node, Unary):
        return (node.child,)
    if isinstance(node, Binary):
        return (node.left, node.right)
    if isinstance(node, If):
        return (node.cond.left, node.cond.right, node.then, node.orelse)
    return ()


def node_count(node: Ast) -> int:
    return 1 + sum(node_count(c) for c in children(node))


def iter_paths(node: Ast, path: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], Ast]]:
    """Pre-order walk yielding ``(path, subtree)``; paths index into ``children``."""
    yield path, node
    for i, c in enumerate(children(node)):
        yield from iter_paths(c, path + (i,))


def replace_at(node: Ast, path: tuple[int, ...], new: Ast) -> Ast:
    if not path:
        return new
    i, rest = path[0], path[1:]
    if isinstance(node, Unary):
        return Unary(node.op, replace_at(node.child, rest, new))
    if isinstance(node, Binary):
        if i == 0:
            return Binary(node.op, replace_at(node.left, rest, new), node.right)
        return Binary(node.op, node.left, replace_at(node.right, rest, new))
    if isinstance(node, If):
        c = node.cond
        if i == 0:
            return If(Cond(c.op, replace_at(c.left, rest, new), c.right), node.then, node.orelse)
        if i == 1:
            return If(Cond(c.op, c.left, replace_at(c.right, rest, new)), node.then, node.orelse)
        if i == 2:
            return If(c, replace_at(node.then, rest, new), node.orelse)
        return If(c, node.then, replace_at(node.orelse, rest, new))
    raise IndexError(f"path {path} leads through a leaf")


# --------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op><=|>=|[-+*/<>(),])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str  # num, name, op, eof
    text: str
    pos: int


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise DslSyntaxError(pos, f"unexpected character {src[pos]!r}")
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.i = 0
        self.nodes = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        if self.tok.text != text or self.tok.kind == "eof":
            raise DslSyntaxError(self.tok.pos, f"expected {text!r}, found {self._describe()}")
        return self.advance()

    def _describe(self) -> str:
        return "end of input" if self.tok.kind == "eof" else repr(self.tok.text)

    def _node(self, node: Ast, pos: int) -> Ast:
        self.nodes += 1
        if self.nodes > MAX_NODES:
            raise LimitError(f"expression exceeds {MAX_NODES} nodes (offset {pos})")
        return node

    def parse(self) -> Ast:
        node = self.expr()
        if self.tok.kind != "eof":
            raise DslSyntaxError(self.tok.pos, f"unexpected {self._describe()}")
        return node

    def expr(self) -> Ast:
        if self.tok.kind == "name" and self.tok.text == "if":
            start = self.advance().pos
            cond = self.cond()
            self.expect("then")
            then = self.expr()
            self.expect("else")
            orelse = self.expr()
            return self._node(If(cond, then, orelse), start)
        return self.sum()

    def cond(self) -> Cond:
        left = self.sum()
        if self.tok.kind != "op" or self.tok.text not in COMPARE_OPS:
            raise DslSyntaxError(self.tok.pos, f"expected comparison, found {self._describe()}")
        op = self.advance().text
        right = self.sum()
        return Cond(op, left, right)

    def sum(self) -> Ast:
        node = self.product()
        while self.tok.kind == "op" and self.tok.text in ("+", "-"):
            t = self.advance()
            node = self._node(Binary(t.text, node, self.product()), t.pos)
        return node

    def product(self) -> Ast:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in ("*", "/"):
            t = self.advance()
            node = self._node(Binary(t.text, node, self.unary()), t.pos)
        return node

    def unary(self) -> Ast:
        if self.tok.kind == "op" and self.tok.text == "-":
            t = self.advance()
            nxt = self.tok
            if nxt.kind == "num" and nxt.pos == t.pos + 1:
                self.advance()
                return self._const(-float(nxt.text), t.pos)
            child = self.unary()
            zero = self._node(Const(0.0), t.pos)
            return self._node(Binary("-", zero, child), t.pos)
        return self.atom()

    def _const(self, value: float, pos: int) -> Ast:
        if not math.isfinite(value) or abs(value) > CONST_LIMIT:
            raise LimitError(f"constant {value!r} outside [-1e12, 1e12] (offset {pos})")
        return self._node(Const(value + 0.0), pos)

    def atom(self) -> Ast:
        t = self.tok
        if t.kind == "num":
            self.advance()
            return self._const(float(t.text), t.pos)
        if t.kind == "name":
            if t.text in _KEYWORDS:
                raise DslSyntaxError(t.pos, f"unexpected keyword {t.text!r}")
            self.advance()
            if self.tok.text == "(" and self.tok.kind == "op":
                return self.call(t)
            return self._node(Var(t.text), t.pos)
        if t.kind == "op" and t.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        raise DslSyntaxError(t.pos, f"expected operand, found {self._describe()}")

    def call(self, name: _Tok) -> Ast:
        op = _FUNC_ALIASES.get(name.text)
        if op is None:
            raise DslSyntaxError(name.pos, f"unknown function {name.text!r}")
        self.expect("(")
        args = [self.expr()]
        while self.tok.kind == "op" and self.tok.text == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        arity = 1 if op in UNARY_OPS else 2
        if len(args) != arity:
            raise DslSyntaxError(name.pos, f"{name.text} takes {arity} argument(s), got {len(args)}")
        if arity == 1:
            return self._node(Unary(op, args[0]), name.pos)
        return self._node(Binary(op, args[0], args[1]), name.pos)


def parse(src: str) -> Ast:
    if len(src) > MAX_SOURCE_CHARS:
        raise LimitError(f"source longer than {MAX_SOURCE_CHARS} characters")
    if not src.strip():
        raise DslSyntaxError(0, "empty expression")
    return _Parser(src).parse()


# --------------------------------------------------------------------------
# printing, typing


def _fmt_const(v: float) -> str:
    # repr is the shortest string that round-trips
    return repr(v + 0.0)


def to_source(node: Ast) -> str:
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        return f"{node.op}({to_source(node.child)})"
    if isinstance(node, Binary):
        if node.op in ("min", "max"):
            return f"{node.op}({to_source(node.left)}, {to_source(node.right)})"
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, If):
        c = node.cond
        return (
            f"(if {to_source(c.left)} {c.op} {to_source(c.right)} "
            f"then {to_source(node.then)} else {to_source(node.orelse)})"
        )
    raise ArityError(f"not an expression node: {node!r}")


def _hash(text: str) -> str:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


def _check(node: Ast, names: frozenset[str]) -> None:
    if isinstance(node, Const):
        if not isinstance(node.value, float) or not math.isfinite(node.value) or abs(node.value) > CONST_LIMIT:
            raise LimitError(f"constant {node.value!r} outside [-1e12, 1e12]")
    elif isinstance(node, Var):
        if node.name not in names:
            raise UnboundVariable(node.name)
    elif isinstance(node, Unary):
        if node.op not in UNARY_OPS:
            raise ArityError(f"{node.op!r} is not a unary operator")
    elif isinstance(node, Binary):
        if node.op not in ARITH_OPS:
            raise ArityError(f"{node.op!r} is not a binary operator")
    elif isinstance(node, If):
        if not isinstance(node.cond, Cond) or node.cond.op not in COMPARE_OPS:
            raise ArityError("if-node condition must be a comparison")
    else:
        raise ArityError(f"not an expression node: {node!r}")
    for c in children(node):
        _check(c, names)


def typecheck(ast: Ast, signature: Signature) -> Program:
    _check(ast, frozenset(signature.variables))
    if node_count(ast) > MAX_NODES:
        raise LimitError(f"expression exceeds {MAX_NODES} nodes")
    source = to_source(ast)
    return Program(ast, signature, source, _hash(source))


def compile_source(src: str, signature: Signature) -> Program:
    return typecheck(parse(src), signature)


def canonical_print(prog: Program) -> str:
    return prog.source


def complexity(prog: Program) -> int:
    return node_count(prog.ast)


# --------------------------------------------------------------------------
# evaluation


def _safe_div(a: float, b: float, eps: float) -> float:
    if abs(b) < eps:
        b = -eps if b < 0 else eps
    return a / b


def _apply_binary(op: str, a: float, b: float, eps: float) -> float:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return _safe_div(a, b, eps)
    if op == "min":
        return a if a <= b else b
    return a if a >= b else b


def _apply_unary(op: str, a: float, eps: float) -> float:
    if op == "abs":
        return abs(a)
    if op == "log":
        return math.log(abs(a) + eps)
    return math.exp(min(a, EXP_CAP))


def _compare(op: str, a: float, b: float) -> bool:
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def evaluate(prog: Program, bindings: Mapping[str, float], limits: EvalLimits = EvalLimits()) -> float:
    """Evaluate ``prog`` with every intermediate clamped to ``±limits.clamp_abs``.

    One step is charged per node visited; exceeding ``limits.step_budget``
    raises :class:`StepBudgetExceeded`.
    """
    missing = set(prog.signature.variables) - set(bindings)
    if missing:
        raise UnboundVariable(sorted(missing)[0])
    env = {k: float(v) for k, v in bindings.items()}
    for k, v in env.items():
        if not math.isfinite(v):
            raise DslError(f"binding {k}={v} is not finite")
    lim, eps, budget = limits.clamp_abs, limits.epsilon, limits.step_budget
    steps = 0

    def clamp(v: float) -> float:
        if v > lim:
            return lim
        if v < -lim:
            return -lim
        return v

    def ev(node: Ast) -> float:
        nonlocal steps
        steps += 1
        if steps > budget:
            raise StepBudgetExceeded(f"step budget {budget} exhausted")
        if isinstance(node, Const):
            return clamp(node.value)
        if isinstance(node, Var):
            return clamp(env[node.name])
        if isinstance(node, Binary):
            a = ev(node.left)
            b = ev(node.right)
            return clamp(_apply_binary(node.op, a, b, eps))
        if isinstance(node, Unary):
            return clamp(_apply_unary(node.op, ev(node.child), eps))
        c = node.cond
        a = ev(c.left)
        b = ev(c.right)
        return ev(node.then) if _compare(c.op, a, b) else ev(node.orelse)

    out = ev(prog.ast)
    if not math.isfinite(out):  # pragma: no cover - guarded by construction
        raise AssertionError(f"non-finite result from {prog.source}")
    return out


def compile_program(prog: Program, limits: EvalLimits = EvalLimits()) -> Callable[..., float]:
    """Build a closure with the same semantics as :func:`evaluate`.

    The closure takes the signature variables as keyword arguments and skips
    per-call binding checks, which matters in the simulator's inner loop.
    Programs that could exceed the step budget fall back to the interpreter.
    """
    if node_count(prog.ast) > limits.step_budget:
        return lambda **kw: evaluate(prog, kw, limits)
    lim, eps = limits.clamp_abs, limits.epsilon

    def clamp(v: float) -> float:
        return lim if v > lim else (-lim if v < -lim else v)

    def build(node: Ast) -> Callable[[dict], float]:
        if isinstance(node, Const):
            v = clamp(node.value)
            return lambda env: v
        if isinstance(node, Var):
            name = node.name
            return lambda env: clamp(env[name])
        if isinstance(node, Unary):
            f, op = build(node.child), node.op
            return lambda env: clamp(_apply_unary(op, f(env), eps))
        if isinstance(node, Binary):
            f, g, op = build(node.left), build(node.right), node.op
            if op == "+":
                return lambda env: clamp(f(env) + g(env))
            if op == "-":
                return lambda env: clamp(f(env) - g(env))
            if op == "*":
                return lambda env: clamp(f(env) * g(env))
            return lambda env: clamp(_apply_binary(op, f(env), g(env), eps))
        c = node.cond
        fl, fr, ft, fe, op = build(c.left), build(c.right), build(node.then), build(node.orelse), c.op
        return lambda env: ft(env) if _compare(op, fl(env), fr(env)) else fe(env)

    fn = build(prog.ast)
    return lambda **kw: fn(kw)
