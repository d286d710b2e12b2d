"""Small arithmetic expression language for user-defined coefficient functions.

Expressions are parsed from text like ``"vf*(1 - x/rho_max)"`` into an AST over
variables, named constants, ``+ - * /``, power (``^`` or ``**``), unary minus,
and the primitives ``min``, ``max``, ``clamp(x, lo, hi)``. Precedence is
power > unary minus > mul/div > add/sub; binary operators of equal precedence
associate left, power associates right. Division is guarded: evaluating with a
zero divisor raises instead of returning inf/nan.

An expression can also be compiled to a flat stack program (`Program`) that the
integration kernels execute; `run_program` is the reference interpreter for it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

# Stack-program opcodes. The compiled kernel hardcodes the same values; the
# kernel test suite asserts agreement.
OP_CONST = 0
OP_VAR_T = 1
OP_VAR_X = 2
OP_ADD = 3
OP_SUB = 4
OP_MUL = 5
OP_DIV = 6
OP_POW = 7
OP_NEG = 8
OP_MIN = 9
OP_MAX = 10
OP_CLAMP = 11
OP_TABLE = 12

MAX_STACK = 64


class ExpressionError(Exception):
    """Base class for expression failures."""


class ParseError(ExpressionError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at character {pos})")
        self.pos = pos


class EvaluationError(ExpressionError):
    pass


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Sampled:
    """Reference to a named piecewise-linear table, evaluated at t."""

    name: str


@dataclass(frozen=True)
class Neg:
    operand: object


@dataclass(frozen=True)
class Bin:
    op: str  # one of + - * / ^
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    func: str  # min | max | clamp
    args: tuple


@dataclass(frozen=True)
class Table:
    """Sampled time signal with linear interpolation, constant beyond the ends."""

    name: str
    ts: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.ts, dtype=float)
        vals = np.asarray(self.vals, dtype=float)
        if ts.ndim != 1 or ts.shape != vals.shape or ts.size == 0:
            raise ValueError("table needs matching nonempty 1-d time/value arrays")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("table times must be strictly increasing")
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "vals", vals)

    def __call__(self, t):
        return np.interp(t, self.ts, self.vals)


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_OPS = {"+", "-", "*", "/", "^", "(", ")", ","}


def _tokenize(src: str):
    tokens = []  # (kind, text, pos)
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            try:
                float(src[i:j])
            except ValueError:
                raise ParseError(f"malformed number {src[i:j]!r}", i) from None
            tokens.append(("num", src[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            tokens.append(("ident", src[i:j], i))
            i = j
            continue
        if c == "*" and i + 1 < n and src[i + 1] == "*":
            tokens.append(("op", "^", i))
            i += 2
            continue
        if c in _OPS:
            tokens.append(("op", c, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(("end", "", n))
    return tokens


_FUNCS = {"min": 2, "max": 2, "clamp": 3}  # minimum arity; min/max allow more


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.tokens = _tokenize(src)
        self.k = 0

    def peek(self):
        return self.tokens[self.k]

    def next(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect(self, text: str):
        kind, tok, pos = self.next()
        if tok != text:
            raise ParseError(f"expected {text!r}, found {tok or 'end of input'!r}", pos)

    def parse(self):
        node = self.expr()
        kind, tok, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected trailing {tok!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            node = Bin(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            node = Bin(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.next()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.next()
            return Bin("^", base, self.unary())  # right-associative
        return base

    def atom(self):
        kind, tok, pos = self.next()
        if kind == "num":
            return Num(float(tok))
        if kind == "ident":
            if self.peek()[1] == "(":
                if tok not in _FUNCS:
                    raise ParseError(f"unknown function {tok!r}", pos)
                self.next()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.next()
                    args.append(self.expr())
                self.expect(")")
                if tok == "clamp" and len(args) != 3:
                    raise ParseError("clamp takes exactly 3 arguments", pos)
                if tok in ("min", "max") and len(args) < 2:
                    raise ParseError(f"{tok} takes at least 2 arguments", pos)
                return Call(tok, tuple(args))
            return Var(tok)
        if tok == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ParseError(f"expected a value, found {tok or 'end of input'!r}", pos)


# ---------------------------------------------------------------------------
# Expression wrapper
# ---------------------------------------------------------------------------

def _walk(node):
    yield node
    if isinstance(node, Neg):
        yield from _walk(node.operand)
    elif isinstance(node, Bin):
        yield from _walk(node.left)
        yield from _walk(node.right)
    elif isinstance(node, Call):
        for a in node.args:
            yield from _walk(a)


def _eval_node(node, env, tables):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return float(env[node.name])
        except KeyError:
            raise EvaluationError(f"unknown identifier {node.name!r}") from None
    if isinstance(node, Sampled):
        try:
            table = tables[node.name]
        except (KeyError, TypeError):
            raise EvaluationError(f"unknown table {node.name!r}") from None
        return float(table(env["t"]))
    if isinstance(node, Neg):
        return -_eval_node(node.operand, env, tables)
    if isinstance(node, Bin):
        a = _eval_node(node.left, env, tables)
        b = _eval_node(node.right, env, tables)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if b == 0.0:
                raise EvaluationError("division by zero")
            return a / b
        out = a ** b
        if not np.isfinite(out):
            raise EvaluationError(f"non-finite power {a}^{b}")
        return out
    if isinstance(node, Call):
        vals = [_eval_node(a, env, tables) for a in node.args]
        if node.func == "min":
            return min(vals)
        if node.func == "max":
            return max(vals)
        x, lo, hi = vals
        return min(max(x, lo), hi)
    raise EvaluationError(f"cannot evaluate node {node!r}")


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _to_source(node, parent_prec=0):
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Sampled):
        return node.name
    if isinstance(node, Neg):
        inner = _to_source(node.operand, 3)
        text = f"-{inner}"
        return f"({text})" if parent_prec > 3 else text
    if isinstance(node, Bin):
        prec = _PREC[node.op]
        # left operand keeps `prec`, right needs one tighter for left-assoc ops
        left = _to_source(node.left, prec)
        right = _to_source(node.right, prec if node.op == "^" else prec + 1)
        text = f"{left} {node.op} {right}"
        return f"({text})" if parent_prec > prec or (parent_prec == prec and node.op != "^") else text
    if isinstance(node, Call):
        return f"{node.func}({', '.join(_to_source(a) for a in node.args)})"
    raise ValueError(f"cannot print node {node!r}")


def _substitute(node, name, replacement):
    if isinstance(node, Var) and node.name == name:
        return replacement
    if isinstance(node, Neg):
        return Neg(_substitute(node.operand, name, replacement))
    if isinstance(node, Bin):
        return Bin(node.op, _substitute(node.left, name, replacement),
                   _substitute(node.right, name, replacement))
    if isinstance(node, Call):
        return Call(node.func, tuple(_substitute(a, name, replacement) for a in node.args))
    return node


@dataclass(frozen=True)
class Expression:
    root: object
    source: str

    @staticmethod
    def parse(src: str) -> "Expression":
        if not src or not src.strip():
            raise ParseError("empty expression", 0)
        return Expression(_Parser(src).parse(), src)

    @staticmethod
    def constant(value: float) -> "Expression":
        return Expression(Num(float(value)), repr(float(value)))

    @staticmethod
    def sampled(name: str) -> "Expression":
        return Expression(Sampled(name), name)

    def variables(self) -> frozenset:
        return frozenset(n.name for n in _walk(self.root) if isinstance(n, Var))

    def tables(self) -> frozenset:
        return frozenset(n.name for n in _walk(self.root) if isinstance(n, Sampled))

    def __call__(self, env: Mapping[str, float], tables: Mapping[str, Table] | None = None) -> float:
        return float(_eval_node(self.root, env, tables))

    def to_source(self) -> str:
        return _to_source(self.root)

    def substitute(self, name: str, replacement: "Expression") -> "Expression":
        root = _substitute(self.root, name, replacement.root)
        return Expression(root, _to_source(root))


def parse_expression(src: str) -> Expression:
    """Parse text into an `Expression`; errors carry character positions."""
    return Expression.parse(src)


# ---------------------------------------------------------------------------
# Compilation to stack programs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Program:
    """Flat stack program over (t, x): int32 (opcode, arg) pairs + constant pool."""

    codes: np.ndarray  # shape (2k,), int32: op, arg, op, arg, ...
    consts: np.ndarray  # float64 pool
    stack_need: int
    source: str = ""


def compile_expression(expr: Expression, x_var: str | None,
                       constants: Mapping[str, float] | None = None,
                       table_ids: Mapping[str, int] | None = None) -> Program:
    """Compile to a program over variables t and (optionally) one state variable.

    Any other identifier must be resolvable through `constants`; sampled-table
    nodes need an id in `table_ids`.
    """
    constants = constants or {}
    table_ids = table_ids or {}
    codes: list[int] = []
    consts: list[float] = []

    def emit_const(value: float):
        consts.append(float(value))
        codes.extend((OP_CONST, len(consts) - 1))

    def emit(node) -> int:  # returns stack need
        if isinstance(node, Num):
            emit_const(node.value)
            return 1
        if isinstance(node, Var):
            if node.name == "t":
                codes.extend((OP_VAR_T, 0))
            elif x_var is not None and node.name == x_var:
                codes.extend((OP_VAR_X, 0))
            elif node.name in constants:
                emit_const(constants[node.name])
            else:
                raise EvaluationError(
                    f"unknown identifier {node.name!r} (not t, not the state variable, "
                    f"and not a declared constant)")
            return 1
        if isinstance(node, Sampled):
            if node.name not in table_ids:
                raise EvaluationError(f"table {node.name!r} has no registered id")
            codes.extend((OP_TABLE, table_ids[node.name]))
            return 1
        if isinstance(node, Neg):
            need = emit(node.operand)
            codes.extend((OP_NEG, 0))
            return need
        if isinstance(node, Bin):
            n1 = emit(node.left)
            n2 = emit(node.right)
            codes.extend(({"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV,
                           "^": OP_POW}[node.op], 0))
            return max(n1, 1 + n2)
        if isinstance(node, Call):
            if node.func == "clamp":
                x, lo, hi = node.args
                n1 = emit(x)
                n2 = emit(lo)
                n3 = emit(hi)
                codes.extend((OP_CLAMP, 0))
                return max(n1, 1 + n2, 2 + n3)
            op = OP_MIN if node.func == "min" else OP_MAX
            need = emit(node.args[0])
            for arg in node.args[1:]:
                need = max(need, 1 + emit(arg))
                codes.extend((op, 0))
            return need
        raise EvaluationError(f"cannot compile node {node!r}")

    stack_need = emit(expr.root)
    if stack_need > MAX_STACK:
        raise EvaluationError(f"expression too deep for the kernel stack ({stack_need} > {MAX_STACK})")
    return Program(np.asarray(codes, dtype=np.int32), np.asarray(consts, dtype=np.float64),
                   stack_need, expr.source)


def run_program(prog: Program, t, x, tables: Sequence[Table] = ()):
    """Reference interpreter; `t` is scalar, `x` may be scalar or ndarray."""
    stack = []
    codes = prog.codes
    for k in range(0, len(codes), 2):
        op, arg = int(codes[k]), int(codes[k + 1])
        if op == OP_CONST:
            stack.append(prog.consts[arg])
        elif op == OP_VAR_T:
            stack.append(t)
        elif op == OP_VAR_X:
            stack.append(x)
        elif op == OP_TABLE:
            stack.append(tables[arg](t))
        elif op == OP_NEG:
            stack[-1] = -stack[-1]
        elif op == OP_CLAMP:
            hi = stack.pop()
            lo = stack.pop()
            stack[-1] = np.minimum(np.maximum(stack[-1], lo), hi)
        else:
            b = stack.pop()
            a = stack[-1]
            if op == OP_ADD:
                stack[-1] = a + b
            elif op == OP_SUB:
                stack[-1] = a - b
            elif op == OP_MUL:
                stack[-1] = a * b
            elif op == OP_DIV:
                if np.any(b == 0.0):
                    raise EvaluationError("division by zero")
                stack[-1] = a / b
            elif op == OP_POW:
                stack[-1] = a ** b
            elif op == OP_MIN:
                stack[-1] = np.minimum(a, b)
            elif op == OP_MAX:
                stack[-1] = np.maximum(a, b)
            else:
                raise EvaluationError(f"bad opcode {op}")
    return stack[-1]
