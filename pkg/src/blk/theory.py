"""Runtime-defined theory functions for muSR fitting.

The user writes a single infix expression over the time variable ``t``,
indirectly addressed parameters ``p[m[k]]``, precomputed function values
``f[m[k]]``, the scalar builtins exp/log/cos/sin/sqrt/pow, and a small
library of muSR shapes:

    se(t, lam)        exp(-lam*t)
    ge(t, lam, beta)  exp(-(lam*t)**beta)
    sg(t, sigma)      exp(-0.5*(sigma*t)**2)
    stg(t, sigma)     1/3 + 2/3*(1 - (sigma*t)**2)*exp(-0.5*(sigma*t)**2)
    tf(t, phi, nu)    cos(2*pi*nu*t + phi*pi/180)   # phi degrees, nu MHz

Expressions parse to a small postfix program evaluated on numpy arrays, so
a single evaluate() call covers a whole histogram.  Precedence: unary minus
binds tighter than ^ (so -x^2 == (-x)^2), then ^ (right-associative), then
* and /, then + and -, all binaries otherwise left-associative.

The indirect map array decouples expression slots from the global parameter
vector: slot k reads p[map[k]] or f[map[k]], which lets one expression serve
many datasets with per-dataset bindings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

__all__ = [
    "TheoryExpr",
    "TheoryBinding",
    "TheoryError",
    "ParseError",
    "EvalError",
    "parse",
    "evaluate",
    "MUSR_FUNCTIONS",
]


class TheoryError(ValueError):
    pass


class ParseError(TheoryError):
    """Syntax or semantic error in the expression source, with position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class EvalError(TheoryError):
    pass


# -- builtin functions ----------------------------------------------------

def _se(t, lam):
    return np.exp(-lam * t)


def _ge(t, lam, beta):
    return np.exp(-np.power(lam * t, beta))


def _sg(t, sigma):
    return np.exp(-0.5 * np.power(sigma * t, 2.0))


def _stg(t, sigma):
    st2 = np.power(sigma * t, 2.0)
    return 1.0 / 3.0 + (2.0 / 3.0) * (1.0 - st2) * np.exp(-0.5 * st2)


def _tf(t, phi, nu):
    return np.cos(2.0 * np.pi * nu * t + phi * np.pi / 180.0)


MUSR_FUNCTIONS = {
    "se": (_se, 2),
    "ge": (_ge, 3),
    "sg": (_sg, 2),
    "stg": (_stg, 2),
    "tf": (_tf, 3),
}

SCALAR_FUNCTIONS = {
    "exp": (np.exp, 1),
    "log": (np.log, 1),
    "cos": (np.cos, 1),
    "sin": (np.sin, 1),
    "sqrt": (np.sqrt, 1),
    "pow": (np.power, 2),
}

_FUNCTIONS = {**SCALAR_FUNCTIONS, **MUSR_FUNCTIONS}


# -- AST ------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class TimeVar:
    pass


@dataclass(frozen=True)
class SlotRef:
    array: str  # "p" or "f"
    slot: int   # k in p[m[k]]


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Node = Union[Num, TimeVar, SlotRef, Unary, Binary, Call]


# -- tokenizer ------------------------------------------------------------

_OPERATORS = set("+-*/^(),[]")


@dataclass
class _Token:
    kind: str   # "num", "ident", or the operator character
    text: str
    pos: int
    value: float = 0.0


def _tokenize(source: str) -> list:
    tokens = []
    i = 0
    n = len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            try:
                value = float(text)
            except ValueError:
                raise ParseError(f"bad numeric literal {text!r}", i) from None
            tokens.append(_Token("num", text, i, value))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(_Token("ident", source[i:j], i))
            i = j
            continue
        if c in _OPERATORS:
            tokens.append(_Token(c, c, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(_Token("end", "", n))
    return tokens


# -- recursive-descent parser --------------------------------------------

class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        t = self.tok
        self.i += 1
        return t

    def expect(self, kind: str) -> _Token:
        if self.tok.kind != kind:
            raise ParseError(
                f"expected {kind!r}, found {self.tok.text or 'end of input'!r}",
                self.tok.pos,
            )
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind in "+-":
            op = self.advance().kind
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.power()
        while self.tok.kind in "*/":
            op = self.advance().kind
            node = Binary(op, node, self.power())
        return node

    def power(self) -> Node:
        base = self.unary()
        if self.tok.kind == "^":
            self.advance()
            return Binary("^", base, self.power())  # right-associative
        return base

    def unary(self) -> Node:
        if self.tok.kind == "-":
            self.advance()
            return Unary("-", self.unary())
        if self.tok.kind == "+":
            self.advance()
            return self.unary()
        return self.atom()

    def atom(self) -> Node:
        t = self.tok
        if t.kind == "num":
            self.advance()
            return Num(t.value)
        if t.kind == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if t.kind == "ident":
            self.advance()
            if t.text == "t":
                return TimeVar()
            if t.text in ("p", "f"):
                return self.slot_ref(t)
            if t.text in _FUNCTIONS:
                return self.call(t)
            raise ParseError(f"unknown identifier {t.text!r}", t.pos)
        raise ParseError(f"expected expression, found {t.text or 'end of input'!r}", t.pos)

    def slot_ref(self, name_tok: _Token) -> Node:
        self.expect("[")
        m_tok = self.expect("ident")
        if m_tok.text != "m":
            raise ParseError(
                f"{name_tok.text}[...] subscript must be m[k], found {m_tok.text!r}",
                m_tok.pos,
            )
        self.expect("[")
        idx_tok = self.expect("num")
        slot = int(idx_tok.value)
        if float(slot) != idx_tok.value or "." in idx_tok.text or "e" in idx_tok.text.lower():
            raise ParseError(f"map subscript must be an integer, found {idx_tok.text!r}", idx_tok.pos)
        if slot < 0:
            raise ParseError(f"map subscript must be non-negative", idx_tok.pos)
        self.expect("]")
        self.expect("]")
        return SlotRef(name_tok.text, slot)

    def call(self, name_tok: _Token) -> Node:
        _, arity = _FUNCTIONS[name_tok.text]
        self.expect("(")
        args = [self.expr()]
        while self.tok.kind == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        if len(args) != arity:
            raise ParseError(
                f"{name_tok.text} takes {arity} arguments, got {len(args)}",
                name_tok.pos,
            )
        return Call(name_tok.text, tuple(args))


# -- bytecode -------------------------------------------------------------

# opcodes: ("const", v) ("t",) ("p", k) ("f", k) ("neg",) ("add",) ("sub",)
#          ("mul",) ("div",) ("pow",) ("call", name, arity)

def _compile(node: Node, code: list) -> None:
    if isinstance(node, Num):
        code.append(("const", node.value))
    elif isinstance(node, TimeVar):
        code.append(("t",))
    elif isinstance(node, SlotRef):
        code.append((node.array, node.slot))
    elif isinstance(node, Unary):
        _compile(node.operand, code)
        code.append(("neg",))
    elif isinstance(node, Binary):
        _compile(node.left, code)
        _compile(node.right, code)
        code.append({"+": ("add",), "-": ("sub",), "*": ("mul",), "/": ("div",), "^": ("pow",)}[node.op])
    elif isinstance(node, Call):
        for a in node.args:
            _compile(a, code)
        code.append(("call", node.name, len(node.args)))
    else:  # pragma: no cover
        raise TheoryError(f"unknown node {node!r}")


def _format(node: Node) -> str:
    """Canonical fully-parenthesized rendering; parse(print(e)) must evaluate
    identically to e."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, TimeVar):
        return "t"
    if isinstance(node, SlotRef):
        return f"{node.array}[m[{node.slot}]]"
    if isinstance(node, Unary):
        return f"(-{_format(node.operand)})"
    if isinstance(node, Binary):
        return f"({_format(node.left)} {node.op} {_format(node.right)})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(_format(a) for a in node.args)})"
    raise TheoryError(f"unknown node {node!r}")


@dataclass(frozen=True)
class TheoryBinding:
    """Per-dataset indirection: slot k resolves through map[k]."""

    map: tuple
    function_values: tuple = ()

    def __post_init__(self):
        if any(float(m) != int(m) for m in self.map):
            raise TheoryError("map entries must be integers")
        object.__setattr__(self, "map", tuple(int(m) for m in self.map))
        object.__setattr__(self, "function_values", tuple(float(v) for v in self.function_values))
        if any(m < 0 for m in self.map):
            raise TheoryError("map entries must be non-negative integers")


@dataclass(frozen=True)
class TheoryExpr:
    source: str
    ast: Node = field(repr=False)
    bytecode: tuple = field(repr=False)
    referenced_param_slots: frozenset
    referenced_func_slots: frozenset

    def print(self) -> str:
        return _format(self.ast)

    def __call__(self, t, p, binding: TheoryBinding):
        return evaluate(self, t, p, binding)


def parse(source: str) -> TheoryExpr:
    ast = _Parser(source).parse()
    code: list = []
    _compile(ast, code)
    p_slots = frozenset(k for op, *rest in code if op == "p" for k in rest)
    f_slots = frozenset(k for op, *rest in code if op == "f" for k in rest)
    return TheoryExpr(
        source=source,
        ast=ast,
        bytecode=tuple(code),
        referenced_param_slots=p_slots,
        referenced_func_slots=f_slots,
    )


def evaluate(expr: TheoryExpr, t, p: Sequence[float], binding: TheoryBinding):
    """Evaluate at time(s) t; t may be a scalar or a numpy array, the result
    has the same shape.  Pure: same (t, p, f, m) gives the same value."""
    p = np.asarray(p, dtype=np.float64)
    f = np.asarray(binding.function_values, dtype=np.float64)
    m = binding.map
    scalar = np.isscalar(t) or np.ndim(t) == 0
    t_arr = np.float64(t) if scalar else np.asarray(t, dtype=np.float64)

    stack: list = []
    for instr in expr.bytecode:
        op = instr[0]
        if op == "const":
            stack.append(instr[1])
        elif op == "t":
            stack.append(t_arr)
        elif op in ("p", "f"):
            k = instr[1]
            if k >= len(m):
                raise EvalError(f"slot {k} not covered by map of length {len(m)}")
            j = m[k]
            src = p if op == "p" else f
            if j >= len(src):
                raise EvalError(
                    f"map entry m[{k}]={j} out of range for {op!r} array of length {len(src)}"
                )
            stack.append(src[j])
        elif op == "neg":
            stack.append(-stack.pop())
        elif op == "add":
            b = stack.pop()
            stack.append(stack.pop() + b)
        elif op == "sub":
            b = stack.pop()
            stack.append(stack.pop() - b)
        elif op == "mul":
            b = stack.pop()
            stack.append(stack.pop() * b)
        elif op == "div":
            b = stack.pop()
            stack.append(stack.pop() / b)
        elif op == "pow":
            b = stack.pop()
            stack.append(np.power(stack.pop(), b))
        elif op == "call":
            _, name, argc = instr
            fn, _ = _FUNCTIONS[name]
            args = stack[-argc:]
            del stack[-argc:]
            stack.append(fn(*args))
        else:  # pragma: no cover
            raise EvalError(f"bad opcode {instr!r}")
    (result,) = stack
    if scalar:
        return float(result)
    return np.asarray(result, dtype=np.float64)
