"""Vectorized expression language over event columns.

Grammar, loosest binding first:

    expr    :=  and ( "||" and )*
    and     :=  not ( "&&" not )*
    not     :=  "!" not | cmp
    cmp     :=  add ( ("<" | "<=" | ">" | ">=" | "==" | "!=") add )*
    add     :=  mul ( ("+" | "-") mul )*
    mul     :=  unary ( ("*" | "/") unary )*
    unary   :=  "-" unary | primary
    primary :=  NUMBER | IDENT | IDENT "(" expr ("," expr)* ")" | "(" expr ")"

Everything evaluates in a single f64 domain: comparisons and logical
operators produce 1.0/0.0, any comparison with a NaN operand yields 0.0,
and domain errors (sqrt/log of negatives) propagate as NaN.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

FUNCTIONS = {"sqrt": 1, "abs": 1, "log": 1, "exp": 1, "min": 2, "max": 2}

_CMP_OPS = ("<=", ">=", "==", "!=", "<", ">")


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"syntax error at offset {offset}: {message}")
        self.offset = offset


class ExprEvalError(ExprError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Col:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "!"
    operand: "Expr"


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple["Expr", ...]


Expr = Union[Num, Col, Unary, Bin, Call]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>&&|\|\||<=|>=|==|!=|[-+*/<>!(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stray = pos + len(text[pos:]) - len(text[pos:].lstrip())
            if stray >= len(text):
                break
            raise ExprSyntaxError(f"unexpected character {text[stray]!r}", stray)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def next(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str) -> None:
        kind, value, offset = self.peek()
        if kind != "op" or value != op:
            raise ExprSyntaxError(f"expected {op!r}", offset)
        self.next()

    def parse(self) -> Expr:
        node = self.or_expr()
        kind, value, offset = self.peek()
        if kind != "eof":
            raise ExprSyntaxError(f"unexpected {value!r}", offset)
        return node

    def or_expr(self) -> Expr:
        node = self.and_expr()
        while self._at_op("||"):
            self.next()
            node = Bin("||", node, self.and_expr())
        return node

    def and_expr(self) -> Expr:
        node = self.not_expr()
        while self._at_op("&&"):
            self.next()
            node = Bin("&&", node, self.not_expr())
        return node

    def not_expr(self) -> Expr:
        if self._at_op("!"):
            self.next()
            return Unary("!", self.not_expr())
        return self.cmp_expr()

    def cmp_expr(self) -> Expr:
        node = self.add_expr()
        while any(self._at_op(op) for op in _CMP_OPS):
            _, op, _ = self.next()
            node = Bin(op, node, self.add_expr())
        return node

    def add_expr(self) -> Expr:
        node = self.mul_expr()
        while self._at_op("+") or self._at_op("-"):
            _, op, _ = self.next()
            node = Bin(op, node, self.mul_expr())
        return node

    def mul_expr(self) -> Expr:
        node = self.unary_expr()
        while self._at_op("*") or self._at_op("/"):
            _, op, _ = self.next()
            node = Bin(op, node, self.unary_expr())
        return node

    def unary_expr(self) -> Expr:
        if self._at_op("-"):
            self.next()
            return Unary("-", self.unary_expr())
        return self.primary()

    def primary(self) -> Expr:
        kind, value, offset = self.next()
        if kind == "num":
            return Num(float(value))
        if kind == "ident":
            if self._at_op("("):
                if value not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {value!r}", offset)
                self.next()
                args = [self.or_expr()]
                while self._at_op(","):
                    self.next()
                    args.append(self.or_expr())
                self.expect_op(")")
                if len(args) != FUNCTIONS[value]:
                    raise ExprSyntaxError(
                        f"{value} takes {FUNCTIONS[value]} argument(s), got {len(args)}", offset
                    )
                return Call(value, tuple(args))
            return Col(value)
        if kind == "op" and value == "(":
            node = self.or_expr()
            self.expect_op(")")
            return node
        raise ExprSyntaxError(f"expected an operand, got {value!r}" if value else "unexpected end of input", offset)

    def _at_op(self, op: str) -> bool:
        kind, value, _ = self.peek()
        return kind == "op" and value == op


def parse_expr(text: str) -> Expr:
    return _Parser(text).parse()


def needed_columns(expr: Expr) -> set[str]:
    """Identifiers the expression reads."""
    out: set[str] = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Col):
            out.add(node.name)
        elif isinstance(node, Unary):
            stack.append(node.operand)
        elif isinstance(node, Bin):
            stack.extend((node.left, node.right))
        elif isinstance(node, Call):
            stack.extend(node.args)
    return out


def _truthy(x: np.ndarray) -> np.ndarray:
    return x != 0.0


def _compare(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    raw = {
        "<": np.less,
        "<=": np.less_equal,
        ">": np.greater,
        ">=": np.greater_equal,
        "==": np.equal,
        "!=": np.not_equal,
    }[op](a, b)
    # any NaN operand makes the comparison 0.0, including !=
    valid = ~(np.isnan(a) | np.isnan(b))
    return raw & valid


def _eval(node: Expr, columns: Mapping[str, np.ndarray]) -> np.ndarray:
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Col):
        try:
            return columns[node.name]
        except KeyError:
            raise ExprEvalError(f"unknown identifier {node.name!r}") from None
    if isinstance(node, Unary):
        val = _eval(node.operand, columns)
        if node.op == "-":
            return np.negative(val)
        return (~_truthy(val)).astype(np.float64)
    if isinstance(node, Bin):
        a = _eval(node.left, columns)
        if node.op in ("&&", "||"):
            b = _eval(node.right, columns)
            ta, tb = _truthy(a), _truthy(b)
            out = (ta & tb) if node.op == "&&" else (ta | tb)
            return out.astype(np.float64)
        b = _eval(node.right, columns)
        if node.op in _CMP_OPS:
            return _compare(node.op, a, b).astype(np.float64)
        return {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.true_divide}[node.op](a, b)
    if isinstance(node, Call):
        args = [_eval(a, columns) for a in node.args]
        fn = {
            "sqrt": np.sqrt,
            "abs": np.abs,
            "log": np.log,
            "exp": np.exp,
            "min": np.minimum,
            "max": np.maximum,
        }[node.fn]
        return fn(*args)
    raise TypeError(f"not an expression node: {node!r}")


def eval_expr(expr: Expr, columns, n_events: int | None = None) -> np.ndarray:
    """Evaluate elementwise against a ColumnBatch or a plain column mapping."""
    cols = columns.columns if hasattr(columns, "columns") else columns
    if n_events is None:
        n_events = next(iter(cols.values())).shape[0] if cols else 0
    with np.errstate(all="ignore"):
        result = np.asarray(_eval(expr, cols), dtype=np.float64)
    if result.shape != (n_events,):
        result = np.full(n_events, float(result))
    return result
