"""A small arithmetic language for parameter functions and estimators.

Grammar, loosest binding first::

    expression := term (('+' | '-') term)*
    term       := unary (('*' | '/') unary)*
    unary      := '-' unary | power
    power      := atom ('^' unary)?          # right associative
    atom       := NUMBER | NAME | NAME '(' expression ')' | '(' expression ')'

so ``-x^2`` is ``-(x^2)`` and ``a^b^c`` is ``a^(b^c)``. There are no
comparisons or conditionals. Evaluation accepts floats or numpy arrays and
turns every domain fault into an error instead of a NaN.
"""
import re
from dataclasses import dataclass
from typing import Iterable, List, Mapping, Set, Union

import numpy as np

from src.errors import ExprDomainError, ExprError, ExprSyntaxError

MAX_DEPTH = 64
FUNCTIONS = ("exp", "log", "sqrt", "abs")
OPERATORS = "+-*/^"


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class Token:
    kind: str  # NUM, NAME, OP, LPAREN, RPAREN, END
    text: str
    offset: int  # byte offset into the UTF-8 source


_NUMBER = re.compile(r"[0-9.]+(?:[eE][+-]?[0-9]*)?[0-9A-Za-z_.]*")
_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode("utf-8"))


def tokenize(source: str) -> List[Token]:
    tokens: List[Token] = []
    i = 0
    while i < len(source):
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        offset = _byte_offset(source, i)
        if ch in "0123456789.":
            text = _NUMBER.match(source, i).group(0)
            try:
                float(text)
            except ValueError:
                raise ExprSyntaxError(f"malformed number '{text}'", offset) from None
            tokens.append(Token("NUM", text, offset))
            i += len(text)
        elif ch.isascii() and (ch.isalpha() or ch == "_"):
            text = _NAME.match(source, i).group(0)
            tokens.append(Token("NAME", text, offset))
            i += len(text)
        elif ch in OPERATORS:
            tokens.append(Token("OP", ch, offset))
            i += 1
        elif ch == "(":
            tokens.append(Token("LPAREN", ch, offset))
            i += 1
        elif ch == ")":
            tokens.append(Token("RPAREN", ch, offset))
            i += 1
        else:
            raise ExprSyntaxError(f"unexpected character '{ch}'", offset)
    tokens.append(Token("END", "", _byte_offset(source, len(source))))
    return tokens


class Parser:
    def __init__(self, source: str, allowed_vars: Iterable[str]):
        self.source = source
        self.allowed = set(allowed_vars)
        self.tokens = tokenize(source)
        self.pos = 0
        self.depth = 0
        self.open_parens: List[int] = []

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def parse(self) -> Expr:
        if self.current.kind == "END":
            raise ExprSyntaxError("empty expression", 0)
        expr = self.expression()
        token = self.current
        if token.kind == "RPAREN":
            raise ExprSyntaxError("unbalanced parentheses: unexpected ')'", token.offset)
        if token.kind != "END":
            raise ExprSyntaxError(f"unexpected '{token.text}'", token.offset)
        return expr

    def _nest(self, offset: int):
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise ExprSyntaxError(f"expression nested deeper than {MAX_DEPTH}", offset)

    def _chain(self, operators: str, operand) -> Expr:
        """Left-associative run of ``operand`` joined by ``operators``, depth-checked per link."""
        left = operand()
        size = depth(left)
        while self.current.kind == "OP" and self.current.text in operators:
            op = self.advance()
            right = operand()
            size = 1 + max(size, depth(right))
            if size > MAX_DEPTH:
                raise ExprSyntaxError(f"expression nested deeper than {MAX_DEPTH}", op.offset)
            left = BinOp(op.text, left, right)
        return left

    def expression(self) -> Expr:
        return self._chain("+-", self.term)

    def term(self) -> Expr:
        return self._chain("*/", self.unary)

    def unary(self) -> Expr:
        if self.current.kind == "OP" and self.current.text == "-":
            token = self.advance()
            self._nest(token.offset)
            operand = self.unary()
            self.depth -= 1
            return Neg(operand)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.current.kind == "OP" and self.current.text == "^":
            token = self.advance()
            self._nest(token.offset)
            exponent = self.unary()
            self.depth -= 1
            return BinOp("^", base, exponent)
        return base

    def atom(self) -> Expr:
        token = self.current
        if token.kind == "NUM":
            self.advance()
            return Num(float(token.text))
        if token.kind == "NAME":
            self.advance()
            if self.current.kind == "LPAREN" and token.text in FUNCTIONS:
                return Call(token.text, self._parenthesized())
            if token.text in self.allowed:
                return Var(token.text)
            if token.text in FUNCTIONS:
                raise ExprSyntaxError(f"function '{token.text}' needs an argument in parentheses", token.offset)
            if self.current.kind == "LPAREN":
                raise ExprSyntaxError(f"unknown function '{token.text}'", token.offset)
            raise ExprSyntaxError(f"unknown variable '{token.text}'", token.offset)
        if token.kind == "LPAREN":
            return self._parenthesized()
        if token.kind == "RPAREN":
            raise ExprSyntaxError("unbalanced parentheses: unexpected ')'", token.offset)
        if token.kind == "END":
            raise ExprSyntaxError("unexpected end of expression", token.offset)
        raise ExprSyntaxError(f"unexpected '{token.text}'", token.offset)

    def _parenthesized(self) -> Expr:
        opening = self.advance()
        self._nest(opening.offset)
        inner = self.expression()
        if self.current.kind != "RPAREN":
            if self.current.kind == "END":
                raise ExprSyntaxError("unbalanced parentheses: '(' is never closed", opening.offset)
            raise ExprSyntaxError(f"expected ')' but found '{self.current.text}'", self.current.offset)
        self.advance()
        self.depth -= 1
        return inner


def parse(source: str, allowed_vars: Iterable[str]) -> Expr:
    """Parse ``source``; every variable must be one of ``allowed_vars``."""
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    expr = Parser(source, allowed_vars).parse()
    if depth(expr) > MAX_DEPTH:
        raise ExprSyntaxError(f"expression nested deeper than {MAX_DEPTH}", 0)
    return expr


def depth(expr: Expr) -> int:
    if isinstance(expr, (Num, Var)):
        return 1
    if isinstance(expr, Neg):
        return 1 + depth(expr.operand)
    if isinstance(expr, Call):
        return 1 + depth(expr.arg)
    return 1 + max(depth(expr.left), depth(expr.right))


def variables(expr: Expr) -> Set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Num):
        return set()
    if isinstance(expr, Neg):
        return variables(expr.operand)
    if isinstance(expr, Call):
        return variables(expr.arg)
    return variables(expr.left) | variables(expr.right)


def to_source(expr: Expr) -> str:
    """Fully parenthesized rendering that parses back to the same tree."""
    if isinstance(expr, Num):
        return repr(float(expr.value))
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{to_source(expr.operand)})"
    if isinstance(expr, Call):
        return f"{expr.func}({to_source(expr.arg)})"
    return f"({to_source(expr.left)} {expr.op} {to_source(expr.right)})"


def evaluate(expr: Expr, bindings: Mapping[str, Union[float, np.ndarray]]):
    """Evaluate with IEEE doubles; returns a float for scalar bindings."""
    with np.errstate(all="ignore"):
        value = _eval(expr, bindings)
    if np.ndim(value) == 0:
        return float(value)
    return value


def _eval(expr: Expr, bindings):
    if isinstance(expr, Num):
        return np.float64(expr.value)
    if isinstance(expr, Var):
        try:
            return np.asarray(bindings[expr.name], dtype=float)
        except KeyError:
            raise ExprError(f"no value bound for variable '{expr.name}'") from None
    if isinstance(expr, Neg):
        return -_eval(expr.operand, bindings)
    if isinstance(expr, Call):
        arg = _eval(expr.arg, bindings)
        if expr.func == "log":
            if np.any(arg <= 0):
                raise ExprDomainError("log of a nonpositive number", to_source(expr))
            return _finite(np.log(arg), expr)
        if expr.func == "sqrt":
            if np.any(arg < 0):
                raise ExprDomainError("sqrt of a negative number", to_source(expr))
            return np.sqrt(arg)
        if expr.func == "exp":
            return _finite(np.exp(arg), expr)
        return np.abs(arg)

    left = _eval(expr.left, bindings)
    right = _eval(expr.right, bindings)
    if expr.op == "+":
        return _finite(left + right, expr)
    if expr.op == "-":
        return _finite(left - right, expr)
    if expr.op == "*":
        return _finite(left * right, expr)
    if expr.op == "/":
        if np.any(right == 0):
            raise ExprDomainError("division by zero", to_source(expr))
        return _finite(left / right, expr)
    integral = right == np.round(right)
    if np.any((left == 0) & (right < 0)):
        raise ExprDomainError("zero raised to a negative power", to_source(expr))
    if np.any((left <= 0) & ~integral):
        raise ExprDomainError("non-integer power of a nonpositive base", to_source(expr))
    return _finite(np.power(left, right), expr)


def _finite(value, expr: Expr):
    if not np.all(np.isfinite(value)):
        raise ExprDomainError("non-finite result", to_source(expr))
    return value
