"""
Scalar expression language for problem files.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | '+' unary | power
    power  := atom ('^' signed integer constant)?
    atom   := number | 'pi' | phiK | xJ | func '(' expr ')' | '(' expr ')'

Parsing is a Pratt loop (binding powers below). Error offsets are byte offsets
into the UTF-8 encoded text.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import List, Optional, Set, Tuple, Union

from core.errors import ArityError, ExpressionSyntaxError, UnknownIdentifierError

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "tanh")
CONSTANTS = {"pi": math.pi}

# binding powers
_LBP = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}
_UNARY_BP = 25
_POW_RBP = 29


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str
    kind: str  # "phi" or "x"
    index: int  # zero based


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or one of FUNCTIONS
    arg: "Node"


@dataclass(frozen=True)
class Binary:
    op: str  # + - * /
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int


Node = Union[Const, Var, Unary, Binary, Pow]


@dataclass(frozen=True)
class _Token:
    kind: str  # NUM, IDENT, OP, EOF
    text: str
    offset: int


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)
_VAR_RE = re.compile(r"^(phi|x)([1-9][0-9]*)$")


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def _tokenize(text: str) -> List[_Token]:
    tokens = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        match = _TOKEN_RE.match(text, pos)
        if match is None or match.end() == pos:
            raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos))
        kind = match.lastgroup
        start = match.start(kind)
        tokens.append(_Token(kind.upper(), match.group(kind), _byte_offset(text, start)))
        pos = match.end()
    tokens.append(_Token("EOF", "", _byte_offset(text, len(text))))
    return tokens


def _constant_int(node: Node) -> Optional[int]:
    if isinstance(node, Const) and float(node.value).is_integer():
        return int(node.value)
    if isinstance(node, Unary) and node.op == "neg":
        inner = _constant_int(node.arg)
        return None if inner is None else -inner
    return None


class _Parser:
    def __init__(self, text: str, k: Optional[int], m: Optional[int]):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.k = k
        self.m = m

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.advance()
        if tok.text != text or tok.kind == "EOF":
            found = "end of input" if tok.kind == "EOF" else repr(tok.text)
            raise ExpressionSyntaxError(f"expected {text!r}, found {found}", tok.offset)
        return tok

    def lbp(self, tok: _Token) -> int:
        return _LBP.get(tok.text, 0) if tok.kind == "OP" else 0

    def parse(self) -> Node:
        node = self.expression(0)
        tok = self.peek()
        if tok.kind != "EOF":
            raise ExpressionSyntaxError(f"unexpected token {tok.text!r}", tok.offset)
        return node

    def expression(self, rbp: int) -> Node:
        left = self.nud(self.advance())
        while rbp < self.lbp(self.peek()):
            left = self.led(self.advance(), left)
        return left

    def nud(self, tok: _Token) -> Node:
        if tok.kind == "NUM":
            return Const(float(tok.text))
        if tok.kind == "IDENT":
            return self.identifier(tok)
        if tok.kind == "OP" and tok.text == "(":
            node = self.expression(0)
            self.expect(")")
            return node
        if tok.kind == "OP" and tok.text == "-":
            return Unary("neg", self.expression(_UNARY_BP))
        if tok.kind == "OP" and tok.text == "+":
            return self.expression(_UNARY_BP)
        if tok.kind == "EOF":
            raise ExpressionSyntaxError("unexpected end of input", tok.offset)
        raise ExpressionSyntaxError(f"unexpected token {tok.text!r}", tok.offset)

    def led(self, tok: _Token, left: Node) -> Node:
        if tok.text == "^":
            start = self.peek().offset
            exponent = _constant_int(self.expression(_POW_RBP))
            if exponent is None:
                raise ExpressionSyntaxError("exponent must be a constant integer", start)
            return Pow(left, exponent)
        return Binary(tok.text, left, self.expression(_LBP[tok.text]))

    def identifier(self, tok: _Token) -> Node:
        name = tok.text
        if self.peek().text == "(" and self.peek().kind == "OP":
            if name not in FUNCTIONS:
                raise UnknownIdentifierError(f"unknown function {name!r}", tok.offset)
            self.advance()
            args = [] if self.peek().text == ")" else [self.expression(0)]
            while self.peek().text == ",":
                self.advance()
                args.append(self.expression(0))
            self.expect(")")
            if len(args) != 1:
                raise ArityError(f"{name} takes 1 argument, got {len(args)}", tok.offset)
            return Unary(name, args[0])
        if name in FUNCTIONS:
            raise ArityError(f"{name} takes 1 argument, got 0", tok.offset)
        if name in CONSTANTS:
            return Const(CONSTANTS[name])
        match = _VAR_RE.match(name)
        if match is None:
            raise UnknownIdentifierError(f"unknown identifier {name!r}", tok.offset)
        kind, index = match.group(1), int(match.group(2))
        bound = self.k if kind == "phi" else self.m
        if bound is not None and index > bound:
            dim = "k" if kind == "phi" else "m"
            raise UnknownIdentifierError(f"{name} is not declared ({dim}={bound})", tok.offset)
        return Var(name, kind, index - 1)


def parse_expression(text: str, k: Optional[int] = None, m: Optional[int] = None) -> Node:
    """Parse expression text; when k/m are given, phiK/xJ beyond them are rejected"""
    return _Parser(text, k, m).parse()


def format_expression(node: Node) -> str:
    """Fully parenthesized text that parses back to the same tree"""
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            return f"(-{format_expression(node.arg)})"
        return f"{node.op}({format_expression(node.arg)})"
    if isinstance(node, Binary):
        return f"({format_expression(node.left)} {node.op} {format_expression(node.right)})"
    if isinstance(node, Pow):
        return f"({format_expression(node.base)}^{node.exponent})"
    raise TypeError(f"not an expression node: {node!r}")


def variables(node: Node) -> Set[Tuple[str, int]]:
    """(kind, index) pairs referenced by the tree"""
    if isinstance(node, Var):
        return {(node.kind, node.index)}
    if isinstance(node, Unary):
        return variables(node.arg)
    if isinstance(node, Binary):
        return variables(node.left) | variables(node.right)
    if isinstance(node, Pow):
        return variables(node.base)
    return set()
