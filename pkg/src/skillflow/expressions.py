"""The value-expression language used in bindings, conditions, and templates.

A value string is an expression iff it starts with ``${``; anything else is
a constant (integer if it is all digits, real if decimal, boolean if
true/false, else string). Inside ``${...}`` a small language applies::

    expr        = or_expr
    or_expr     = and_expr ( 'or' and_expr )*
    and_expr    = cmp_expr ( 'and' cmp_expr )*
    cmp_expr    = add_expr ( ( '==' '!=' '<' '<=' '>' '>=' ) add_expr )*
    add_expr    = mul_expr ( ( '+' | '-' ) mul_expr )*
    mul_expr    = unary ( ( '*' | '/' ) unary )*
    unary       = ( 'not' | '-' ) unary | primary
    primary     = INT | REAL | STRING | 'true' | 'false' | IDENT | '(' expr ')'

Evaluation is strict (both operands of ``and``/``or`` are evaluated).
Mixed integer/real arithmetic promotes to real; ``/`` always yields a real.
Comparisons yield booleans; ``==``/``!=`` work within one kind (numeric,
string, or boolean), ordering only on numerics.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

from .errors import DivisionByZero, EvalTypeError, ExprParseError, UnknownVariable

Value = Union[int, float, bool, str]


# --- AST ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Lit:
    value: Value

    def __eq__(self, other: object) -> bool:
        # distinguishes 3 from 3.0 and True from 1
        return (
            isinstance(other, Lit)
            and type(other.value) is type(self.value)
            and other.value == self.value
        )

    def __hash__(self) -> int:
        return hash((type(self.value).__name__, self.value))


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "not" | "-"
    operand: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


Node = Union[Lit, Var, Unary, Binary]


# --- value expressions ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Constant:
    value: Value

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Constant)
            and type(other.value) is type(self.value)
            and other.value == self.value
        )

    def __hash__(self) -> int:
        return hash((type(self.value).__name__, self.value))

    def render(self) -> str:
        from .datatypes import format_value

        return format_value(self.value)


@dataclass(frozen=True)
class Expression:
    ast: Node
    source: str  # the full "${...}" text, emitted verbatim on serialization

    def render(self) -> str:
        return self.source


ValueExpr = Union[Constant, Expression]


_INT_RE = re.compile(r"[+-]?\d+\Z")
_REAL_RE = re.compile(r"[+-]?(\d+\.\d*|\.\d+)\Z")


def parse_value_expr(text: str) -> ValueExpr:
    """Classify a raw value string as a Constant or parse it as an expression."""
    if text.startswith("${"):
        if not text.endswith("}"):
            raise ExprParseError(len(text), "}")
        ast = parse_expression(text[2:-1])
        return Expression(ast, text)
    if _INT_RE.match(text):
        return Constant(int(text))
    if _REAL_RE.match(text):
        return Constant(float(text))
    if text == "true":
        return Constant(True)
    if text == "false":
        return Constant(False)
    return Constant(text)


# --- tokenizer --------------------------------------------------------------


@dataclass(frozen=True)
class _Token:
    kind: str  # NUM REAL STR IDENT OP LPAREN RPAREN EOF
    text: str
    pos: int


_TOKEN_RE = re.compile(
    r"""
    (?P<WS>\s+)
  | (?P<REAL>\d+\.\d*|\.\d+)
  | (?P<NUM>\d+)
  | (?P<STR>"(?:[^"\\]|\\.)*")
  | (?P<IDENT>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<OP>==|!=|<=|>=|[<>+\-*/])
  | (?P<LPAREN>\()
  | (?P<RPAREN>\))
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprParseError(pos, "a token")
        kind = m.lastgroup
        assert kind is not None
        if kind != "WS":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("EOF", "", len(text)))
    return tokens


_KEYWORDS = {"true", "false", "and", "or", "not"}
_STR_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "r": "\r"}


def _unescape(raw: str, pos: int) -> str:
    body = raw[1:-1]
    out: list[str] = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            if i + 1 >= len(body) or body[i + 1] not in _STR_ESCAPES:
                raise ExprParseError(pos + 1 + i, "a valid escape")
            out.append(_STR_ESCAPES[body[i + 1]])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


# --- parser -----------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[_Token]) -> None:
        self._tokens = tokens
        self._i = 0

    def _peek(self) -> _Token:
        return self._tokens[self._i]

    def _next(self) -> _Token:
        tok = self._tokens[self._i]
        self._i += 1
        return tok

    def _fail(self, expected: str) -> ExprParseError:
        return ExprParseError(self._peek().pos, expected)

    def parse(self) -> Node:
        node = self._or()
        if self._peek().kind != "EOF":
            raise self._fail("end of expression")
        return node

    def _or(self) -> Node:
        node = self._and()
        while self._peek().kind == "IDENT" and self._peek().text == "or":
            self._next()
            node = Binary("or", node, self._and())
        return node

    def _and(self) -> Node:
        node = self._cmp()
        while self._peek().kind == "IDENT" and self._peek().text == "and":
            self._next()
            node = Binary("and", node, self._cmp())
        return node

    _CMP_OPS = {"==", "!=", "<", "<=", ">", ">="}

    def _cmp(self) -> Node:
        node = self._add()
        while self._peek().kind == "OP" and self._peek().text in self._CMP_OPS:
            op = self._next().text
            node = Binary(op, node, self._add())
        return node

    def _add(self) -> Node:
        node = self._mul()
        while self._peek().kind == "OP" and self._peek().text in {"+", "-"}:
            op = self._next().text
            node = Binary(op, node, self._mul())
        return node

    def _mul(self) -> Node:
        node = self._unary()
        while self._peek().kind == "OP" and self._peek().text in {"*", "/"}:
            op = self._next().text
            node = Binary(op, node, self._unary())
        return node

    def _unary(self) -> Node:
        tok = self._peek()
        if tok.kind == "IDENT" and tok.text == "not":
            self._next()
            return Unary("not", self._unary())
        if tok.kind == "OP" and tok.text == "-":
            self._next()
            return Unary("-", self._unary())
        return self._primary()

    def _primary(self) -> Node:
        tok = self._next()
        if tok.kind == "NUM":
            return Lit(int(tok.text))
        if tok.kind == "REAL":
            return Lit(float(tok.text))
        if tok.kind == "STR":
            return Lit(_unescape(tok.text, tok.pos))
        if tok.kind == "IDENT":
            if tok.text == "true":
                return Lit(True)
            if tok.text == "false":
                return Lit(False)
            if tok.text in _KEYWORDS:
                self._i -= 1
                raise self._fail("a value")
            return Var(tok.text)
        if tok.kind == "LPAREN":
            node = self._or()
            if self._peek().kind != "RPAREN":
                raise self._fail(")")
            self._next()
            return node
        self._i -= 1
        raise self._fail("a value")


def parse_expression(text: str) -> Node:
    """Parse the interior of a ``${...}`` wrapper."""
    return _Parser(_tokenize(text)).parse()


# --- evaluation -------------------------------------------------------------


def _type_name(value: Value) -> str:
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, float):
        return "real"
    return "string"


def _is_number(value: Value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def evaluate(node: Node, variables: Mapping[str, Value]) -> Value:
    """Strict recursive evaluation against a variable map."""
    if isinstance(node, Lit):
        return node.value
    if isinstance(node, Var):
        if node.name not in variables:
            raise UnknownVariable(node.name)
        return variables[node.name]
    if isinstance(node, Unary):
        operand = evaluate(node.operand, variables)
        if node.op == "not":
            if not isinstance(operand, bool):
                raise EvalTypeError("not", (_type_name(operand),))
            return not operand
        if node.op == "-":
            if not _is_number(operand):
                raise EvalTypeError("-", (_type_name(operand),))
            return -operand
        raise ValueError(node.op)
    assert isinstance(node, Binary)
    left = evaluate(node.left, variables)
    right = evaluate(node.right, variables)
    op = node.op
    types = (_type_name(left), _type_name(right))
    if op in ("and", "or"):
        if not (isinstance(left, bool) and isinstance(right, bool)):
            raise EvalTypeError(op, types)
        return (left and right) if op == "and" else (left or right)
    if op in ("==", "!="):
        if _is_number(left) and _is_number(right):
            same = left == right
        elif isinstance(left, bool) and isinstance(right, bool):
            same = left is right
        elif isinstance(left, str) and isinstance(right, str):
            same = left == right
        else:
            raise EvalTypeError(op, types)
        return same if op == "==" else not same
    if op in ("<", "<=", ">", ">="):
        if not (_is_number(left) and _is_number(right)):
            raise EvalTypeError(op, types)
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        return left >= right
    if op in ("+", "-", "*", "/"):
        if not (_is_number(left) and _is_number(right)):
            raise EvalTypeError(op, types)
        if op == "+":
            return left + right
        if op == "-":
            return left - right
        if op == "*":
            return left * right
        if right == 0:
            raise DivisionByZero(f"{left} / {right}")
        return left / right
    raise ValueError(op)


def evaluate_value(expr: ValueExpr, variables: Mapping[str, Value]) -> Value:
    if isinstance(expr, Constant):
        return expr.value
    return evaluate(expr.ast, variables)


def free_variables(node: Node) -> frozenset[str]:
    if isinstance(node, Var):
        return frozenset((node.name,))
    if isinstance(node, Unary):
        return free_variables(node.operand)
    if isinstance(node, Binary):
        return free_variables(node.left) | free_variables(node.right)
    return frozenset()


# --- rendering back to text --------------------------------------------------

_PRECEDENCE = {
    "or": 1,
    "and": 2,
    "==": 3,
    "!=": 3,
    "<": 3,
    "<=": 3,
    ">": 3,
    ">=": 3,
    "+": 4,
    "-": 4,
    "*": 5,
    "/": 5,
}
_UNARY_PRECEDENCE = 6


def _node_precedence(node: Node) -> int:
    if isinstance(node, Binary):
        return _PRECEDENCE[node.op]
    if isinstance(node, Unary):
        return _UNARY_PRECEDENCE
    return 7


def _escape_str(value: str) -> str:
    out = value.replace("\\", "\\\\").replace('"', '\\"')
    out = out.replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")
    return f'"{out}"'


def unparse(node: Node) -> str:
    """Render an AST to expression text that parses back to the same tree."""
    if isinstance(node, Lit):
        if isinstance(node.value, str):
            return _escape_str(node.value)
        from .datatypes import format_value

        return format_value(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        inner = unparse(node.operand)
        if _node_precedence(node.operand) < _UNARY_PRECEDENCE:
            inner = f"({inner})"
        return f"not {inner}" if node.op == "not" else f"-{inner}"
    assert isinstance(node, Binary)
    prec = _PRECEDENCE[node.op]
    left = unparse(node.left)
    if _node_precedence(node.left) < prec:
        left = f"({left})"
    right = unparse(node.right)
    if _node_precedence(node.right) <= prec:
        right = f"({right})"
    return f"{left} {node.op} {right}"


def expression_from_ast(node: Node) -> Expression:
    return Expression(node, "${" + unparse(node) + "}")


# --- templates ---------------------------------------------------------------


def render_template(template: str, variables: Mapping[str, Value]) -> str:
    """Replace every ``${...}`` span with its evaluated, stringified value.

    Expression spans end at the first ``}``, so template expressions must
    not contain string literals with a closing brace.
    """
    from .datatypes import format_value

    out: list[str] = []
    rest = template
    while True:
        head, sep, tail = rest.partition("${")
        out.append(head)
        if not sep:
            return "".join(out)
        body, closed, tail = tail.partition("}")
        if not closed:
            raise ExprParseError(len(template), "}")
        value = evaluate(parse_expression(body), variables)
        out.append(format_value(value))
        rest = tail
