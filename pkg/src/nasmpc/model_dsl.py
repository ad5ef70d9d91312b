"""Vehicle model description language.

A model file looks like::

    states: x, y, phi, v, delta
    inputs: a, ddelta
    parameters: lflr=2.843, lrOlflr=0.6113
    dot(x)=v*cos(phi+atan(lrOlflr*tan(delta)));
    ...

The right-hand sides are parsed into a small expression AST and compiled into
a postfix tape that the numba kernels in :mod:`nasmpc._tape` interpret.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import _tape
from .errors import (
    DuplicateDerivative,
    MandatoryInputMissing,
    MandatoryStateMissing,
    MissingDerivative,
    ModelSyntaxError,
    NonFiniteResult,
    UnknownIdentifier,
)

MANDATORY_STATES = ("x", "y", "phi", "v", "delta")
MANDATORY_INPUTS = ("a", "ddelta")

UNARY_FUNCTIONS = {
    "sin": _tape.F_SIN, "cos": _tape.F_COS, "tan": _tape.F_TAN,
    "asin": _tape.F_ASIN, "acos": _tape.F_ACOS, "atan": _tape.F_ATAN,
    "sqrt": _tape.F_SQRT, "exp": _tape.F_EXP, "log": _tape.F_LOG,
    "fabs": _tape.F_FABS, "tanh": _tape.F_TANH, "sinh": _tape.F_SINH,
    "cosh": _tape.F_COSH,
}
BINARY_FUNCTIONS = {"atan2": _tape.F_ATAN2, "pow": _tape.F_POW}

KBM_TEXT = """\
states: x, y, phi, v, delta
inputs: a, ddelta
parameters: lflr=2.843, lrOlflr=0.6113
dot(x)=v*cos(phi+atan(lrOlflr*tan(delta)));
dot(y)=v*sin(phi+atan(lrOlflr*tan(delta)));
dot(phi)=v*cos(atan(lrOlflr*tan(delta)))/lflr*tan(delta);
dot(v)=a;
dot(delta)=ddelta;
"""


# -- AST -----------------------------------------------------------------------

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
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Expr = Num | Var | Neg | BinOp | Call

_PY_FUNCS = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "asin": math.asin,
    "acos": math.acos, "atan": math.atan, "sqrt": math.sqrt, "exp": math.exp,
    "log": math.log, "fabs": math.fabs, "tanh": math.tanh, "sinh": math.sinh,
    "cosh": math.cosh, "atan2": math.atan2, "pow": math.pow,
}


def evaluate_ast(node: Expr, env: Mapping[str, float]) -> float:
    """Direct recursive evaluation; slow, used as a cross-check of the tape."""
    match node:
        case Num(value):
            return value
        case Var(name):
            return env[name]
        case Neg(operand):
            return -evaluate_ast(operand, env)
        case BinOp("+", lhs, rhs):
            return evaluate_ast(lhs, env) + evaluate_ast(rhs, env)
        case BinOp("-", lhs, rhs):
            return evaluate_ast(lhs, env) - evaluate_ast(rhs, env)
        case BinOp("*", lhs, rhs):
            return evaluate_ast(lhs, env) * evaluate_ast(rhs, env)
        case BinOp("/", lhs, rhs):
            return evaluate_ast(lhs, env) / evaluate_ast(rhs, env)
        case BinOp("^", lhs, rhs):
            return math.pow(evaluate_ast(lhs, env), evaluate_ast(rhs, env))
        case Call(func, args):
            return _PY_FUNCS[func](*(evaluate_ast(a, env) for a in args))
    raise TypeError(f"not an expression node: {node!r}")


def to_text(node: Expr) -> str:
    """Fully parenthesised source text; parsing it back gives an equal AST."""
    match node:
        case Num(value):
            return repr(float(value))
        case Var(name):
            return name
        case Neg(operand):
            return f"-({to_text(operand)})"
        case BinOp(op, lhs, rhs):
            return f"({to_text(lhs)}{op}{to_text(rhs)})"
        case Call(func, args):
            return f"{func}({', '.join(to_text(a) for a in args)})"
    raise TypeError(f"not an expression node: {node!r}")


# -- expression parser ---------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)[fF]?"
    r"|(?P<ident>[A-Za-z_]\w*)"
    r"|(?P<op>[-+*/^(),;])"
    r")"
)


class _ExprParser:
    # precedence, loosest first: + -, * /, ^, unary sign; all binary operators left-associative
    def __init__(self, text, line, col0, known):
        self.line = line
        self.known = known
        self.toks = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                col = pos + len(text[pos:]) - len(text[pos:].lstrip())
                raise ModelSyntaxError(f"unexpected character {text[col]!r}", line, col0 + col + 1)
            kind = m.lastgroup
            start = m.start(kind)
            self.toks.append((kind, m.group(kind), col0 + start + 1))
            pos = m.end()
        self.toks.append(("end", "", col0 + len(text) + 1))
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, col = self.take()
        if val != value or kind != "op":
            raise ModelSyntaxError(f"expected {value!r}, found {val or 'end of line'!r}", self.line, col)

    def parse(self):
        node = self.expr()
        kind, val, col = self.peek()
        if kind != "end":
            raise ModelSyntaxError(f"unexpected {val!r}", self.line, col)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.power()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.power())
        return node

    def power(self):
        node = self.unary()
        while self.peek()[1] == "^" and self.peek()[0] == "op":
            self.take()
            node = BinOp("^", node, self.unary())
        return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.primary()

    def primary(self):
        kind, val, col = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "ident":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                return self.call(val, col)
            if val not in self.known:
                raise UnknownIdentifier(val, self.line, col)
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ModelSyntaxError(f"unexpected {val or 'end of line'!r}", self.line, col)

    def call(self, name, col):
        self.take()  # '('
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        if name in UNARY_FUNCTIONS:
            arity = 1
        elif name in BINARY_FUNCTIONS:
            arity = 2
        else:
            raise UnknownIdentifier(name, self.line, col)
        if len(args) != arity:
            raise ModelSyntaxError(f"{name}() takes {arity} argument(s), got {len(args)}", self.line, col)
        return Call(name, tuple(args))


def parse_expression(text: str, known: Sequence[str], line: int = 1, col0: int = 0) -> Expr:
    return _ExprParser(text, line, col0, set(known)).parse()


# -- model ---------------------------------------------------------------------

class ModelSpec:
    """Parsed vehicle ODE, immutable after construction.

    ``derivatives[i]`` is the right-hand side for ``state_names[i]``. The
    compiled tape (``ops``, ``args``, ``consts``, ``params``) is built once and
    handed to the numba kernels by the integration layer.
    """

    __slots__ = ("state_names", "input_names", "parameters", "derivatives",
                 "ops", "args", "consts", "params", "stack_size")

    def __init__(self, state_names, input_names, parameters, derivatives):
        state_names = tuple(state_names)
        input_names = tuple(input_names)
        parameters = dict(parameters)
        derivatives = tuple(derivatives)
        _check_names(state_names, input_names)
        if len(derivatives) != len(state_names):
            raise MissingDerivative(state_names[len(derivatives)] if len(derivatives) < len(state_names) else "?")
        object.__setattr__(self, "state_names", state_names)
        object.__setattr__(self, "input_names", input_names)
        object.__setattr__(self, "parameters", parameters)
        object.__setattr__(self, "derivatives", derivatives)
        ops, args, consts, depth = _compile(self)
        for name, arr in (("ops", ops), ("args", args), ("consts", consts)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        params = np.array(list(parameters.values()), dtype=np.float64)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "stack_size", max(depth, 1))

    def __setattr__(self, name, value):
        raise AttributeError("ModelSpec is immutable")

    @property
    def n(self) -> int:
        return len(self.state_names)

    @property
    def m(self) -> int:
        return len(self.input_names)

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return (self.state_names == other.state_names
                and self.input_names == other.input_names
                and list(self.parameters.items()) == list(other.parameters.items())
                and self.derivatives == other.derivatives)

    def __hash__(self):
        return hash((self.state_names, self.input_names, self.derivatives))

    def __repr__(self):
        return f"ModelSpec(states={list(self.state_names)}, inputs={list(self.input_names)}, parameters={self.parameters})"


def _check_names(states, inputs):
    if tuple(states[:5]) != MANDATORY_STATES:
        raise MandatoryStateMissing(
            f"the first five states must be {', '.join(MANDATORY_STATES)}; got {', '.join(states[:5]) or 'none'}")
    if tuple(inputs[:2]) != MANDATORY_INPUTS:
        raise MandatoryInputMissing(
            f"the first two inputs must be {', '.join(MANDATORY_INPUTS)}; got {', '.join(inputs[:2]) or 'none'}")


def _compile(model: ModelSpec):
    state_idx = {s: i for i, s in enumerate(model.state_names)}
    input_idx = {s: i for i, s in enumerate(model.input_names)}
    param_idx = {s: i for i, s in enumerate(model.parameters)}
    ops, args, consts = [], [], []
    depth = 0
    max_depth = 0

    def emit(op, arg, delta):
        nonlocal depth, max_depth
        ops.append(op)
        args.append(arg)
        depth += delta
        max_depth = max(max_depth, depth)

    def walk(node):
        match node:
            case Num(value):
                consts.append(value)
                emit(_tape.OP_CONST, len(consts) - 1, 1)
            case Var(name):
                if name in state_idx:
                    emit(_tape.OP_STATE, state_idx[name], 1)
                elif name in input_idx:
                    emit(_tape.OP_INPUT, input_idx[name], 1)
                elif name in param_idx:
                    emit(_tape.OP_PARAM, param_idx[name], 1)
                else:
                    raise UnknownIdentifier(name)
            case Neg(operand):
                walk(operand)
                emit(_tape.OP_NEG, 0, 0)
            case BinOp(op, lhs, rhs):
                walk(lhs)
                walk(rhs)
                emit(_tape.BINARY_OPS[op], 0, -1)
            case Call(func, fargs):
                for a in fargs:
                    walk(a)
                if func in UNARY_FUNCTIONS:
                    emit(_tape.OP_FUNC1, UNARY_FUNCTIONS[func], 0)
                else:
                    emit(_tape.OP_FUNC2, BINARY_FUNCTIONS[func], -1)
            case _:
                raise TypeError(f"not an expression node: {node!r}")

    for i, expr in enumerate(model.derivatives):
        walk(expr)
        emit(_tape.OP_STORE, i, -1)
    return (np.array(ops, dtype=np.int64), np.array(args, dtype=np.int64),
            np.array(consts, dtype=np.float64), max_depth)


_COMMENT = re.compile(r"(#|//).*$")
_HEADER = re.compile(r"^\s*(states|inputs|parameters)\s*:(.*)$")
_EQUATION = re.compile(r"^\s*dot\s*\(\s*([A-Za-z_]\w*)\s*\)\s*=(.*)$")
_IDENT = re.compile(r"^[A-Za-z_]\w*$")


def _name_list(body, line, col0):
    names = []
    for part in body.split(","):
        name = part.strip()
        if not name:
            if body.strip():
                raise ModelSyntaxError("empty name in list", line, col0 + 1)
            continue
        if not _IDENT.match(name):
            raise ModelSyntaxError(f"invalid identifier {name!r}", line, col0 + body.find(part) + 1)
        names.append(name)
    return names


def parse_model(text: str) -> ModelSpec:
    """Parse a model file (its contents, not a path) into a :class:`ModelSpec`."""
    if not text or not text.strip():
        raise ModelSyntaxError("empty model description", 1, 1)
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = _COMMENT.sub("", raw)
        if stripped.strip():
            lines.append((lineno, stripped))

    def header(pos, key, optional=False):
        if pos >= len(lines):
            if optional:
                return None, pos
            raise ModelSyntaxError(f"missing '{key}:' line", lines[-1][0] if lines else 1, 1)
        lineno, body = lines[pos]
        m = _HEADER.match(body)
        if not m or m.group(1) != key:
            if optional:
                return None, pos
            raise ModelSyntaxError(f"expected '{key}:' line", lineno, 1)
        return (lineno, m.group(2), m.start(2)), pos + 1

    (l_s, states_body, c_s), pos = header(0, "states")
    (l_i, inputs_body, c_i), pos = header(pos, "inputs")
    param_line, pos = header(pos, "parameters", optional=True)

    states = _name_list(states_body, l_s, c_s)
    inputs = _name_list(inputs_body, l_i, c_i)
    parameters = {}
    if param_line is not None:
        lineno, body, col0 = param_line
        for part in body.split(","):
            if not part.strip():
                if body.strip():
                    raise ModelSyntaxError("empty parameter entry", lineno, col0 + 1)
                continue
            if "=" not in part:
                raise ModelSyntaxError(f"parameter {part.strip()!r} has no value", lineno, col0 + body.find(part) + 1)
            name, value = (s.strip() for s in part.split("=", 1))
            if not _IDENT.match(name):
                raise ModelSyntaxError(f"invalid parameter name {name!r}", lineno, col0 + body.find(part) + 1)
            try:
                parameters[name] = float(value.rstrip("fF"))
            except ValueError:
                raise ModelSyntaxError(f"bad value for parameter {name!r}", lineno, col0 + body.find(part) + 1) from None

    _check_names(states, inputs)
    seen = set()
    for name in [*states, *inputs, *parameters]:
        if name in seen:
            raise ModelSyntaxError(f"identifier {name!r} declared twice", l_s, 1)
        seen.add(name)

    known = [*states, *inputs, *parameters]
    exprs = {}
    for lineno, body in lines[pos:]:
        m = _EQUATION.match(body)
        if not m:
            raise ModelSyntaxError("expected 'dot(<state>)=<expression>;'", lineno, 1)
        state = m.group(1)
        if state not in states:
            raise UnknownIdentifier(state, lineno, m.start(1) + 1)
        rhs = m.group(2).rstrip()
        if not rhs.endswith(";"):
            raise ModelSyntaxError("equation must end with ';'", lineno, len(body.rstrip()) + 1)
        if state in exprs:
            raise DuplicateDerivative(state)
        exprs[state] = parse_expression(rhs[:-1], known, lineno, m.start(2))
    for s in states:
        if s not in exprs:
            raise MissingDerivative(s)
    return ModelSpec(states, inputs, parameters, [exprs[s] for s in states])


def serialize_model(model: ModelSpec) -> str:
    lines = [
        "states: " + ", ".join(model.state_names),
        "inputs: " + ", ".join(model.input_names),
        "parameters: " + ", ".join(f"{k}={v!r}" for k, v in model.parameters.items()),
    ]
    for name, expr in zip(model.state_names, model.derivatives):
        lines.append(f"dot({name})={to_text(expr)};")
    return "\n".join(lines) + "\n"


_KBM = None


def builtin_kbm() -> ModelSpec:
    """Kinematic bicycle model with l_f + l_r = 2.843 and l_r/(l_f + l_r) = 0.6113."""
    global _KBM
    if _KBM is None:
        _KBM = parse_model(KBM_TEXT)
    return _KBM


def eval_ode(model: ModelSpec, z, u) -> np.ndarray:
    z = np.ascontiguousarray(z, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if z.shape != (model.n,) or u.shape != (model.m,):
        raise ValueError(f"expected z of length {model.n} and u of length {model.m}")
    out = np.empty(model.n)
    stack = np.empty(model.stack_size)
    _tape.eval_tape(model.ops, model.args, model.consts, model.params, z, u, out, stack)
    if not np.all(np.isfinite(out)):
        raise NonFiniteResult(f"model produced non-finite derivative {out} at z={z}, u={u}")
    return out
