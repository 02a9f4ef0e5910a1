"""Small, vectorized arithmetic expression language for model coefficients.

Coefficients are written as strings such as ``"-R_A*kappa*a0**2/2"`` and are
compiled once into Python code objects that evaluate on numpy arrays.  Only a
whitelisted subset of Python syntax is accepted, so config files can carry
model definitions without executing arbitrary code.

Variables follow a fixed naming scheme:

``t``
    time
``x0, x1, ...``
    components of the joint state vector
``a0, a1, ...``
    components of the joint action vector
``k0, k1, ...``
    flow payments, one per agent
``e, e0, e1, ...``
    jump mark components (``e`` is an alias of ``e0``)
``y``, ``u``
    scalar argument of utility functions and their inverses

Any other name must be a model parameter or a registered function.
"""

from __future__ import annotations

import ast
import re
from typing import Callable, Mapping

import numpy as np

from .errors import ModelError

_FUNCTIONS: dict[str, Callable] = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
    "minimum": np.minimum,
    "maximum": np.maximum,
    "where": np.where,
    "clip": np.clip,
    "sin": np.sin,
    "cos": np.cos,
}

_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_CMPOPS = (ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.Eq, ast.NotEq)
_VARIABLE = re.compile(r"^(t|y|u|e|[xake]\d+)$")


def register_function(name: str, fn: Callable) -> None:
    """Make ``fn`` callable from expressions under ``name``.

    Registered functions must accept and return numpy arrays (broadcasting
    like ufuncs).  Models using them serialize by name only, so the same
    registration has to happen before a saved model is loaded.
    """
    if not name.isidentifier():
        raise ValueError(f"invalid function name {name!r}")
    if _VARIABLE.match(name):
        raise ValueError(f"{name!r} collides with a reserved variable name")
    _FUNCTIONS[name] = fn


def registered_functions() -> tuple[str, ...]:
    return tuple(sorted(_FUNCTIONS))


def _check(node: ast.AST, src: str) -> None:
    if isinstance(node, ast.Expression):
        _check(node.body, src)
    elif isinstance(node, ast.BinOp):
        if not isinstance(node.op, _BINOPS):
            raise ModelError(f"operator {type(node.op).__name__} not allowed in {src!r}")
        _check(node.left, src)
        _check(node.right, src)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ModelError(f"unary operator not allowed in {src!r}")
        _check(node.operand, src)
    elif isinstance(node, ast.Compare):
        if not all(isinstance(op, _CMPOPS) for op in node.ops):
            raise ModelError(f"comparison not allowed in {src!r}")
        _check(node.left, src)
        for c in node.comparators:
            _check(c, src)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ModelError(f"unknown function in {src!r}")
        if node.keywords:
            raise ModelError(f"keyword arguments not allowed in {src!r}")
        for arg in node.args:
            _check(arg, src)
    elif isinstance(node, ast.Name):
        pass
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ModelError(f"only numeric constants allowed in {src!r}")
    else:
        raise ModelError(f"syntax {type(node).__name__} not allowed in {src!r}")


class Expr:
    """A compiled coefficient expression.

    Parameters
    ----------
    source:
        Expression text, or a number (stored as its ``repr``).
    """

    __slots__ = ("source", "_code", "names")

    def __init__(self, source: str | float | int):
        if isinstance(source, Expr):
            source = source.source
        if isinstance(source, (int, float)) and not isinstance(source, bool):
            source = repr(float(source))
        if not isinstance(source, str) or not source.strip():
            raise ModelError(f"expression must be a non-empty string, got {source!r}")
        self.source = source.strip()
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ModelError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        _check(tree, self.source)
        self.names = frozenset(
            n.id for n in ast.walk(tree) if isinstance(n, ast.Name)
        ) - frozenset(
            n.func.id for n in ast.walk(tree) if isinstance(n, ast.Call)
        )
        self._code = compile(tree, f"<expr {self.source}>", "eval")

    def __call__(self, env: Mapping[str, object], params: Mapping[str, float] | None = None):
        scope = dict(params) if params else {}
        scope.update(env)
        try:
            return eval(self._code, {"__builtins__": {}, **_FUNCTIONS}, scope)
        except NameError as exc:
            raise ModelError(f"{exc} while evaluating {self.source!r}") from None

    def variables(self, params: Mapping[str, float] = ()) -> frozenset[str]:
        """Names that are neither parameters nor functions."""
        return self.names - frozenset(params)

    def depends_on(self, prefix: str, params: Mapping[str, float] = ()) -> bool:
        """True if any free variable is ``prefix`` or ``prefix<digits>``."""
        pat = re.compile(rf"^{re.escape(prefix)}\d*$")
        return any(pat.match(v) for v in self.variables(params))

    def is_constant(self, params: Mapping[str, float] = ()) -> bool:
        return not self.variables(params)

    def __eq__(self, other):
        return isinstance(other, Expr) and other.source == self.source

    def __hash__(self):
        return hash(self.source)

    def __repr__(self):
        return f"Expr({self.source!r})"
