"""A small closed-form expression language for generators, coefficients and payoffs.

Expressions are ordinary arithmetic strings such as ``"-2*y + sin(z1)"`` or
``"tanh(B1) + 0.1"``.  They are parsed with :mod:`ast` and only a whitelist of
node types, names and functions is accepted, so configs stay reproducible and
cannot execute arbitrary code.  Evaluation is vectorised over numpy arrays.
"""

from __future__ import annotations

import ast
import math
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ParseError

FUNCTIONS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sign": np.sign,
    "pos": lambda x: np.maximum(x, 0.0),
    "neg": lambda x: np.maximum(-x, 0.0),
    "min": np.minimum,
    "max": np.maximum,
}

CONSTANTS = {"pi": math.pi, "e": math.e}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def state_variables(dim: int) -> set[str]:
    """Names available to functions of the lattice state (t, B, <B>)."""
    names = {"t"}
    names.update(f"B{i}" for i in range(1, dim + 1))
    names.update(f"Q{i}{j}" for i in range(1, dim + 1) for j in range(1, dim + 1))
    return names


def generator_variables(dim: int) -> set[str]:
    names = state_variables(dim) | {"y", "znorm", "znorm2"}
    names.update(f"z{i}" for i in range(1, dim + 1))
    return names


class Expr:
    """A compiled expression; call it with keyword arrays for the variables it uses."""

    def __init__(self, source: str, allowed: Iterable[str]):
        self.source = str(source).strip()
        allowed = set(allowed)
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ParseError(f"cannot parse expression {self.source!r}: {exc.msg}") from exc
        self.names: set[str] = set()
        self._fn = self._compile(tree.body, allowed)

    def _compile(self, node, allowed):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            value = float(node.value)
            return lambda env: value
        if isinstance(node, ast.Name):
            if node.id in CONSTANTS:
                value = CONSTANTS[node.id]
                return lambda env: value
            if node.id not in allowed:
                raise ParseError(f"unknown name {node.id!r} in expression {self.source!r}")
            self.names.add(node.id)
            name = node.id
            return lambda env: env[name]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self._compile(node.operand, allowed)
            if isinstance(node.op, ast.USub):
                return lambda env: np.negative(inner(env))
            return inner
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            left = self._compile(node.left, allowed)
            right = self._compile(node.right, allowed)
            return lambda env: op(left(env), right(env))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
            if node.func.id not in FUNCTIONS:
                raise ParseError(f"unknown function {node.func.id!r} in expression {self.source!r}")
            fn = FUNCTIONS[node.func.id]
            args = [self._compile(a, allowed) for a in node.args]
            return lambda env: fn(*(a(env) for a in args))
        raise ParseError(f"unsupported syntax {type(node).__name__} in expression {self.source!r}")

    def __call__(self, **env) -> np.ndarray:
        with np.errstate(all="ignore"):
            return np.asarray(self._fn(env), dtype=float)

    def __repr__(self):
        return f"Expr({self.source!r})"


def state_env(t, B, Q) -> dict[str, np.ndarray]:
    """Variable bindings for a batch of lattice states.

    ``B`` has shape (..., d) and ``Q`` shape (..., d, d).
    """
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    d = B.shape[-1]
    env = {"t": np.asarray(t, dtype=float)}
    for i in range(d):
        env[f"B{i + 1}"] = B[..., i]
        for j in range(d):
            env[f"Q{i + 1}{j + 1}"] = Q[..., i, j]
    return env


def generator_env(t, y, z, B, Q) -> dict[str, np.ndarray]:
    env = state_env(t, B, Q)
    z = np.asarray(z, dtype=float)
    env["y"] = np.asarray(y, dtype=float)
    for i in range(z.shape[-1]):
        env[f"z{i + 1}"] = z[..., i]
    env["znorm2"] = np.sum(z * z, axis=-1)
    env["znorm"] = np.sqrt(env["znorm2"])
    return env


def evaluate(expr: Expr, env: Mapping[str, np.ndarray], shape) -> np.ndarray:
    """Evaluate and broadcast to ``shape`` (constants come back as scalars)."""
    return np.broadcast_to(expr(**env), shape).astype(float, copy=True)
