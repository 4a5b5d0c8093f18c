"""
Forward-mode second-order automatic differentiation over expression trees.

A Jet carries value, gradient and Hessian with respect to the active
variables for a whole batch of evaluation points at once, so one tree walk
evaluates a field on an entire grid.
"""

from __future__ import annotations

from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from core.errors import ExpressionDomainError
from core.expression import Binary, Const, Node, Pow, Unary, Var, variables


class _DomainFault(Exception):
    def __init__(self, message: str, mask: np.ndarray):
        super().__init__(message)
        self.mask = mask


class Jet:
    """Truncated Taylor data (value, gradient, Hessian) over a batch of points"""

    __slots__ = ("val", "grad", "hess")

    def __init__(self, val, grad=None, hess=None):
        self.val = val
        self.grad = grad
        self.hess = hess

    @classmethod
    def constant(cls, c: float, n: int, order: int) -> "Jet":
        return cls(
            np.asarray(c, dtype=float),
            np.zeros(n) if order >= 1 else None,
            np.zeros((n, n)) if order >= 2 else None,
        )

    def __neg__(self) -> "Jet":
        return Jet(
            -self.val,
            None if self.grad is None else -self.grad,
            None if self.hess is None else -self.hess,
        )

    def __add__(self, other: "Jet") -> "Jet":
        return Jet(
            self.val + other.val,
            None if self.grad is None else self.grad + other.grad,
            None if self.hess is None else self.hess + other.hess,
        )

    def __sub__(self, other: "Jet") -> "Jet":
        return self + (-other)

    def __mul__(self, other: "Jet") -> "Jet":
        a, b = self, other
        val = a.val * b.val
        grad = hess = None
        if a.grad is not None:
            grad = a.val[..., None] * b.grad + b.val[..., None] * a.grad
        if a.hess is not None:
            cross = a.grad[..., :, None] * b.grad[..., None, :]
            hess = (
                a.val[..., None, None] * b.hess
                + b.val[..., None, None] * a.hess
                + cross
                + np.swapaxes(cross, -1, -2)
            )
        return Jet(val, grad, hess)

    def __truediv__(self, other: "Jet") -> "Jet":
        if np.any(other.val == 0.0):
            raise _DomainFault("division by zero", other.val == 0.0)
        u = other.val
        return self * other.chain(1.0 / u, -1.0 / u**2, 2.0 / u**3)

    def chain(self, f0, f1, f2) -> "Jet":
        """Compose a scalar function with value f0, first derivative f1, second f2 at self.val"""
        grad = hess = None
        if self.grad is not None:
            grad = f1[..., None] * self.grad
        if self.hess is not None:
            hess = (
                f1[..., None, None] * self.hess
                + f2[..., None, None] * self.grad[..., :, None] * self.grad[..., None, :]
            )
        return Jet(f0, grad, hess)

    def power(self, n: int) -> "Jet":
        u = self.val
        if n == 0:
            one = np.ones_like(u)
            return self.chain(one, np.zeros_like(u), np.zeros_like(u))
        if n < 0 and np.any(u == 0.0):
            raise _DomainFault(f"zero raised to negative power {n}", u == 0.0)
        f0 = np.power(u, n)
        f1 = n * np.power(u, n - 1) if n != 1 else np.ones_like(u)
        if n == 1:
            f2 = np.zeros_like(u)
        elif n == 2:
            f2 = 2.0 * np.ones_like(u)
        else:
            f2 = n * (n - 1) * np.power(u, n - 2)
        return self.chain(f0, f1, f2)


def _apply(op: str, a: Jet) -> Jet:
    u = a.val
    if op == "neg":
        return -a
    if op == "sin":
        s, c = np.sin(u), np.cos(u)
        return a.chain(s, c, -s)
    if op == "cos":
        s, c = np.sin(u), np.cos(u)
        return a.chain(c, -s, -c)
    if op == "exp":
        e = np.exp(u)
        return a.chain(e, e, e)
    if op == "log":
        if np.any(u <= 0.0):
            raise _DomainFault("log of nonpositive value", u <= 0.0)
        return a.chain(np.log(u), 1.0 / u, -1.0 / u**2)
    if op == "sqrt":
        bad = u <= 0.0 if a.grad is not None else u < 0.0
        if np.any(bad):
            raise _DomainFault("sqrt outside its domain", bad)
        r = np.sqrt(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            return a.chain(r, 0.5 / r, -0.25 / (r * u))
    if op == "tanh":
        th = np.tanh(u)
        d = 1.0 - th**2
        return a.chain(th, d, -2.0 * th * d)
    raise ValueError(f"unknown unary operator {op!r}")


def _walk(node: Node, env: Dict[Tuple[str, int], Jet], n: int, order: int) -> Jet:
    if isinstance(node, Const):
        return Jet.constant(node.value, n, order)
    if isinstance(node, Var):
        return env[(node.kind, node.index)]
    if isinstance(node, Unary):
        return _apply(node.op, _walk(node.arg, env, n, order))
    if isinstance(node, Pow):
        return _walk(node.base, env, n, order).power(node.exponent)
    if isinstance(node, Binary):
        left = _walk(node.left, env, n, order)
        right = _walk(node.right, env, n, order)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if node.op == "/":
            return left / right
    raise TypeError(f"not an expression node: {node!r}")


class Derivatives(NamedTuple):
    value: np.ndarray
    gradient: Optional[np.ndarray]
    hessian: Optional[np.ndarray]


def eval_with_derivatives(
    ast: Node,
    x,
    phi=None,
    order: int = 2,
    omega=None,
) -> Derivatives:
    """
    Evaluate an expression and its derivatives with respect to x.

    Args:
        ast: parsed expression
        x: chart points, shape (..., m)
        phi: torus angles, shape (..., k); required when the expression uses phi
        order: 0, 1 or 2
        omega: when given, one extra active variable t is appended and phi is
            moved along phi + t*omega, so gradient[..., m] is the t-derivative
            and hessian[..., :m, m] the mixed derivative of the x-gradient

    Returns:
        Derivatives(value, gradient, hessian) with the batch shape of x/phi
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    x = np.asarray(x, dtype=float)
    m = x.shape[-1]
    used = variables(ast)
    needs_phi = any(kind == "phi" for kind, _ in used)
    if phi is None and (needs_phi or omega is not None):
        raise ValueError("expression depends on phi but no angles were given")
    batch = x.shape[:-1]
    if phi is not None:
        phi = np.asarray(phi, dtype=float)
        batch = np.broadcast_shapes(batch, phi.shape[:-1])
    n = m + (1 if omega is not None else 0)

    env: Dict[Tuple[str, int], Jet] = {}
    for j in range(m):
        grad = np.eye(n)[j] if order >= 1 else None
        hess = np.zeros((n, n)) if order >= 2 else None
        env[("x", j)] = Jet(np.broadcast_to(x[..., j], batch), grad, hess)
    if phi is not None:
        k = phi.shape[-1]
        for i in range(k):
            grad = None
            if order >= 1:
                grad = np.zeros(n)
                if omega is not None:
                    grad[m] = float(omega[i])
            hess = np.zeros((n, n)) if order >= 2 else None
            env[("phi", i)] = Jet(np.broadcast_to(phi[..., i], batch), grad, hess)
    missing = [f"{kind}{index + 1}" for kind, index in used if (kind, index) not in env]
    if missing:
        raise ValueError(f"point does not bind {', '.join(sorted(missing))}")

    try:
        with np.errstate(over="ignore"):
            jet = _walk(ast, env, n, order)
    except _DomainFault as fault:
        mask = np.broadcast_to(fault.mask, batch)
        where = np.argwhere(mask)
        idx = tuple(where[0]) if where.size else ()
        point = {f"x{j + 1}": float(np.broadcast_to(x[..., j], batch)[idx]) for j in range(m)}
        if phi is not None:
            for i in range(phi.shape[-1]):
                point[f"phi{i + 1}"] = float(np.broadcast_to(phi[..., i], batch)[idx])
        raise ExpressionDomainError(str(fault), point) from None

    value = np.broadcast_to(jet.val, batch).astype(float)
    gradient = hessian = None
    if order >= 1:
        gradient = np.broadcast_to(jet.grad, batch + (n,)).astype(float)
    if order >= 2:
        hessian = np.broadcast_to(jet.hess, batch + (n, n)).astype(float)
    return Derivatives(value, gradient, hessian)
