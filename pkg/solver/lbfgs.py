"""
Limited-memory BFGS with a backtracking Armijo line search
"""

from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from config import cfg

ValueAndGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class LBFGSOptions:
    g_tol: float = cfg.g_tol
    max_iter: int = cfg.max_iter
    history: int = cfg.lbfgs_history
    c1: float = cfg.armijo_c1
    backtrack: float = cfg.backtrack
    max_backtracks: int = cfg.max_backtracks


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    history: List[float] = field(default_factory=list)

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def two_loop(grad: np.ndarray, s_hist: List[np.ndarray], y_hist: List[np.ndarray]) -> np.ndarray:
    """Apply the inverse-Hessian approximation to -grad"""
    q = -grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
        rho = 1.0 / (y @ s)
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs(fun: ValueAndGrad, x0: np.ndarray, options: LBFGSOptions = None) -> LBFGSResult:
    """
    Minimize fun from x0. fun returns (value, gradient); an infinite value
    marks an infeasible point and makes the line search back off.
    """
    opt = options or LBFGSOptions()
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    if not np.isfinite(f):
        return LBFGSResult(x, f, g, 0, False, "infeasible starting point")
    s_hist: List[np.ndarray] = []
    y_hist: List[np.ndarray] = []
    history = [float(f)]

    for it in range(opt.max_iter):
        gnorm = np.linalg.norm(g)
        if gnorm <= opt.g_tol:
            return LBFGSResult(x, f, g, it, True, "gradient tolerance reached", history)

        d = two_loop(g, s_hist, y_hist)
        slope = g @ d
        if not slope < 0.0:
            s_hist.clear()
            y_hist.clear()
            d = -g
            slope = -(gnorm**2)
        step = 1.0 if s_hist else min(1.0, 1.0 / gnorm)

        slack = 1e-14 * max(1.0, abs(f))
        for _ in range(opt.max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + opt.c1 * step * slope + slack:
                break
            step *= opt.backtrack
        else:
            return LBFGSResult(x, f, g, it, False, "line search failed", history)

        s = x_new - x
        y = g_new - g
        if y @ s > 1e-16 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > opt.history:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        history.append(float(f))

    converged = np.linalg.norm(g) <= opt.g_tol
    return LBFGSResult(x, f, g, opt.max_iter, bool(converged), "iteration cap reached", history)
