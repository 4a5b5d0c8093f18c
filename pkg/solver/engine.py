"""
Spectral Galerkin engine for the torus action functional

    J[u] = (2pi)^-k  integral of  (g(u) D u, D u) / 2 + W(phi, u)  dphi,   D = D_omega,

minimized over truncated Fourier fields with an interior log barrier for V(u) < v.
"""

import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import cfg
from core.autodiff import Derivatives
from core.conditions import sample_domain
from core.errors import BarrierInfeasibleError, ChartDomainError, DomainViolationError, ExpressionDomainError
from core.geometry import conformal_connect
from core.problem import DomainSpec, ProblemSpec  # noqa: F401  (re-exported)
from core.torusfield import (
    FourierField,
    TorusGrid,
    analyze,
    directional_derivative,
    pack,
    resize,
    shell_energy_ratio,
    synthesize,
    unpack,
)
from solver.lbfgs import LBFGSOptions, lbfgs
from utils.logger import logger


@dataclass
class GalerkinConfig:
    """Truncation, grid and optimizer settings for one solve"""
    N: int = cfg.trunc
    P: int = cfg.grid  # 0 = 2N + 2
    pad_factor: int = cfg.pad_factor
    g_tol: float = cfg.g_tol
    max_iter: int = cfg.max_iter
    history: int = cfg.lbfgs_history
    armijo_c1: float = cfg.armijo_c1
    backtrack: float = cfg.backtrack
    max_backtracks: int = cfg.max_backtracks
    barrier_beta0: float = cfg.barrier_beta0
    barrier_factor: float = cfg.barrier_factor
    barrier_min: float = cfg.barrier_min
    tail_ratio: float = cfg.tail_ratio

    def __post_init__(self):
        if self.P == 0:
            self.P = 2 * self.N + 2
        if self.P < 2 * self.N + 2:
            raise ValueError(f"grid P={self.P} cannot resolve N={self.N}; need P >= {2 * self.N + 2}")
        if not 0.0 < self.barrier_factor < 1.0:
            raise ValueError("barrier factor must lie in (0, 1)")

    def galerkin_grid(self, k: int) -> TorusGrid:
        """Grid for the nonlinear products: P padded by pad_factor"""
        return TorusGrid(k, self.P * self.pad_factor)

    def lbfgs_options(self, g_tol: float, max_iter: int) -> LBFGSOptions:
        return LBFGSOptions(g_tol, max_iter, self.history, self.armijo_c1, self.backtrack, self.max_backtracks)


@dataclass
class SolveReport:
    J: float
    grad_norm: float
    iterations: int
    u: FourierField
    containment_margin: float
    verdict: str
    message: str
    N: int
    P: int
    initial_point: List[float]
    fallback: bool
    shell_ratio: float
    resolved: bool
    tightest_level: float
    stages: List[Dict] = field(default_factory=list)
    history: List[float] = field(default_factory=list)
    reference_error: Optional[float] = None
    timing: float = 0.0

    @property
    def converged(self) -> bool:
        return self.verdict == "converged"

    def to_dict(self) -> Dict:
        """Report section; wall-clock timing is kept out so reports stay reproducible"""
        return {
            "J": self.J,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "containment_margin": self.containment_margin,
            "verdict": self.verdict,
            "message": self.message,
            "N": self.N,
            "P": self.P,
            "initial_point": self.initial_point,
            "fallback": self.fallback,
            "shell_ratio": self.shell_ratio,
            "resolved": self.resolved,
            "tightest_level": self.tightest_level,
            "reference_error": self.reference_error,
            "stages": self.stages,
            "u": self.u.to_dict(),
        }


# --- functional and gradient ------------------------------------------------


def _samples(problem: ProblemSpec, u: FourierField, grid: TorusGrid):
    if grid.P < 2 * u.N + 2:
        raise ValueError(f"grid P={grid.P} cannot resolve N={u.N}")
    x = synthesize(u, grid)
    inside = problem.manifold.in_box(x)
    if not np.all(inside):
        j = np.argwhere(~inside)[0]
        phi = grid.points()[tuple(j)]
        raise ChartDomainError(f"field leaves the chart box at phi={phi.tolist()}", phi)
    du = synthesize(directional_derivative(u, problem.omega), grid)
    phi = grid.points()
    return x, du, phi


def _action_terms(problem: ProblemSpec, x, du, phi, order: int):
    M = problem.manifold
    g, dg, _ = M.metric_jet(x, order=1 if order >= 1 else 0)
    w = problem.W.derivatives(x, phi if problem.W.depends_on_phi else None, order=order)
    kinetic = 0.5 * np.einsum("...i,...ij,...j->...", du, g, du)
    return g, dg, w, kinetic


def functional_J(problem: ProblemSpec, u: FourierField, grid: TorusGrid) -> float:
    """Quadrature of (g(u) Du, Du)/2 + W(phi, u), normalized by (2pi)^k"""
    x, du, phi = _samples(problem, u, grid)
    _, _, w, kinetic = _action_terms(problem, x, du, phi, order=0)
    return float(grid.mean(kinetic + w.value))


def _first_variation(problem: ProblemSpec, grid: TorusGrid, N: int, x, du, phi, extra_force=None) -> Tuple[float, FourierField]:
    """(J, representer) from grid samples; extra_force is added to the pointwise force"""
    g, dg, w, kinetic = _action_terms(problem, x, du, phi, order=1)
    p = np.einsum("...ij,...j->...i", g, du)
    force = 0.5 * np.einsum("...i,...ijl,...j->...l", du, dg, du) + w.gradient
    if extra_force is not None:
        force = force + extra_force
    r = analyze(force, grid, N) - directional_derivative(analyze(p, grid, N), problem.omega)
    return float(grid.mean(kinetic + w.value)), r


def gradient_J(problem: ProblemSpec, u: FourierField, grid: TorusGrid) -> FourierField:
    """
    Riesz representer r of the first variation in the coefficient inner
    product: r = -D(g(u) Du) + (1/2) d_x g(u)[Du, Du] + W_x, band-limited to N.
    On the same grid it is the exact gradient of functional_J, and
    pack(gradient_J) is the gradient of functional_J composed with unpack.
    """
    x, du, phi = _samples(problem, u, grid)
    return _first_variation(problem, grid, u.N, x, du, phi)[1]


class _Objective:
    """J plus the barrier -beta * mean log(v - V(u)) over packed coefficients"""

    def __init__(self, problem: ProblemSpec, grid: TorusGrid, N: int):
        self.problem = problem
        self.grid = grid
        self.N = N
        self.beta = 0.0
        self.evaluations = 0

    def field(self, theta: np.ndarray) -> FourierField:
        return unpack(theta, self.problem.m, self.N, self.problem.k)

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        self.evaluations += 1
        problem, grid = self.problem, self.grid
        u = self.field(theta)
        infeasible = np.inf, np.zeros_like(theta)
        try:
            x, du, phi = _samples(problem, u, grid)
            d = problem.domain.V.derivatives(x, order=1)
            gap = problem.domain.level - d.value
            if np.any(gap <= 0.0):
                return infeasible
            extra = self.beta * d.gradient / gap[..., None] if self.beta > 0.0 else None
            value, r = _first_variation(problem, grid, self.N, x, du, phi, extra)
        except (ChartDomainError, ExpressionDomainError):
            return infeasible
        if self.beta > 0.0:
            value -= self.beta * float(grid.mean(np.log(gap)))
        return value, pack(r)


# --- initializer ------------------------------------------------------------


def averaged_force(problem: ProblemSpec, x, torus_points: int = None) -> Derivatives:
    """W-bar(x) = (2pi)^-k integral of W(phi, x) dphi with x-derivatives, by torus quadrature"""
    x = np.asarray(x, dtype=float)
    if not problem.W.depends_on_phi:
        return problem.W.derivatives(x, order=2)
    grid = TorusGrid(problem.k, torus_points or cfg.cond_torus_grid)
    phi = grid.points().reshape(-1, problem.k)
    batch = x.shape[:-1]
    X = np.broadcast_to(x[..., None, :], batch + (phi.shape[0], problem.m))
    d = problem.W.derivatives(X, np.broadcast_to(phi, batch + phi.shape), order=2)
    return Derivatives(d.value.mean(axis=-1), d.gradient.mean(axis=-2), d.hessian.mean(axis=-3))


def initial_guess(problem: ProblemSpec, N: int = None, resolution: int = None) -> Tuple[FourierField, bool]:
    """
    Constant field at the Omega sample minimizing |grad W-bar|_g, refined by
    Newton steps on W-bar_x = 0; falls back to the barycenter of the Omega
    samples when no interior near-critical point exists. Returns (field, fallback).
    """
    N = cfg.trunc if N is None else N
    M, dom = problem.manifold, problem.domain
    pts = sample_domain(problem, resolution).interior
    if pts.shape[0] == 0:
        raise DomainViolationError("no interior samples of Omega; cannot build an initial guess")
    d = averaged_force(problem, pts)
    ginv = np.linalg.inv(M.metric_at(pts))
    norms = np.einsum("ni,nij,nj->n", d.gradient, ginv, d.gradient)
    x = pts[int(np.argmin(norms))].copy()

    for _ in range(20):
        dx = averaged_force(problem, x)
        try:
            step = np.linalg.solve(dx.hessian, -dx.gradient)
        except np.linalg.LinAlgError:
            break
        trial = x + step
        if not M.in_box(trial) or float(dom.V.value(trial)) >= dom.level:
            break
        if np.linalg.norm(averaged_force(problem, trial).gradient) >= np.linalg.norm(dx.gradient):
            break
        x = trial

    grad = averaged_force(problem, x).gradient
    critical = float(np.sqrt(grad @ np.linalg.inv(M.metric_at(x)) @ grad))
    fallback = critical > 1e-6
    if fallback:
        x = pts.mean(axis=0)
        if float(dom.V.value(x)) >= dom.level:
            x = pts[int(np.argmin(dom.V.value(pts)))]
        logger.warning(
            "No interior near-critical point of the averaged force; starting from the barycenter",
            module="solver",
            residual=critical,
            start=x,
        )
    return FourierField.constant(x, N, problem.k), fallback


# --- connecting family ------------------------------------------------------


def connecting_profile(problem: ProblemSpec, u1: FourierField, u2: FourierField, s_values, grid: TorusGrid) -> np.ndarray:
    """
    J along s -> chi(s, u1(phi), u2(phi)), pointwise connecting paths; the
    kinetic term uses the exact phi-derivative of chi from path sensitivities.
    """
    s_values = np.asarray(s_values, dtype=float)
    M, dom = problem.manifold, problem.domain
    x1, x2 = synthesize(u1, grid), synthesize(u2, grid)
    v1 = synthesize(directional_derivative(u1, problem.omega), grid)
    v2 = synthesize(directional_derivative(u2, problem.omega), grid)
    phi = grid.points()
    total = np.zeros_like(s_values)
    for idx in np.ndindex(grid.shape):
        path = conformal_connect(M, dom.V, x1[idx], x2[idx], level=dom.level)
        c = path.initial_variation(v1[idx], v2[idx])
        for j, s in enumerate(s_values):
            x, _, _ = path.state(s)
            eta, _ = path.variation(s, c)
            total[j] += float(problem.lagrangian(phi[idx], x, eta))
    return total / grid.size


# --- minimization -----------------------------------------------------------


class GalerkinEngine:
    """Barrier continuation around L-BFGS on the packed coefficients"""

    def __init__(self, problem: ProblemSpec, config: GalerkinConfig = None):
        self.problem = problem
        self.config = config or GalerkinConfig()
        self.grid = self.config.galerkin_grid(problem.k)
        logger.info("Galerkin engine initialized", module="solver", problem=problem.name, config=asdict(self.config))

    def run(self, u0: FourierField = None, conditions=None) -> SolveReport:
        """
        Minimize J from u0 (default: initial_guess).

        Barrier stages beta0, beta0*factor, ... down to barrier_min each stop at
        gradient norm max(g_tol, 10*beta); a final unbarriered stage with the
        feasibility guard drives |grad J| below g_tol.
        """
        started = time.perf_counter()
        problem, config = self.problem, self.config
        if conditions is not None and conditions.verdict.value == "fail":
            logger.warning("Conditions failed; solving anyway", module="solver", problem=problem.name)
        problem.omega.check_independence()

        fallback = False
        if u0 is None:
            u0, fallback = initial_guess(problem, config.N)
        u0 = resize(u0, config.N)
        objective = _Objective(problem, self.grid, config.N)
        theta = pack(u0)
        f0, _ = objective(theta)
        if not np.isfinite(f0):
            raise BarrierInfeasibleError("initial guess is outside Omega or the chart box")

        stages: List[Dict] = []
        history: List[float] = []
        iterations = 0
        message = ""
        beta = config.barrier_beta0
        schedule = []
        while True:
            schedule.append(beta)
            if beta <= config.barrier_min:
                break
            beta *= config.barrier_factor
        schedule.append(0.0)

        for beta in schedule:
            budget = config.max_iter - iterations
            if budget <= 0:
                message = "iteration cap reached"
                break
            objective.beta = beta
            tol = max(config.g_tol, 10.0 * beta) if beta > 0 else config.g_tol
            result = lbfgs(objective, theta, config.lbfgs_options(tol, budget))
            theta = result.x
            iterations += result.iterations
            history.extend(result.history)
            stages.append(
                {"beta": beta, "iterations": result.iterations, "f": float(result.f), "grad_norm": result.grad_norm, "message": result.message}
            )
            message = result.message
            logger.debug(f"Barrier stage beta={beta:.3e} done", module="solver", stage=stages[-1])

        u = objective.field(theta)
        objective.beta = 0.0
        J, grad = objective(theta)
        grad_norm = float(np.linalg.norm(grad))
        x = synthesize(u, self.grid)
        v_max = float(np.max(problem.domain.V.value(x)))
        margin = problem.domain.level - v_max
        converged = bool(np.isfinite(J) and grad_norm <= config.g_tol and margin > 0.0)
        verdict = "converged" if converged else "not-converged"
        ratio = shell_energy_ratio(u)
        resolved = ratio < config.tail_ratio
        if not resolved:
            logger.warning("Truncation not resolved: last shell carries energy", module="solver", shell_ratio=ratio, N=config.N)

        reference_error = None
        if problem.reference is not None:
            ref = resize(problem.reference, config.N)
            reference_error = float(np.max(np.abs(ref.coeffs - u.coeffs)))

        report = SolveReport(
            J=float(J),
            grad_norm=grad_norm,
            iterations=iterations,
            u=u,
            containment_margin=margin,
            verdict=verdict,
            message=message,
            N=config.N,
            P=config.P,
            initial_point=u0.coeffs[0].real.tolist(),
            fallback=fallback,
            shell_ratio=ratio,
            resolved=resolved,
            tightest_level=v_max,
            stages=stages,
            history=history,
            reference_error=reference_error,
            timing=time.perf_counter() - started,
        )
        logger.log_stage(
            "solve",
            problem=problem.name,
            verdict=verdict,
            J=report.J,
            grad_norm=grad_norm,
            iterations=iterations,
            containment_margin=margin,
            reference_error=reference_error,
        )
        return report


def minimize(problem: ProblemSpec, config: GalerkinConfig = None, u0: FourierField = None, conditions=None) -> SolveReport:
    return GalerkinEngine(problem, config).run(u0, conditions)
