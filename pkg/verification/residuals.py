"""
Post-hoc checks of a candidate quasiperiodic solution: strong residuals on the
torus and along lines t -> phi0 + t*omega, speed bounds, the d1 pseudometric,
and the uniqueness probe.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from tenacity import retry, retry_if_exception_type, stop_after_attempt

from config import cfg
from core.conditions import sample_domain
from core.errors import AliasingError, ChartDomainError
from core.geometry import connection, parallel_transport
from core.problem import ProblemSpec
from core.torusfield import (
    FieldLine,
    FourierField,
    TorusGrid,
    analyze,
    directional_derivative,
    line_sample,
    synthesize,
)
from solver.engine import GalerkinConfig, SolveReport, functional_J, minimize
from utils.logger import logger


@dataclass
class TorusResidual:
    samples: np.ndarray  # grid.shape + (m,)
    sup: float
    l2: float
    P: int


@dataclass
class LineResidual:
    t: np.ndarray
    residual: np.ndarray
    speed: np.ndarray
    sup: float
    l2: float
    sup_speed: float

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.t})
        for j in range(self.residual.shape[1]):
            frame[f"r{j + 1}"] = self.residual[:, j]
        frame["speed"] = self.speed
        return frame


@dataclass
class D1Estimate:
    d1_T: float
    d1_2T: float
    c: float
    C: float

    @property
    def drift(self) -> float:
        """Doubling-T indicator |d1(2T) - d1(T)|"""
        return abs(self.d1_2T - self.d1_T)

    @property
    def distance(self) -> float:
        """sqrt(d1(T)); the triangle inequality holds for this form"""
        return float(np.sqrt(self.d1_T))


@dataclass
class UniquenessReport:
    trials: int
    converged_runs: int
    max_d1: float
    max_coeff_distance: float
    inconclusive: bool
    note: str = ""


@dataclass
class ResidualReport:
    torus_sup: float
    torus_l2: float
    torus_P: int
    line_sup: float
    line_l2: float
    window: float
    dt: float
    sup_speed: float
    sup_speed_2T: float
    action: Dict[str, float] = field(default_factory=dict)
    transported_velocity: Dict[str, float] = field(default_factory=dict)
    d1: Optional[Dict[str, float]] = None
    uniqueness: Optional[Dict] = None
    series: Optional[LineResidual] = field(default=None, repr=False)

    def to_dict(self) -> Dict:
        return {
            "torus_sup": self.torus_sup,
            "torus_l2": self.torus_l2,
            "torus_P": self.torus_P,
            "line_sup": self.line_sup,
            "line_l2": self.line_l2,
            "window": self.window,
            "dt": self.dt,
            "sup_speed": self.sup_speed,
            "sup_speed_2T": self.sup_speed_2T,
            "action": self.action,
            "transported_velocity": self.transported_velocity,
            "d1": self.d1,
            "uniqueness": self.uniqueness,
        }


def _chart_residual(problem: ProblemSpec, x, v, a, phi) -> np.ndarray:
    """a + Gamma_x(v, v) - g^-1 W_x, batched"""
    con = connection(problem.manifold, x)
    w = problem.W.derivatives(x, phi if problem.W.depends_on_phi else None, order=1)
    force = np.einsum("...ij,...j->...i", con.ginv, w.gradient)
    return a + np.einsum("...kij,...i,...j->...k", con.gamma, v, v) - force


def _require_box(problem: ProblemSpec, x: np.ndarray, labels: np.ndarray, what: str):
    inside = problem.manifold.in_box(x)
    if not np.all(inside):
        where = np.atleast_1d(labels[int(np.flatnonzero(~inside)[0])])
        raise ChartDomainError(f"{what} leaves the chart box at {where.tolist()}", where)


class _PaddedResidual:
    """Torus residual with up to two padded-grid retries when the residual spectrum is not resolved"""

    def __init__(self, problem: ProblemSpec, u: FourierField, grid: TorusGrid, tail_ratio: float):
        self.problem = problem
        self.u = u
        self.grid = grid
        self.tail_ratio = tail_ratio

    @retry(retry=retry_if_exception_type(AliasingError), stop=stop_after_attempt(3), reraise=True)
    def evaluate(self) -> TorusResidual:
        problem, u, grid = self.problem, self.u, self.grid
        x = synthesize(u, grid)
        _require_box(problem, x.reshape(-1, problem.m), grid.points().reshape(-1, problem.k), "field")
        du_field = directional_derivative(u, problem.omega)
        du = synthesize(du_field, grid)
        ddu = synthesize(directional_derivative(du_field, problem.omega), grid)
        r = _chart_residual(problem, x, du, ddu, grid.points())

        # the outermost resolvable shell must carry negligible energy
        band = (grid.P - 2) // 2
        spectrum = analyze(r, grid, band)
        shell = np.max(np.abs(spectrum.indices), axis=1) == band
        energy = np.sum(np.abs(spectrum.coeffs) ** 2, axis=1)
        tail, total = float(energy[shell].sum()), float(energy.sum())
        if tail > self.tail_ratio * total and np.sqrt(tail) > 1e-10:
            logger.warning("Torus residual aliased; retrying on a padded grid", module="verify", P=grid.P, tail=tail)
            self.grid = grid.padded(2)
            raise AliasingError(f"residual spectrum not resolved on P={grid.P}; increase P")

        norms = np.linalg.norm(r, axis=-1)
        return TorusResidual(r, float(norms.max()), float(np.sqrt(grid.mean(norms**2))), grid.P)


def torus_residual(problem: ProblemSpec, u: FourierField, grid: TorusGrid = None, tail_ratio: float = None) -> TorusResidual:
    """Pointwise D^2 u + Gamma_u(Du, Du) - g^-1 W_x on the grid with sup and quadrature-L2 norms"""
    grid = grid or TorusGrid(problem.k, 2 * (2 * u.N + 2))
    return _PaddedResidual(problem, u, grid, cfg.tail_ratio if tail_ratio is None else tail_ratio).evaluate()


def _time_grid(T: float, dt: float) -> np.ndarray:
    n = int(round(T / dt))
    return dt * np.arange(-n, n + 1)


def line_residual(problem: ProblemSpec, u: FourierField, phi0=None, T: float = None, dt: float = None) -> LineResidual:
    """x'' + Gamma(x', x') - g^-1 W_x along x(t) = u(phi0 + t omega), t in [-T, T], and sup |x'|_g"""
    T = cfg.window if T is None else T
    dt = cfg.dt if dt is None else dt
    phi0 = np.zeros(problem.k) if phi0 is None else np.asarray(phi0, dtype=float)
    t = _time_grid(T, dt)
    s = line_sample(u, phi0, problem.omega, t)
    _require_box(problem, s.value, t, "trajectory")
    phi = phi0 + t[:, None] * problem.omega.as_array()
    r = _chart_residual(problem, s.value, s.first, s.second, phi)
    g = problem.manifold.metric_at(s.value)
    speed = np.sqrt(np.einsum("ni,nij,nj->n", s.first, g, s.first))
    norms = np.linalg.norm(r, axis=-1)
    return LineResidual(t, r, speed, float(norms.max()), float(np.sqrt(np.mean(norms**2))), float(speed.max()))


@lru_cache(maxsize=8)
def _domain_samples(problem: ProblemSpec) -> np.ndarray:
    return sample_domain(problem).closed


def _metric_hull_bounds(problem: ProblemSpec, points: np.ndarray) -> tuple:
    """
    Extreme metric eigenvalues over the sampled hull of the closed domain,
    widened only where the given points leave it. Trajectories inside the
    domain therefore share one pair of constants.
    """
    closed = _domain_samples(problem)
    lo = np.minimum(closed.min(axis=0), points.min(axis=0))
    hi = np.maximum(closed.max(axis=0), points.max(axis=0))
    axes = [np.linspace(a, b, 5) if b > a else np.array([a]) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, problem.m)
    eig = np.linalg.eigvalsh(problem.manifold.metric_at(np.concatenate([grid, closed])))
    return float(eig.min()), float(eig.max())


def d1_distance(problem: ProblemSpec, u1: FourierField, u2: FourierField, phi0=None, T: float = None, dt: float = None) -> D1Estimate:
    """
    Finite-T pseudometric (2T)^-1 integral of |x1' - x2'|^2 + rho(x1, x2)^2 dt,
    with rho and the speed norm taken as the chart distance scaled by
    sqrt(c C), c and C the extreme metric eigenvalues over the sampled hull.
    """
    T = cfg.window if T is None else T
    dt = cfg.dt if dt is None else dt
    phi0 = np.zeros(problem.k) if phi0 is None else np.asarray(phi0, dtype=float)
    t2 = _time_grid(2.0 * T, dt)
    a = line_sample(u1, phi0, problem.omega, t2)
    b = line_sample(u2, phi0, problem.omega, t2)
    c, C = _metric_hull_bounds(problem, np.concatenate([a.value, b.value]))
    scale = np.sqrt(c * C)
    integrand = scale * (np.sum((a.first - b.first) ** 2, axis=-1) + np.sum((a.value - b.value) ** 2, axis=-1))
    inner = np.abs(t2) <= T + 0.5 * dt
    return D1Estimate(float(np.mean(integrand[inner])), float(np.mean(integrand)), c, C)


def line_action(problem: ProblemSpec, u: FourierField, phi0=None, T: float = None, dt: float = None, grid: TorusGrid = None) -> Dict[str, float]:
    """Time-averaged action along a line at T and 2T next to the torus value J[u]"""
    T = cfg.window if T is None else T
    dt = cfg.dt if dt is None else dt
    phi0 = np.zeros(problem.k) if phi0 is None else np.asarray(phi0, dtype=float)
    t2 = _time_grid(2.0 * T, dt)
    s = line_sample(u, phi0, problem.omega, t2)
    phi = phi0 + t2[:, None] * problem.omega.as_array()
    L = problem.lagrangian(phi, s.value, s.first)
    inner = np.abs(t2) <= T + 0.5 * dt
    grid = grid or TorusGrid(problem.k, 2 * (2 * u.N + 2))
    return {"mean_T": float(np.mean(L[inner])), "mean_2T": float(np.mean(L)), "J": functional_J(problem, u, grid)}


def transported_velocity_check(problem: ProblemSpec, u: FourierField, phi0=None, T: float = 10.0, dt: float = 0.01) -> Dict[str, float]:
    """
    Along x(t) with a parallel frame E(t) from t = 0, the frame coordinates
    y*(t) = E^T g x' satisfy dy*/dt = E^T W_x. Reports the largest mismatch of
    a central difference of y* against E^T W_x, and sup |grad d_t W| along x(t).
    """
    phi0 = np.zeros(problem.k) if phi0 is None else np.asarray(phi0, dtype=float)
    M = problem.manifold
    line = FieldLine(u, phi0, problem.omega)
    t = dt * np.arange(int(round(T / dt)) + 1)
    frame = parallel_transport(M, line, t)
    x, v, E = frame.positions, frame.velocities, frame.frames
    g = M.metric_at(x)
    ystar = np.einsum("nir,nij,nj->nr", E, g, v)
    phi = line.angles(t)
    omega = problem.omega.as_array()
    w = problem.W.derivatives(x, phi, order=2, omega=omega) if problem.W.depends_on_phi else problem.W.derivatives(x, order=1)
    expected = np.einsum("nir,ni->nr", E, w.gradient[:, : problem.m])
    dy = (ystar[2:] - ystar[:-2]) / (2.0 * dt)
    mismatch = float(np.max(np.abs(dy - expected[1:-1])))
    if problem.W.depends_on_phi:
        mixed = w.hessian[:, : problem.m, problem.m]
        ginv = np.linalg.inv(g)
        forcing = float(np.sqrt(np.max(np.einsum("ni,nij,nj->n", mixed, ginv, mixed))))
    else:
        forcing = 0.0
    return {"mismatch": mismatch, "sup_grad_dtW": forcing, "T": float(T), "frame_defect": frame.orthonormality_defect(M)}


def uniqueness_probe(
    problem: ProblemSpec,
    config: GalerkinConfig = None,
    trials: int = 5,
    seed: int = None,
    T: float = 10.0,
    conditions_failed: bool = False,
) -> UniquenessReport:
    """Re-run minimize from random interior constants and compare the converged runs"""
    seed = cfg.seed if seed is None else seed
    config = config or GalerkinConfig()
    note = "conditions fail, uniqueness not expected" if conditions_failed else ""
    if trials <= 1:
        return UniquenessReport(trials, trials, 0.0, 0.0, False, note)
    rng = np.random.default_rng(seed)
    interior = sample_domain(problem).interior
    starts = interior[rng.choice(interior.shape[0], size=trials, replace=interior.shape[0] < trials)]

    runs: List[SolveReport] = []
    failed = 0
    for i, x0 in enumerate(starts):
        report = minimize(problem, config, u0=FourierField.constant(x0, config.N, problem.k))
        if report.converged:
            runs.append(report)
        else:
            failed += 1
            logger.warning(f"Uniqueness trial {i} did not converge", module="verify", reason=report.message)

    max_d1 = max_coeff = 0.0
    for i in range(len(runs)):
        for j in range(i + 1, len(runs)):
            ui, uj = runs[i].u, runs[j].u
            max_coeff = max(max_coeff, float(np.max(np.abs(ui.coeffs - uj.coeffs))))
            max_d1 = max(max_d1, d1_distance(problem, ui, uj, T=T).d1_T)
    result = UniquenessReport(trials, len(runs), max_d1, max_coeff, failed > 0, note)
    logger.log_stage("uniqueness", problem=problem.name, **result.__dict__)
    return result


def verify_solution(
    problem: ProblemSpec,
    u: FourierField,
    phi0=None,
    T: float = None,
    dt: float = None,
) -> ResidualReport:
    """Torus and line residuals, speed bound with its doubling check, line action and the transported-velocity identity"""
    T = cfg.window if T is None else T
    dt = cfg.dt if dt is None else dt
    torus = torus_residual(problem, u)
    line = line_residual(problem, u, phi0, T, dt)
    line_2T = line_residual(problem, u, phi0, 2.0 * T, dt)
    report = ResidualReport(
        torus_sup=torus.sup,
        torus_l2=torus.l2,
        torus_P=torus.P,
        line_sup=line.sup,
        line_l2=line.l2,
        window=float(T),
        dt=float(dt),
        sup_speed=line.sup_speed,
        sup_speed_2T=line_2T.sup_speed,
        action=line_action(problem, u, phi0, T, dt),
        transported_velocity=transported_velocity_check(problem, u, phi0, min(T, 10.0), dt),
    )
    logger.log_stage(
        "verify",
        problem=problem.name,
        torus_l2=torus.l2,
        line_sup=line.sup,
        sup_speed=line.sup_speed,
    )
    report.series = line
    return report
