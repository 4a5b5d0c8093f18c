"""
Linearized dynamics along a quasiperiodic solution.

The system in variations is written in a parallel-transported g-orthonormal
frame E(t) as y'' = A(t) y with

    A(t) = E^T A_W E - r(|xi|) E^T g R(E., xi) xi,

A_W the Hessian form of W at (phi0 + t omega, x(t)) and xi = x'(t). On top of
it sit the derivative test of the quadratic form
F = <y', y> + r(|xi|) |y|^2 <grad V, xi> / 2 and discrete-QR estimates of the
dichotomy exponents.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from config import cfg
from core.conditions import DomainSample, Verdict, alpha2_margin, sample_domain
from core.errors import FrameDriftError, IntegrationError
from core.geometry import ChartManifold, TangentFrame, hessian_form, parallel_transport, riemann_tensor
from core.problem import ProblemSpec
from core.torusfield import FieldLine, FourierField, TorusGrid
from utils.logger import logger

FRAME_DRIFT_TOL = 1e-6
OVERFLOW = 1e12
TRANSIENT_FRACTION = 0.2


@dataclass(eq=False)
class VariationalSystem:
    """Linearization of the Euler-Lagrange flow along x(t) = u(phi0 + t omega), t in [-window, window]"""

    problem: ProblemSpec
    u: FourierField
    phi0: np.ndarray
    line: FieldLine
    frame: TangentFrame
    B: float
    C: float
    alpha2: float
    window: float
    r_mode: str = "cutoff"

    def __post_init__(self):
        if self.B <= 1.0:
            raise ValueError(f"cutoff B must exceed 1, got {self.B}")
        if self.r_mode not in ("cutoff", "unit"):
            raise ValueError(f"unknown r_mode {self.r_mode!r}")

    def r(self, s):
        """1 for s <= B, B^2/s^2 beyond; identically 1 in unit mode"""
        s = np.asarray(s, dtype=float)
        if self.r_mode == "unit":
            return np.ones_like(s)
        return np.where(s <= self.B, 1.0, self.B**2 / np.maximum(s, self.B) ** 2)

    @property
    def b_inequality(self) -> bool:
        """alpha2 B^2 >= 1 + C (1 + 3C/2)"""
        return bool(self.alpha2 * self.B**2 >= 1.0 + self.C * (1.0 + 1.5 * self.C))

    @cached_property
    def _coefficient_spline(self) -> CubicSpline:
        nodes = self.frame.times
        order = np.argsort(nodes)
        _, A = build_A(self, nodes[order])
        return CubicSpline(nodes[order], A, axis=0)

    def coefficient(self, t) -> np.ndarray:
        """A(t) interpolated between the frame nodes"""
        return self._coefficient_spline(t)

    def block(self, t) -> np.ndarray:
        """First-order matrix [[0, I], [A(t), 0]] acting on (y, y')"""
        return _first_order_block(self.coefficient(t))


def _first_order_block(A: np.ndarray) -> np.ndarray:
    m = A.shape[-1]
    out = np.zeros(A.shape[:-2] + (2 * m, 2 * m))
    out[..., :m, m:] = np.eye(m)
    out[..., m:, :m] = A
    return out


def _transported_frame(M: ChartManifold, line: FieldLine, window: float, node_dt: float) -> TangentFrame:
    """Frame over [-window, window], transported both ways from t = 0"""
    n = max(2, int(np.ceil(window / node_dt)))
    forward = np.linspace(0.0, window, n + 1)
    ahead = parallel_transport(M, line, forward)
    behind = parallel_transport(M, line, -forward)

    def join(a, b):
        return np.concatenate([b[:0:-1], a])

    return TangentFrame(
        join(ahead.times, behind.times),
        join(ahead.positions, behind.positions),
        join(ahead.velocities, behind.velocities),
        join(ahead.frames, behind.frames),
        join(ahead.derivatives, behind.derivatives),
    )


def _g_norm(g: np.ndarray, covector: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...ij,...j->...", covector, np.linalg.inv(g), covector))


def dichotomy_constant(problem: ProblemSpec, sample: DomainSample = None, torus_points: int = None) -> float:
    """C = max(sup |grad V|, sup |grad W|, sup |H_W|) over T^k x Omega-bar samples"""
    M, V, W = problem.manifold, problem.domain.V, problem.W
    sample = sample or sample_domain(problem)
    pts = sample.closed
    grad_V = _g_norm(M.metric_at(pts), V.derivatives(pts, order=1).gradient)

    if W.depends_on_phi:
        phi = TorusGrid(problem.k, torus_points or cfg.cond_torus_grid).points().reshape(-1, problem.k)
        X = np.tile(pts, (phi.shape[0], 1))
        Phi = np.repeat(phi, pts.shape[0], axis=0)
    else:
        X, Phi = pts, None
    d = W.derivatives(X, Phi, order=2)
    g = M.metric_at(X)
    grad_W = _g_norm(g, d.gradient[..., : problem.m])
    H = np.linalg.solve(g, hessian_form(M, W, X, Phi, derivs=d))
    hess_W = np.max(np.abs(np.linalg.eigvals(H)), axis=-1)
    return float(max(grad_V.max(), grad_W.max(), hess_W.max()))


def select_cutoff(C: float, alpha2: float) -> float:
    """Smallest B >= 2 with alpha2 B^2 >= 1 + C (1 + 3C/2); 2 when alpha2 <= 0"""
    if alpha2 <= 0.0:
        return 2.0
    return float(max(2.0, np.sqrt((1.0 + C * (1.0 + 1.5 * C)) / alpha2)))


def variational_system(
    problem: ProblemSpec,
    u: FourierField,
    phi0=None,
    window: float = None,
    r_mode: str = "cutoff",
    alpha2: float = None,
    sample: DomainSample = None,
    node_dt: float = 0.05,
    seed: int = None,
) -> VariationalSystem:
    window = cfg.dichotomy_window if window is None else window
    seed = cfg.seed if seed is None else seed
    phi0 = np.zeros(problem.k) if phi0 is None else np.asarray(phi0, dtype=float)
    sample = sample or sample_domain(problem)
    if alpha2 is None:
        alpha2, _ = alpha2_margin(problem, sample, seed=seed)
    C = dichotomy_constant(problem, sample)
    B = select_cutoff(C, alpha2)

    line = FieldLine(u, phi0, problem.omega)
    frame = _transported_frame(problem.manifold, line, window, node_dt)
    vs = VariationalSystem(problem, u, phi0, line, frame, B, C, float(alpha2), float(window), r_mode)
    if not vs.b_inequality:
        logger.warning("Cutoff inequality alpha2 B^2 >= 1 + C(1 + 3C/2) does not hold", module="dichotomy", alpha2=alpha2, C=C, B=B)
    logger.info(
        "Variational system built",
        module="dichotomy",
        window=window,
        B=B,
        C=C,
        alpha2=alpha2,
        r_mode=r_mode,
        frame_defect=frame.orthonormality_defect(problem.manifold),
    )
    return vs


def build_A(vs: VariationalSystem, t) -> Tuple[np.ndarray, np.ndarray]:
    """
    (first-order block, A(t)) evaluated directly at t (scalar or array).

    Columns are the bracket applied to the frame vectors E(t) e_j; the frame
    comes from cubic Hermite interpolation between transport nodes.
    """
    problem = vs.problem
    M, W = problem.manifold, problem.W
    x = vs.line.position(t)
    xi = vs.line.velocity(t)
    E = vs.frame.at(t)
    g = M.metric_at(x)

    gram = np.einsum("...ir,...ij,...js->...rs", E, g, E)
    drift = float(np.max(np.abs(gram - np.eye(problem.m))))
    if drift > FRAME_DRIFT_TOL:
        raise FrameDriftError(f"frame orthonormality drift {drift:.3e} exceeds {FRAME_DRIFT_TOL:g}; transport again with finer nodes")

    phi = vs.line.angles(t) if W.depends_on_phi else None
    A = np.einsum("...ir,...ij,...js->...rs", E, hessian_form(M, W, x, phi), E)
    if M.constant_metric is None:
        R, _ = riemann_tensor(M, x)
        speed = np.sqrt(np.einsum("...i,...ij,...j->...", xi, g, xi))
        # R(E e_c, xi) xi, then its g-components along the frame
        RE = np.einsum("...rsuv,...s,...uc,...v->...rc", R, xi, E, xi)
        A = A - vs.r(speed)[..., None, None] * np.einsum("...ir,...ij,...jc->...rc", E, g, RE)
    return _first_order_block(A), A


def _flow(vs: VariationalSystem, t0: float, t1: float, Z0: np.ndarray, t_eval=None, rtol: float = 1e-10, atol: float = 1e-12):
    """Propagate columns of Z0 under (y, y')' = block(t) (y, y')"""
    rows, cols = Z0.shape

    def rhs(t, z):
        return (vs.block(t) @ z.reshape(rows, cols)).ravel()

    sol = solve_ivp(rhs, (t0, t1), Z0.ravel(), method="DOP853", t_eval=t_eval, rtol=rtol, atol=atol)
    if sol.status != 0:
        raise IntegrationError(f"variational flow failed on [{t0}, {t1}]: {sol.message}")
    if t_eval is None:
        return sol.y[:, -1].reshape(rows, cols)
    return sol.y.T.reshape(-1, rows, cols)


def fundamental_matrix(vs: VariationalSystem, t0: float, t1: float) -> np.ndarray:
    """Un-orthonormalized fundamental matrix of the first-order system from t0 to t1"""
    _check_window(vs, t0, t1)
    return _flow(vs, t0, t1, np.eye(2 * vs.problem.m), rtol=1e-12, atol=1e-14)


def determinant_defect(vs: VariationalSystem, t0: float = 0.0, t1: float = 10.0) -> float:
    """
    |det Phi - exp(int tr)| relative to the Hadamard bound prod |Phi_j|.
    The first-order block is trace free, so Liouville's formula gives det Phi = 1.
    """
    Phi = fundamental_matrix(vs, t0, t1)
    scale = max(1.0, float(np.prod(np.linalg.norm(Phi, axis=0))))
    return abs(float(np.linalg.det(Phi)) - 1.0) / scale


def _check_window(vs: VariationalSystem, *times):
    if max(abs(t) for t in times) > vs.window + 1e-12:
        raise ValueError(f"time {max(abs(t) for t in times)} outside the transported window {vs.window}")


# --- quadratic-form derivative -------------------------------------------


@dataclass
class FDerivativeEstimate:
    alpha: float
    t_at_min: float
    samples: int
    skipped: int
    T: float
    dt: float


def _chunked_states(vs: VariationalSystem, z0: np.ndarray, T: float, dt: float, chunk: float = 1.0):
    """
    Solutions (y, y') on t = 0, dt, ..., T for the columns of z0 (2m, n_s),
    yielded chunk by chunk; states above OVERFLOW are rescaled at chunk ends.
    """
    n = max(2, int(round(T / dt)))
    per = max(2, int(round(chunk / dt)))
    times = dt * np.arange(n + 1)
    bounds = list(range(0, n, per)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        del bounds[-2]
    I = np.eye(z0.shape[0])
    z = z0.copy()
    for start, stop in zip(bounds[:-1], bounds[1:]):
        t_chunk = times[start : stop + 1]
        Psi = _flow(vs, t_chunk[0], t_chunk[-1], I, t_eval=t_chunk)
        states = np.einsum("tij,js->tsi", Psi, z)
        yield t_chunk, states
        z = states[-1].T.copy()
        big = np.linalg.norm(z, axis=0) > OVERFLOW
        z[:, big] /= np.linalg.norm(z[:, big], axis=0)


def F_derivative_ratio(vs: VariationalSystem, z0, T: float = 10.0, dt: float = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    (t, dF/dt / (|y|^2 + |y'|^2)) along the solutions started at the columns
    of z0; dF/dt by second-order finite differences within each chunk.
    Entries where y and y' both vanish are NaN.
    """
    dt = cfg.dt if dt is None else dt
    _check_window(vs, T)
    problem = vs.problem
    m = problem.m
    z0 = np.asarray(z0, dtype=float).reshape(2 * m, -1)

    out_t: List[np.ndarray] = []
    out_ratio: List[np.ndarray] = []
    for t, states in _chunked_states(vs, z0, T, dt):
        x = vs.line.position(t)
        xi = vs.line.velocity(t)
        speed = np.sqrt(np.einsum("ni,nij,nj->n", xi, problem.manifold.metric_at(x), xi))
        dV = problem.domain.V.derivatives(x, order=1).gradient
        weight = 0.5 * vs.r(speed) * np.einsum("ni,ni->n", dV, xi)

        y, dy = states[..., :m], states[..., m:]
        sq = np.einsum("tsi,tsi->ts", y, y)
        F = np.einsum("tsi,tsi->ts", dy, y) + weight[:, None] * sq
        dF = np.gradient(F, t, axis=0, edge_order=2)
        denom = sq + np.einsum("tsi,tsi->ts", dy, dy)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(denom > 0.0, dF / denom, np.nan)
        out_t.append(t)
        out_ratio.append(ratio)
    return np.concatenate(out_t), np.concatenate(out_ratio)


def check_F_derivative(vs: VariationalSystem, n_s: int = 8, T: float = 10.0, dt: float = None, seed: int = None) -> FDerivativeEstimate:
    """Empirical alpha = min dF/dt / (|y|^2 + |y'|^2) over random solutions on [0, T]"""
    dt = cfg.dt if dt is None else dt
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    z0 = rng.standard_normal((2 * vs.problem.m, n_s))
    # a zero initial condition carries no information
    nonzero = np.linalg.norm(z0, axis=0) > 0.0
    t, ratio = F_derivative_ratio(vs, z0[:, nonzero], T, dt)
    if not np.any(np.isfinite(ratio)):
        return FDerivativeEstimate(float("nan"), float("nan"), 0, n_s, T, dt)
    flat = np.where(np.isfinite(ratio), ratio, np.inf)
    i, _ = np.unravel_index(int(np.argmin(flat)), flat.shape)
    estimate = FDerivativeEstimate(float(flat.min()), float(t[i]), int(nonzero.sum()), int(n_s - nonzero.sum()), T, dt)
    logger.debug("Quadratic-form derivative checked", module="dichotomy", alpha=estimate.alpha, t=estimate.t_at_min)
    return estimate


# --- exponents -------------------------------------------------------------


@dataclass
class DichotomyReport:
    exponents: List[float]
    stable_dim: int
    unstable_dim: int
    central_dim: int
    gap: float
    confidence: List[float]
    alpha: float
    alpha2: float
    B: float
    C: float
    b_inequality: bool
    r_mode: str
    T: float
    reorth_dt: float
    backward_exponents: List[float]
    reversal_defect: float
    verdict: Verdict
    note: str = ""
    series_t: np.ndarray = field(default=None, repr=False)
    series: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> Dict:
        return {
            "exponents": self.exponents,
            "stable_dim": self.stable_dim,
            "unstable_dim": self.unstable_dim,
            "central_dim": self.central_dim,
            "gap": self.gap,
            "confidence": self.confidence,
            "alpha": self.alpha,
            "alpha2": self.alpha2,
            "B": self.B,
            "C": self.C,
            "b_inequality": self.b_inequality,
            "r_mode": self.r_mode,
            "window": self.T,
            "reorth_dt": self.reorth_dt,
            "backward_exponents": self.backward_exponents,
            "reversal_defect": self.reversal_defect,
            "verdict": self.verdict.value,
            "note": self.note,
        }

    def series_frame(self) -> pd.DataFrame:
        """Running exponents, one row per re-orthonormalization node"""
        frame = pd.DataFrame({"t": self.series_t})
        for j in range(self.series.shape[1]):
            frame[f"lambda{j + 1}"] = self.series[:, j]
        return frame


def _qr_sweep(vs: VariationalSystem, T: float, reorth_dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes 0 .. T (T may be negative) and log|diag R| for every interval"""
    n = max(1, int(round(abs(T) / reorth_dt)))
    nodes = np.linspace(0.0, T, n + 1)
    Q = np.eye(2 * vs.problem.m)
    logs = np.empty((n, Q.shape[0]))
    for j in range(n):
        Q, R = np.linalg.qr(_flow(vs, nodes[j], nodes[j + 1], Q))
        d = np.diag(R)
        Q = Q * np.sign(d)
        logs[j] = np.log(np.abs(d))
    return nodes, logs


def _exponents(nodes: np.ndarray, logs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Post-transient exponents (signed time) and windowed 95% half-widths"""
    n = logs.shape[0]
    j0 = int(TRANSIENT_FRACTION * n)
    if n - j0 < 1:
        j0 = 0
    span = nodes[-1] - nodes[j0]
    lam = logs[j0:].sum(axis=0) / span

    batches = [b for b in np.array_split(np.arange(j0, n), min(5, n - j0)) if b.size]
    if len(batches) < 2:
        return lam, np.full_like(lam, np.inf)
    per = np.array([logs[b].sum(axis=0) / (nodes[b[-1] + 1] - nodes[b[0]]) for b in batches])
    half = stats.t.ppf(0.975, len(batches) - 1) * per.std(axis=0, ddof=1) / np.sqrt(len(batches))
    return lam, half


def _classify(gap: float, ci: float, alpha: float, gap_min: float) -> Verdict:
    if gap + ci < gap_min:
        return Verdict.FAIL
    if gap - ci >= gap_min:
        return Verdict.PASS if alpha > 0.0 else Verdict.FAIL
    return Verdict.INCONCLUSIVE


def estimate_exponents(
    vs: VariationalSystem,
    T: float = None,
    reorth_dt: float = None,
    alpha: float = None,
    gap_min: float = None,
    seed: int = None,
) -> DichotomyReport:
    """
    Discrete QR exponents of the 2m-dimensional first-order system on [0, T],
    the backward-window self-check on [-T, 0], and the verdict.
    """
    T = vs.window if T is None else T
    reorth_dt = cfg.reorth_dt if reorth_dt is None else reorth_dt
    gap_min = cfg.gap_min if gap_min is None else gap_min
    _check_window(vs, T)
    m2 = 2 * vs.problem.m

    if alpha is None:
        alpha = check_F_derivative(vs, T=min(T, 10.0), seed=seed).alpha

    nodes, logs = _qr_sweep(vs, T, reorth_dt)
    lam, half = _exponents(nodes, logs)
    order = np.argsort(-lam)
    lam, half = lam[order], half[order]

    back_nodes, back_logs = _qr_sweep(vs, -T, reorth_dt)
    lam_back, _ = _exponents(back_nodes, back_logs)
    reversal = float(np.max(np.abs(np.sort(lam) - np.sort(-lam_back))))

    gap = float(np.min(np.abs(lam)))
    ci = float(np.max(half))
    # |lambda| < gap_min is central
    stable = int(np.sum(lam <= -gap_min))
    unstable = int(np.sum(lam >= gap_min))
    central = m2 - stable - unstable
    verdict = _classify(gap, ci, alpha, gap_min)

    note = ""
    if verdict == Verdict.INCONCLUSIVE:
        note = "exponent confidence interval straddles the gap threshold; use a longer window"
    elif not alpha > 0.0:
        note = "quadratic-form derivative is not positive"
    if reversal > gap_min:
        logger.warning("Backward exponents do not mirror the forward ones", module="dichotomy", defect=reversal)

    elapsed = np.abs(nodes[1:])
    series = np.cumsum(logs, axis=0) / elapsed[:, None]
    report = DichotomyReport(
        exponents=lam.tolist(),
        stable_dim=stable,
        unstable_dim=unstable,
        central_dim=central,
        gap=gap,
        confidence=half.tolist(),
        alpha=float(alpha),
        alpha2=vs.alpha2,
        B=vs.B,
        C=vs.C,
        b_inequality=vs.b_inequality,
        r_mode=vs.r_mode,
        T=float(T),
        reorth_dt=float(reorth_dt),
        backward_exponents=np.sort(lam_back).tolist(),
        reversal_defect=reversal,
        verdict=verdict,
        note=note,
        series_t=nodes[1:],
        series=series,
    )
    logger.log_stage("dichotomy", verdict=verdict, exponents=report.exponents, gap=gap, ci=ci, alpha=alpha, T=T)
    return report


def analyze_solution(problem: ProblemSpec, u: FourierField, phi0=None, T: float = None, r_mode: str = "cutoff", seed: int = None) -> DichotomyReport:
    """variational_system + estimate_exponents over the window [-T, T]"""
    T = cfg.dichotomy_window if T is None else T
    vs = variational_system(problem, u, phi0, window=T, r_mode=r_mode, seed=seed)
    return estimate_exponents(vs, T, seed=seed)
