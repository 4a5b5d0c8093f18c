"""
Riemannian geometry in a single coordinate chart.

Conventions: dg[..., a, b, c] = d_c g_ab, gamma[..., k, i, j] = Gamma^k_ij,
dgamma[..., k, i, j, l] = d_l Gamma^k_ij, and the curvature operator
R(a, b)c = nabla_a nabla_b c - nabla_b nabla_a c - nabla_[a,b] c, so that the
sectional curvature <R(a,b)b, a> / |a ^ b|^2 is +1 on the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from config import cfg
from core.autodiff import Derivatives, eval_with_derivatives
from core.errors import (
    ChartDomainError,
    DegenerateSpanError,
    DomainViolationError,
    ExpressionDomainError,
    GeometryError,
    IntegrationError,
    NoConnectionError,
)
from core.expression import Const, Node, format_expression, parse_expression, variables
from utils.logger import logger


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Scalar function of x (and optionally of the torus angles phi)"""

    ast: Node
    m: int
    k: int = 0

    @classmethod
    def parse(cls, text: str, m: int, k: int = 0) -> "ScalarField":
        return cls(parse_expression(text, k=k, m=m), m, k)

    @cached_property
    def depends_on_phi(self) -> bool:
        return any(kind == "phi" for kind, _ in variables(self.ast))

    @property
    def text(self) -> str:
        return format_expression(self.ast)

    def derivatives(self, x, phi=None, order: int = 2, omega=None) -> Derivatives:
        if phi is None and self.depends_on_phi:
            raise ValueError("field depends on phi; pass the torus angles")
        return eval_with_derivatives(self.ast, x, phi if (self.depends_on_phi or omega is not None) else None, order, omega)

    def value(self, x, phi=None) -> np.ndarray:
        return self.derivatives(x, phi, order=0).value


class Trajectory(Protocol):
    def position(self, t): ...

    def velocity(self, t): ...


@dataclass(frozen=True, eq=False)
class ChartManifold:
    """Chart domain (axis-aligned box) with a metric given entrywise by expressions"""

    m: int
    metric: Tuple[Tuple[Node, ...], ...]
    box: np.ndarray

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float).reshape(self.m, 2)
        if np.any(box[:, 0] >= box[:, 1]):
            raise ValueError(f"chart box must have lo < hi on every axis: {box.tolist()}")
        object.__setattr__(self, "box", box)
        if len(self.metric) != self.m or any(len(row) != self.m for row in self.metric):
            raise ValueError(f"metric must be {self.m}x{self.m}")

    @classmethod
    def from_strings(cls, rows: Sequence[Sequence[str]], box) -> "ChartManifold":
        m = len(rows)
        metric = tuple(tuple(parse_expression(entry, k=0, m=m) for entry in row) for row in rows)
        return cls(m, metric, box)

    @classmethod
    def euclidean(cls, m: int, box) -> "ChartManifold":
        rows = [["1" if i == j else "0" for j in range(m)] for i in range(m)]
        return cls.from_strings(rows, box)

    @cached_property
    def constant_metric(self) -> Optional[np.ndarray]:
        """The metric matrix when every entry is a literal constant"""
        if all(isinstance(e, Const) for row in self.metric for e in row):
            return np.array([[e.value for e in row] for row in self.metric], dtype=float)
        return None

    def in_box(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.box[:, 0] - tol) & (x <= self.box[:, 1] + tol), axis=-1)

    def require_in_box(self, x, what: str = "point"):
        x = np.asarray(x, dtype=float)
        inside = self.in_box(x, tol=1e-12)
        if not np.all(inside):
            bad = np.argwhere(~np.atleast_1d(inside))[0]
            offending = x.reshape(-1, self.m)[bad[0]] if x.ndim > 1 else x
            raise ChartDomainError(f"{what} outside the chart box", offending)

    def metric_jet(self, x, order: int = 1):
        """(g, dg, d2g) at x of shape (..., m); derivatives up to `order`"""
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        m = self.m
        const = self.constant_metric
        if const is not None:
            g = np.broadcast_to(const, batch + (m, m)).copy()
            dg = np.zeros(batch + (m, m, m)) if order >= 1 else None
            d2g = np.zeros(batch + (m, m, m, m)) if order >= 2 else None
            return g, dg, d2g
        g = np.empty(batch + (m, m))
        dg = np.empty(batch + (m, m, m)) if order >= 1 else None
        d2g = np.empty(batch + (m, m, m, m)) if order >= 2 else None
        for i in range(m):
            for j in range(i, m):
                d = eval_with_derivatives(self.metric[i][j], x, order=order)
                for a, b in {(i, j), (j, i)}:
                    g[..., a, b] = d.value
                    if order >= 1:
                        dg[..., a, b, :] = d.gradient
                    if order >= 2:
                        d2g[..., a, b, :, :] = d.hessian
        return g, dg, d2g

    def metric_at(self, x) -> np.ndarray:
        return self.metric_jet(x, order=0)[0]


class Connection(NamedTuple):
    g: np.ndarray
    ginv: np.ndarray
    dg: np.ndarray
    gamma: np.ndarray
    dgamma: Optional[np.ndarray]
    d2g: Optional[np.ndarray]


def _inverse(g: np.ndarray) -> np.ndarray:
    try:
        ginv = np.linalg.inv(g)
    except np.linalg.LinAlgError as exc:
        raise GeometryError(f"singular metric: {exc}") from None
    if not np.all(np.isfinite(ginv)):
        raise GeometryError("metric is singular or not finite")
    return ginv


def connection(M: ChartManifold, x, order: int = 1) -> Connection:
    """Metric, inverse, Christoffel symbols and (order 2) their derivatives at x"""
    g, dg, d2g = M.metric_jet(x, order=max(order, 1))
    ginv = _inverse(g)
    if M.constant_metric is not None:
        zeros3 = np.zeros_like(dg)
        dgamma = np.zeros(dg.shape + (M.m,)) if order >= 2 else None
        return Connection(g, ginv, dg, zeros3, dgamma, d2g)
    S = dg.swapaxes(-1, -2) + dg - np.einsum("...ijl->...lij", dg)
    gamma = 0.5 * np.einsum("...kl,...lij->...kij", ginv, S)
    dgamma = None
    if order >= 2:
        dginv = -np.einsum("...ka,...abu,...bl->...klu", ginv, dg, ginv)
        dS = d2g.swapaxes(-2, -3) + d2g - np.einsum("...ijlu->...liju", d2g)
        dgamma = 0.5 * (
            np.einsum("...klu,...lij->...kiju", dginv, S) + np.einsum("...kl,...liju->...kiju", ginv, dS)
        )
    return Connection(g, ginv, dg, gamma, dgamma, d2g)


def christoffel(M: ChartManifold, x, a, b) -> np.ndarray:
    """Gamma_x(a, b)"""
    gamma = connection(M, x).gamma
    return np.einsum("...kij,...i,...j->...k", gamma, np.asarray(a, float), np.asarray(b, float))


def gee(M: ChartManifold, x, a, b) -> np.ndarray:
    """G_x(a, b), defined by (g a, Gamma(b, c)) = (G(a, b), c) for all c"""
    con = connection(M, x)
    ga = np.einsum("...ij,...j->...i", con.g, np.asarray(a, float))
    return np.einsum("...k,...kjl,...j->...l", ga, con.gamma, np.asarray(b, float))


def riemann_tensor(M: ChartManifold, x) -> Tuple[np.ndarray, np.ndarray]:
    """(R, g) with R[..., r, s, u, v] the components of R(d_u, d_v) d_s along d_r"""
    con = connection(M, x, order=2)
    dG, G = con.dgamma, con.gamma
    R = (
        np.einsum("...rvsu->...rsuv", dG)
        - np.einsum("...rusv->...rsuv", dG)
        + np.einsum("...rul,...lvs->...rsuv", G, G)
        - np.einsum("...rvl,...lus->...rsuv", G, G)
    )
    return R, con.g


def curvature(M: ChartManifold, x, a, b, c) -> np.ndarray:
    """R(a, b)c"""
    R, _ = riemann_tensor(M, x)
    return np.einsum("...rsuv,...s,...u,...v->...r", R, np.asarray(c, float), np.asarray(a, float), np.asarray(b, float))


def _lowered(R: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.einsum("...ar,...rsuv->...asuv", g, R)


def sectional_curvature(M: ChartManifold, x, a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    R, g = riemann_tensor(M, x)
    aa, bb, ab = a @ g @ a, b @ g @ b, a @ g @ b
    gram = aa * bb - ab**2
    if gram <= 1e-10:
        raise DegenerateSpanError(f"tangent vectors do not span a plane (Gram determinant {gram:.3e})")
    num = np.einsum("asuv,s,u,v,a->", _lowered(R, g), b, a, b, a)
    return float(num / gram)


@dataclass(frozen=True)
class SectionalMax:
    value: float
    frame: Optional[np.ndarray]  # two g-orthonormal chart vectors (columns)


def _plane_value(Ro: np.ndarray, P: np.ndarray) -> float:
    p, q = P[:, 0], P[:, 1]
    return float(np.einsum("ijkl,i,j,k,l->", Ro, p, q, q, p))


def _plane_gradient(Ro: np.ndarray, P: np.ndarray) -> np.ndarray:
    p, q = P[:, 0], P[:, 1]
    gp = np.einsum("ijkl,j,k,l->i", Ro, q, q, p) + np.einsum("ijkl,i,j,k->l", Ro, p, q, q)
    gq = np.einsum("ijkl,i,k,l->j", Ro, p, q, p) + np.einsum("ijkl,i,j,l->k", Ro, p, q, p)
    return np.stack([gp, gq], axis=1)


def _orthonormalize(P: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(P)
    return Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))


def max_sectional(M: ChartManifold, x, restarts: int = None, seed: int = 0) -> SectionalMax:
    """K*(x): largest sectional curvature over tangent planes at one point"""
    restarts = cfg.sectional_restarts if restarts is None else restarts
    x = np.asarray(x, dtype=float)
    m = M.m
    if m < 2:
        return SectionalMax(0.0, None)
    R, g = riemann_tensor(M, x)
    if m == 2:
        value = float(_lowered(R, g)[0, 1, 0, 1] / np.linalg.det(g))
        L = np.linalg.cholesky(g)
        return SectionalMax(value, np.linalg.inv(L).T)

    # curvature in a g-orthonormal basis: Ro[i,j,k,l] = <R(e_i, e_j) e_k, e_l>
    B = np.linalg.inv(np.linalg.cholesky(g)).T
    Ro = np.einsum("asuv,al,sk,ui,vj->ijkl", _lowered(R, g), B, B, B, B)
    rng = np.random.default_rng(seed)
    starts = [np.eye(m)[:, [i, j]] for i in range(m) for j in range(i + 1, m)]
    best_start = max(starts, key=lambda P: _plane_value(Ro, P))
    candidates = [best_start] + [_orthonormalize(rng.standard_normal((m, 2))) for _ in range(restarts)]

    best_value, best_frame = -np.inf, None
    for P in candidates:
        value = _plane_value(Ro, P)
        step = 1.0
        for _ in range(500):
            G = _plane_gradient(Ro, P)
            G = G - P @ (0.5 * (P.T @ G + G.T @ P))
            if np.linalg.norm(G) < 1e-12 or step < 1e-14:
                break
            trial = _orthonormalize(P + step * G)
            trial_value = _plane_value(Ro, trial)
            if trial_value > value:
                P, value = trial, trial_value
                step *= 1.5
            else:
                step *= 0.5
        if value > best_value:
            best_value, best_frame = value, B @ P
    return SectionalMax(float(best_value), best_frame)


def gradient(M: ChartManifold, f: ScalarField, x, phi=None) -> np.ndarray:
    """nabla f = g^-1 f_x"""
    d = f.derivatives(x, phi, order=1)
    ginv = _inverse(M.metric_at(x))
    return np.einsum("...ij,...j->...i", ginv, d.gradient)


def hessian_form(M: ChartManifold, f: ScalarField, x, phi=None, derivs: Derivatives = None) -> np.ndarray:
    """Coordinate matrix A of Hess f: A = f_xx - sum_k f_k Gamma^k"""
    d = derivs if derivs is not None else f.derivatives(x, phi, order=2)
    gamma = connection(M, x).gamma
    return d.hessian[..., : M.m, : M.m] - np.einsum("...k,...kij->...ij", d.gradient[..., : M.m], gamma)


def hessian_quadform(M: ChartManifold, f: ScalarField, x, xi, phi=None) -> float:
    xi = np.asarray(xi, dtype=float)
    A = hessian_form(M, f, x, phi)
    return np.einsum("...i,...ij,...j->...", xi, A, xi)


def metric_bounds(M: ChartManifold, points) -> Tuple[float, float]:
    """Extreme metric eigenvalues over sample points; the metric must be positive definite"""
    g = M.metric_at(np.asarray(points, dtype=float))
    eig = np.linalg.eigvalsh(g)
    lo, hi = float(eig.min()), float(eig.max())
    if not np.isfinite(lo) or lo <= 1e-8:
        raise GeometryError(f"metric is not positive definite on the samples (min eigenvalue {lo:.3e})")
    return lo, hi


def geodesic(M: ChartManifold, x, xi, t) -> np.ndarray:
    """Positions of the geodesic with x(0) = x, x'(0) = xi at times t"""
    m = M.m
    t = np.atleast_1d(np.asarray(t, dtype=float))

    def rhs(_, z):
        pos, vel = z[:m], z[m:]
        gam = connection(M, pos).gamma
        return np.concatenate([vel, -np.einsum("kij,i,j->k", gam, vel, vel)])

    out = np.empty((t.size, m))
    z0 = np.concatenate([np.asarray(x, float), np.asarray(xi, float)])
    for sign in (1.0, -1.0):
        mask = (t >= 0) if sign > 0 else (t < 0)
        if not np.any(mask):
            continue
        times = t[mask]
        order = np.argsort(sign * times)
        t_end = times[order[-1]]
        if t_end == 0.0:
            out[mask] = z0[:m]
            continue
        sol = solve_ivp(rhs, (0.0, t_end), z0, method="DOP853", t_eval=times[order], rtol=1e-13, atol=1e-14)
        if sol.status != 0:
            raise IntegrationError(f"geodesic integration failed: {sol.message}")
        res = np.empty((times.size, m))
        res[order] = sol.y[:m].T
        out[mask] = res
    return out


class SampledTrajectory:
    """Trajectory from nodes (t, x, xdot) with cubic Hermite interpolation"""

    def __init__(self, t, x, v):
        order = np.argsort(t)
        self.t = np.asarray(t, dtype=float)[order]
        self.x = np.asarray(x, dtype=float)[order]
        self.v = np.asarray(v, dtype=float)[order]
        self._spline = CubicHermiteSpline(self.t, self.x, self.v, axis=0)

    def position(self, t):
        return self._spline(t)

    def velocity(self, t):
        return self._spline(t, 1)


@dataclass(frozen=True, eq=False)
class TangentFrame:
    """Parallel-transported vectors along a trajectory; frames[i] holds the columns at times[i]"""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    frames: np.ndarray
    derivatives: np.ndarray

    @cached_property
    def _spline(self) -> CubicHermiteSpline:
        order = np.argsort(self.times)
        return CubicHermiteSpline(self.times[order], self.frames[order], self.derivatives[order], axis=0)

    def at(self, t) -> np.ndarray:
        """Frame at time t by cubic Hermite interpolation between nodes"""
        return self._spline(t)

    def orthonormality_defect(self, M: ChartManifold) -> float:
        g = M.metric_at(self.positions)
        gram = np.einsum("nir,nij,njs->nrs", self.frames, g, self.frames)
        return float(np.max(np.abs(gram - np.eye(self.frames.shape[-1]))))


def orthonormal_basis(M: ChartManifold, x) -> np.ndarray:
    """Columns e_i with e^T g(x) e = I"""
    try:
        L = np.linalg.cholesky(M.metric_at(x))
    except np.linalg.LinAlgError as exc:
        raise GeometryError(f"metric factorization failed at {np.asarray(x).tolist()}: {exc}") from None
    return np.linalg.inv(L).T


def parallel_transport(
    M: ChartManifold,
    trajectory: Trajectory,
    t_nodes,
    xi0=None,
    rtol: float = 1e-12,
    atol: float = 1e-13,
) -> TangentFrame:
    """
    Integrate xi' + Gamma(x', xi) = 0 along the trajectory (adaptive RK45).

    t_nodes starts at the time where xi0 is given and is monotone. xi0 may be a
    vector, a matrix of column vectors, or None for a g-orthonormal basis.
    """
    t_nodes = np.asarray(t_nodes, dtype=float)
    x_nodes = np.array([trajectory.position(t) for t in t_nodes])
    v_nodes = np.array([trajectory.velocity(t) for t in t_nodes])
    M.require_in_box(x_nodes, "trajectory")
    m = M.m
    if xi0 is None:
        E0 = orthonormal_basis(M, x_nodes[0])
    else:
        E0 = np.asarray(xi0, dtype=float).reshape(m, -1)
    r = E0.shape[1]

    if M.constant_metric is not None:
        frames = np.broadcast_to(E0, (t_nodes.size, m, r)).copy()
        return TangentFrame(t_nodes, x_nodes, v_nodes, frames, np.zeros_like(frames))

    def rhs(t, y):
        pos = trajectory.position(t)
        vel = trajectory.velocity(t)
        gam = connection(M, pos).gamma
        E = y.reshape(m, r)
        return -np.einsum("kij,i,jc->kc", gam, vel, E).ravel()

    sol = solve_ivp(rhs, (t_nodes[0], t_nodes[-1]), E0.ravel(), method="RK45", t_eval=t_nodes, rtol=rtol, atol=atol)
    if sol.status != 0:
        raise IntegrationError(f"parallel transport failed: {sol.message}")
    frames = sol.y.T.reshape(-1, m, r)
    gam = connection(M, x_nodes).gamma
    derivs = -np.einsum("nkij,ni,njc->nkc", gam, v_nodes, frames)
    return TangentFrame(t_nodes, x_nodes, v_nodes, frames, derivs)


# --- connecting map -------------------------------------------------------


def _connect_rhs(M: ChartManifold, V: ScalarField):
    """x'' + Gamma(x', x') = (|x'|_g^2 / 2) g^-1 V_x with its state-transition matrix"""
    m = M.m
    eye = np.eye(m)

    def accel(x, p, with_jacobian: bool):
        con = connection(M, x, order=2 if with_jacobian else 1)
        d = V.derivatives(x, order=2 if with_jacobian else 1)
        w = con.ginv @ d.gradient
        gp = con.g @ p
        q = p @ gp
        a = -np.einsum("kij,i,j->k", con.gamma, p, p) + 0.5 * q * w
        if not with_jacobian:
            return a, None, None
        dw = con.ginv @ (d.hessian - np.einsum("abu,b->au", con.dg, w))
        a_x = (
            -np.einsum("kiju,i,j->ku", con.dgamma, p, p)
            + 0.5 * np.outer(w, np.einsum("a,abu,b->u", p, con.dg, p))
            + 0.5 * q * dw
        )
        a_p = -2.0 * np.einsum("kij,i->kj", con.gamma, p) + np.outer(w, gp)
        return a, a_x, a_p

    def rhs(_, z):
        x, p = z[:m], z[m : 2 * m]
        Phi = z[2 * m :].reshape(2 * m, 2 * m)
        a, a_x, a_p = accel(x, p, True)
        J = np.block([[np.zeros((m, m)), eye], [a_x, a_p]])
        return np.concatenate([p, a, (J @ Phi).ravel()])

    return rhs, accel


@dataclass(eq=False)
class ConnectingPath:
    """
    Discretized connecting path chi(s), s in [0, 1], with dense evaluation.

    segments holds (s_start, s_end, solution); each solution carries the local
    state-transition matrix, chained into a global one by `state`.
    """

    start: np.ndarray
    end: np.ndarray
    s: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    defect: float
    method: str
    iterations: int
    segments: List[Tuple[float, float, object]] = field(repr=False, default_factory=list)
    _chain: List[np.ndarray] = field(repr=False, default_factory=list)

    def __post_init__(self):
        m = self.start.size
        acc = np.eye(2 * m)
        self._chain = []
        for s0, s1, sol in self.segments:
            self._chain.append(acc)
            acc = sol.sol(s1)[2 * m :].reshape(2 * m, 2 * m) @ acc

    def _segment(self, s: float) -> int:
        for j, (s0, s1, _) in enumerate(self.segments):
            if s <= s1 or j == len(self.segments) - 1:
                return j
        return len(self.segments) - 1

    def state(self, s: float, segment: Optional[int] = None):
        """(x, p, Phi) at s; Phi maps variations of (x(0), p(0)) to variations at s"""
        m = self.start.size
        j = self._segment(s) if segment is None else segment
        z = self.segments[j][2].sol(s)
        Phi = z[2 * m :].reshape(2 * m, 2 * m) @ self._chain[j]
        return z[:m], z[m : 2 * m], Phi

    def initial_variation(self, dx, dy) -> np.ndarray:
        """(dx0, dp0) that moves the endpoints by dx and dy"""
        m = self.start.size
        _, _, Phi1 = self.state(1.0)
        dx = np.asarray(dx, dtype=float)
        dp = np.linalg.solve(Phi1[:m, m:], np.asarray(dy, dtype=float) - Phi1[:m, :m] @ dx)
        return np.concatenate([dx, dp])

    def variation(self, s: float, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(eta, d eta / ds) at s for the initial variation c = (dx0, dp0)"""
        m = self.start.size
        _, _, Phi = self.state(s)
        dz = Phi @ c
        return dz[:m], dz[m:]

    def ode_residual(self, M: ChartManifold, V: ScalarField, s_nodes=None, h: float = 1e-3) -> float:
        """Max |p'(s) - a(x, p)| at interior nodes, p' by a five-point stencil on the dense solution"""
        _, accel = _connect_rhs(M, V)
        m = self.start.size
        s_nodes = self.s[1:-1] if s_nodes is None else np.asarray(s_nodes, dtype=float)
        worst = 0.0
        for s in s_nodes:
            j = self._segment(s)
            sol = self.segments[j][2].sol
            p = [sol(s + k * h)[m : 2 * m] for k in (-2, -1, 1, 2)]
            dp = (p[0] - 8.0 * p[1] + 8.0 * p[2] - p[3]) / (12.0 * h)
            z = sol(s)
            a, _, _ = accel(z[:m], z[m : 2 * m], False)
            worst = max(worst, float(np.max(np.abs(dp - a))))
        return worst


def _integrate_segment(rhs, s0: float, s1: float, x, p):
    m = x.size
    z0 = np.concatenate([x, p, np.eye(2 * m).ravel()])
    sol = solve_ivp(rhs, (s0, s1), z0, method="DOP853", rtol=1e-12, atol=1e-13, dense_output=True)
    if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
        raise IntegrationError(f"connecting-path integration failed: {sol.message}")
    return sol


def _single_shooting(rhs, x, y, tol, max_iter):
    m = x.size
    p0 = y - x

    def shoot(p):
        sol = _integrate_segment(rhs, 0.0, 1.0, x, p)
        return sol, sol.y[:m, -1] - y

    sol, res = shoot(p0)
    for it in range(max_iter):
        if np.max(np.abs(res)) <= 0.01 * tol:
            return p0, [(0.0, 1.0, sol)], it
        J = sol.y[2 * m :, -1].reshape(2 * m, 2 * m)[:m, m:]
        step = np.linalg.solve(J, -res)
        lam, accepted = 1.0, False
        for _ in range(12):
            try:
                trial_sol, trial_res = shoot(p0 + lam * step)
            except (IntegrationError, ExpressionDomainError, GeometryError):
                lam *= 0.5
                continue
            if np.linalg.norm(trial_res) < np.linalg.norm(res):
                p0, sol, res, accepted = p0 + lam * step, trial_sol, trial_res, True
                break
            lam *= 0.5
        if not accepted:
            break
    if np.max(np.abs(res)) <= tol:
        return p0, [(0.0, 1.0, sol)], max_iter
    raise NoConnectionError(f"single shooting stagnated with end mismatch {np.max(np.abs(res)):.3e}")


def _multiple_shooting(rhs, x, y, tol, max_iter, segments):
    m = x.size
    nodes = np.linspace(0.0, 1.0, segments + 1)
    # unknowns: p_0, then (x_j, p_j) for j = 1..S-1
    U = [y - x]
    for s in nodes[1:-1]:
        U += [x + s * (y - x), y - x]
    U = np.concatenate(U)

    def split(U):
        states = [(x, U[:m])]
        for j in range(1, segments):
            off = m + 2 * m * (j - 1)
            states.append((U[off : off + m], U[off + m : off + 2 * m]))
        return states

    def evaluate(U):
        states = split(U)
        sols, res = [], []
        for j, (xj, pj) in enumerate(states):
            sol = _integrate_segment(rhs, nodes[j], nodes[j + 1], xj, pj)
            sols.append(sol)
            end = sol.y[: 2 * m, -1]
            if j < segments - 1:
                res.append(end - np.concatenate(states[j + 1]))
            else:
                res.append(end[:m] - y)
        return sols, np.concatenate(res)

    def jacobian(sols):
        n = U.size
        J = np.zeros((n, n))
        for j, sol in enumerate(sols):
            Phi = sol.y[2 * m :, -1].reshape(2 * m, 2 * m)
            row = 2 * m * j
            rows = slice(row, row + (2 * m if j < segments - 1 else m))
            block = Phi if j < segments - 1 else Phi[:m]
            if j == 0:
                J[rows, 0:m] = block[:, m:]
            else:
                off = m + 2 * m * (j - 1)
                J[rows, off : off + 2 * m] = block
            if j < segments - 1:
                off = m + 2 * m * j
                J[row : row + 2 * m, off : off + 2 * m] -= np.eye(2 * m)
        return J

    sols, res = evaluate(U)
    for it in range(max_iter):
        if np.max(np.abs(res)) <= 0.01 * tol:
            break
        step = np.linalg.solve(jacobian(sols), -res)
        lam, accepted = 1.0, False
        for _ in range(12):
            try:
                trial_sols, trial_res = evaluate(U + lam * step)
            except (IntegrationError, ExpressionDomainError, GeometryError):
                lam *= 0.5
                continue
            if np.linalg.norm(trial_res) < np.linalg.norm(res):
                U, sols, res, accepted = U + lam * step, trial_sols, trial_res, True
                break
            lam *= 0.5
        if not accepted:
            break
    if np.max(np.abs(res)) > tol:
        raise NoConnectionError(f"multiple shooting stagnated with defect {np.max(np.abs(res)):.3e}")
    return [(nodes[j], nodes[j + 1], sol) for j, sol in enumerate(sols)], float(np.max(np.abs(res)))


def conformal_connect(
    M: ChartManifold,
    V: ScalarField,
    x,
    y,
    level: Optional[float] = None,
    tol: float = None,
    max_iter: int = None,
    segments: int = None,
    nodes: int = 33,
) -> ConnectingPath:
    """
    Connecting path chi(., x, y): geodesic of the conformal metric e^V g, in the
    parametrization x'' + Gamma(x', x') = (|x'|_g^2 / 2) g^-1 V_x.

    Single shooting first, multiple shooting when it stagnates. With `level`
    the endpoints and every node must satisfy V < level.
    """
    tol = cfg.tol_bvp if tol is None else tol
    max_iter = cfg.bvp_max_iter if max_iter is None else max_iter
    segments = cfg.bvp_segments if segments is None else segments
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = M.m
    M.require_in_box(np.stack([x, y]), "connecting-path endpoint")
    if level is not None:
        ends = V.value(np.stack([x, y]))
        if np.any(ends >= level):
            raise DomainViolationError(f"endpoint outside the sublevel region V < {level}: V = {ends.tolist()}")

    rhs, _ = _connect_rhs(M, V)
    method = "constant" if np.array_equal(x, y) else "single"
    try:
        _, segs, iterations = _single_shooting(rhs, x, y, tol, max_iter)
        m_shoot = segs[0][2].y[:m, -1]
        defect = float(np.max(np.abs(m_shoot - y)))
    except (NoConnectionError, IntegrationError, np.linalg.LinAlgError, ExpressionDomainError, GeometryError) as exc:
        logger.debug(f"Single shooting failed ({exc}); switching to multiple shooting", module="geometry")
        try:
            segs, defect = _multiple_shooting(rhs, x, y, tol, max_iter, segments)
        except (IntegrationError, np.linalg.LinAlgError, ExpressionDomainError, GeometryError) as inner:
            raise NoConnectionError(f"no connecting path from {x.tolist()} to {y.tolist()}: {inner}") from None
        method, iterations = "multiple", max_iter

    s = np.linspace(0.0, 1.0, nodes)
    path = ConnectingPath(x, y, s, np.empty((nodes, m)), np.empty((nodes, m)), defect, method, iterations, segs)
    for i, si in enumerate(s):
        pos, vel, _ = path.state(si)
        path.positions[i], path.velocities[i] = pos, vel
    path.positions[0], path.positions[-1] = x, y

    if not np.all(M.in_box(path.positions, tol=1e-12)):
        raise DomainViolationError("connecting path leaves the chart box")
    if level is not None:
        values = V.value(path.positions)
        if np.any(values >= level):
            worst = path.positions[int(np.argmax(values))]
            raise DomainViolationError(f"connecting path leaves V < {level} near {worst.tolist()}")
    return path


def convexity_margin(problem, path1: Trajectory, path2: Trajectory, s_grid=None, t_grid=None, phi0=None, h_s: float = 1e-3) -> float:
    """
    Empirical kappa: min over (s, t) of d^2/ds^2 L(phi0 + t omega, chi, d_t chi)
    divided by |nabla_xi eta|^2 + |xi|^2 (|eta|^2 + 1).

    The s-derivative is a Richardson-extrapolated second difference; returns
    +inf when the two paths coincide at every t.
    """
    M, W, V, level = problem.manifold, problem.W, problem.domain.V, problem.domain.level
    omega = problem.omega.as_array()
    s_grid = np.linspace(0.1, 0.9, 9) if s_grid is None else np.asarray(s_grid, dtype=float)
    t_grid = np.linspace(0.0, 2.0, 3) if t_grid is None else np.asarray(t_grid, dtype=float)
    phi0 = np.zeros(problem.k) if phi0 is None else np.asarray(phi0, dtype=float)

    best = np.inf
    for t in t_grid:
        x1, x2 = np.asarray(path1.position(t), float), np.asarray(path2.position(t), float)
        if np.max(np.abs(x1 - x2)) <= 1e-14:
            continue
        chi = conformal_connect(M, V, x1, x2, level=level)
        c = chi.initial_variation(path1.velocity(t), path2.velocity(t))
        phi = phi0 + t * omega

        def lagrangian(s):
            x, _, _ = chi.state(s)
            eta, _ = chi.variation(s, c)
            g = M.metric_at(x)
            return 0.5 * eta @ g @ eta + float(W.value(x, phi))

        for s in s_grid:
            L0 = lagrangian(s)

            def second_difference(h):
                return (lagrangian(s + h) - 2.0 * L0 + lagrangian(s - h)) / h**2

            d2 = (4.0 * second_difference(0.5 * h_s) - second_difference(h_s)) / 3.0
            x, xi, _ = chi.state(s)
            eta, deta = chi.variation(s, c)
            g = M.metric_at(x)
            cov = deta + christoffel(M, x, xi, eta)
            denom = cov @ g @ cov + (xi @ g @ xi) * (eta @ g @ eta + 1.0)
            if denom > 0.0 and xi @ g @ xi > 0.0:
                best = min(best, d2 / denom)
    return float(best)
