"""
Sampling verifier for the hypotheses on V and W.

Every check reports a signed margin, the sample where it is attained, and a
verdict. A pass means "pass at this resolution with this margin"; nothing here
is a proof.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize as scipy_minimize

from config import cfg
from core.errors import DomainViolationError, GeometryError, NoConnectionError, QPError
from core.geometry import (
    ChartManifold,
    ScalarField,
    conformal_connect,
    connection,
    hessian_form,
    max_sectional,
    riemann_tensor,
)
from core.problem import DomainSpec, ProblemSpec
from core.torusfield import TorusGrid
from utils.logger import logger

CHART_NOTE = "checked on chart domain only"


class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    INCONCLUSIVE = "inconclusive"

    @staticmethod
    def worst(verdicts) -> "Verdict":
        verdicts = list(verdicts)
        if Verdict.FAIL in verdicts:
            return Verdict.FAIL
        if Verdict.INCONCLUSIVE in verdicts:
            return Verdict.INCONCLUSIVE
        return Verdict.PASS


@dataclass
class ConditionFragment:
    name: str
    verdict: Verdict
    margin: float
    argmin: Optional[List[float]]
    samples: int
    note: str = ""
    parts: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "verdict": self.verdict.value,
            "margin": float(self.margin),
            "argmin": None if self.argmin is None else [float(v) for v in self.argmin],
            "samples": int(self.samples),
            "note": self.note,
            "parts": self.parts,
        }


@dataclass
class ConditionReport:
    fragments: Dict[str, ConditionFragment]
    resolution: int
    seed: int
    note: str = CHART_NOTE

    @property
    def verdict(self) -> Verdict:
        return Verdict.worst(f.verdict for f in self.fragments.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "verdict": self.verdict.value,
            "resolution": self.resolution,
            "seed": self.seed,
            "note": self.note,
            "fragments": {name: frag.to_dict() for name, frag in self.fragments.items()},
        }


@dataclass
class DomainSample:
    """Samples of the closed region Omega-bar: grid points of one component plus a projected boundary band"""

    interior: np.ndarray  # grid points with V < level in the component
    closed: np.ndarray  # grid points with V <= level + eps_bnd, then boundary points
    boundary: np.ndarray  # points on V = level
    touches_box: bool
    components: int
    spacing: np.ndarray
    resolution: int


# --- pointwise quantities ---------------------------------------------------


def _metric_factor(g: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise GeometryError(f"metric factorization failed: {exc}") from None


def relative_min_eig(g: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of L^-1 A L^-T with g = L L^T (batched)"""
    L = _metric_factor(g)
    Linv = np.linalg.inv(L)
    S = Linv @ A @ np.swapaxes(Linv, -1, -2)
    return np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, -1, -2)))[..., 0]


def _norm_sq(g: np.ndarray, covector: np.ndarray) -> np.ndarray:
    """|grad f|_g^2 from the differential f_x"""
    return np.einsum("...i,...ij,...j->...", covector, np.linalg.inv(g), covector)


def lambda_V(M: ChartManifold, V: ScalarField, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return relative_min_eig(M.metric_at(x), hessian_form(M, V, x))


def mu_V(M: ChartManifold, V: ScalarField, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = V.derivatives(x, order=2)
    A = hessian_form(M, V, x, derivs=d)
    v = d.gradient
    return relative_min_eig(M.metric_at(x), A - 0.5 * v[..., :, None] * v[..., None, :])


def max_sectional_field(M: ChartManifold, points: np.ndarray, seed: int = 0) -> np.ndarray:
    """K* at many points"""
    points = np.asarray(points, dtype=float)
    if M.m < 2 or M.constant_metric is not None:
        return np.zeros(points.shape[:-1])
    if M.m == 2:
        R, g = riemann_tensor(M, points)
        num = np.einsum("...r,...rsuv->...suv", g[..., 0, :], R)[..., 1, 0, 1]
        return num / np.linalg.det(g)
    flat = points.reshape(-1, M.m)
    values = np.array([max_sectional(M, x, seed=seed).value for x in flat])
    return values.reshape(points.shape[:-1])


# --- sampling -------------------------------------------------------------


def _project_to_level(M: ChartManifold, V: ScalarField, x: np.ndarray, level: float, steps: int = 4) -> np.ndarray:
    """Newton steps x <- x - (V - v) grad V / |grad V|^2 onto V = level"""
    for _ in range(steps):
        d = V.derivatives(x, order=1)
        g = M.metric_at(x)
        grad = np.einsum("...ij,...j->...i", np.linalg.inv(g), d.gradient)
        nrm = np.einsum("...i,...i->...", d.gradient, grad)
        safe = np.where(nrm > 0, nrm, 1.0)
        x = x - ((d.value - level) / safe)[..., None] * grad
    return x


def sample_domain(problem: ProblemSpec, resolution: int = None) -> DomainSample:
    """
    Grid samples of the component of {V <= v + eps_bnd} containing the grid
    minimizer of V, labelled with face adjacency, plus boundary points found
    between grid neighbours across the level and projected onto V = v.
    """
    M, dom = problem.manifold, problem.domain
    S = resolution or dom.resolution
    axes = [np.linspace(lo, hi, S) for lo, hi in M.box]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = dom.V.value(mesh)
    closed_mask = values <= dom.level + dom.eps_bnd
    if not np.any(closed_mask):
        raise DomainViolationError(f"sampled sublevel set {{V <= {dom.level}}} is empty on the chart box")

    labels, count = ndimage.label(closed_mask)
    seed_idx = np.unravel_index(np.argmin(np.where(closed_mask, values, np.inf)), values.shape)
    component = labels == labels[seed_idx]

    edge = np.zeros_like(component)
    for axis in range(M.m):
        sl = [slice(None)] * M.m
        sl[axis] = 0
        edge[tuple(sl)] = True
        sl[axis] = -1
        edge[tuple(sl)] = True
    touches = bool(np.any(component & edge))

    inside = component & (values < dom.level)
    band: List[np.ndarray] = []
    for axis in range(M.m):
        lo = [slice(None)] * M.m
        hi = [slice(None)] * M.m
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a_in, b_in = inside[tuple(lo)], inside[tuple(hi)]
        a_out = values[tuple(hi)] >= dom.level
        b_out = values[tuple(lo)] >= dom.level
        xa, xb = mesh[tuple(lo)], mesh[tuple(hi)]
        va, vb = values[tuple(lo)], values[tuple(hi)]
        crossing = (a_in & a_out) | (b_in & b_out)
        if np.any(crossing):
            wa, wb = va[crossing], vb[crossing]
            frac = (dom.level - wa) / (wb - wa)
            band.append(xa[crossing] + frac[:, None] * (xb[crossing] - xa[crossing]))
    boundary = np.empty((0, M.m))
    if band:
        boundary = _project_to_level(M, dom.V, np.concatenate(band), dom.level)
        keep = np.all(np.isfinite(boundary), axis=-1) & M.in_box(boundary)
        keep &= np.abs(dom.V.value(boundary) - dom.level) <= dom.eps_bnd
        boundary = boundary[keep]

    closed = np.concatenate([mesh[component], boundary])
    spacing = (M.box[:, 1] - M.box[:, 0]) / (S - 1)
    if count > 1:
        logger.info(
            "Sublevel set has several sampled components; using the one containing the minimum of V",
            module="conditions",
            components=count,
        )
    return DomainSample(mesh[inside], closed, boundary, touches, int(count), spacing, S)


def _argmin(values: np.ndarray, points: np.ndarray) -> Tuple[float, np.ndarray]:
    j = int(np.argmin(values))
    return float(values[j]), points[j]


def _polish(func, x0: np.ndarray, best: float, problem: ProblemSpec) -> Tuple[float, np.ndarray]:
    """Bounded local minimization of a margin inside Omega-bar; never raises the sampled minimum"""
    dom = problem.domain

    def objective(x):
        if not problem.manifold.in_box(x) or float(dom.V.value(x)) > dom.level:
            return np.inf
        try:
            return float(func(x))
        except (QPError, np.linalg.LinAlgError):
            return np.inf

    res = scipy_minimize(objective, x0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 400})
    if np.isfinite(res.fun) and res.fun < best:
        return float(res.fun), np.asarray(res.x)
    return best, x0


def _verdict(margin: float, threshold: float) -> Verdict:
    return Verdict.PASS if margin > threshold else Verdict.FAIL


# --- checks -----------------------------------------------------------------


def check_C1(problem: ProblemSpec, sample: DomainSample = None) -> ConditionFragment:
    """2 lambda_V + |grad V|^2 > 0 on Omega-bar, v noncritical, Omega bounded in the box"""
    M, dom = problem.manifold, problem.domain
    sample = sample or sample_domain(problem)
    pts = sample.closed

    def margin_at(x):
        d = dom.V.derivatives(x, order=2)
        g = M.metric_at(x)
        return 2.0 * relative_min_eig(g, hessian_form(M, dom.V, x, derivs=d)) + _norm_sq(g, d.gradient)

    margin, where = _argmin(margin_at(pts), pts)
    margin, where = _polish(margin_at, where, margin, problem)

    parts: Dict[str, Any] = {"components": sample.components, "touches_box": sample.touches_box}
    verdict = _verdict(margin, cfg.delta_strict)
    if sample.boundary.shape[0]:
        d = dom.V.derivatives(sample.boundary, order=1)
        grad_norm = np.sqrt(_norm_sq(M.metric_at(sample.boundary), d.gradient))
        crit, crit_at = _argmin(grad_norm, sample.boundary)
        parts["min_boundary_gradient"] = crit
        parts["min_boundary_gradient_at"] = crit_at.tolist()
        if crit <= cfg.delta_crit:
            verdict = Verdict.FAIL
    else:
        parts["min_boundary_gradient"] = None
        if verdict == Verdict.PASS:
            verdict = Verdict.INCONCLUSIVE
    note = CHART_NOTE
    if sample.touches_box and verdict == Verdict.PASS:
        verdict = Verdict.INCONCLUSIVE
        note = "sublevel set touches the chart box (chart too small)"
    logger.debug("C1 checked", module="conditions", margin=margin, verdict=verdict)
    return ConditionFragment("C1", verdict, margin, where.tolist(), pts.shape[0], note, parts)


def _tangential_min_eig(M: ChartManifold, V: ScalarField, x: np.ndarray) -> np.ndarray:
    """Min eigenvalue of Hess V restricted to the g-orthogonal complement of grad V"""
    d = V.derivatives(x, order=2)
    A = hessian_form(M, V, x, derivs=d)
    g = M.metric_at(x)
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        # columns orthogonal (Euclidean) to the differential span {xi : dV(xi) = 0}
        _, _, vt = np.linalg.svd(d.gradient[i][None, :])
        Q = vt[1:].T
        out[i] = relative_min_eig(Q.T @ g[i] @ Q, Q.T @ A[i] @ Q)
    return out


def check_C2(problem: ProblemSpec, sample: DomainSample = None, seed: int = 0) -> ConditionFragment:
    """min (mu_V - 2K*) > 0 on Omega-bar and Hess V positive on T(boundary)"""
    M, dom = problem.manifold, problem.domain
    sample = sample or sample_domain(problem)
    pts = sample.closed

    def margin_at(x):
        return mu_V(M, dom.V, x) - 2.0 * max_sectional_field(M, x, seed)

    margin, where = _argmin(margin_at(pts), pts)
    margin, where = _polish(margin_at, where, margin, problem)
    verdict = _verdict(margin, cfg.delta_strict)
    parts: Dict[str, Any] = {"mu_minus_2K": margin}

    note = CHART_NOTE
    if M.m >= 2 and sample.boundary.shape[0]:
        tangential = _tangential_min_eig(M, dom.V, sample.boundary)
        tmin, tat = _argmin(tangential, sample.boundary)
        parts["boundary_hessian"] = tmin
        parts["boundary_hessian_at"] = tat.tolist()
        if tmin <= cfg.delta_pd:
            verdict = Verdict.FAIL
    elif M.m >= 2:
        parts["boundary_hessian"] = None
        note = "empty boundary sample"
        if verdict == Verdict.PASS:
            verdict = Verdict.INCONCLUSIVE
    if sample.touches_box and verdict == Verdict.PASS:
        verdict = Verdict.INCONCLUSIVE
        note = "sublevel set touches the chart box (chart too small)"
    logger.debug("C2 checked", module="conditions", margin=margin, verdict=verdict)
    return ConditionFragment("C2", verdict, margin, where.tolist(), pts.shape[0], note, parts)


def _torus_angles(problem: ProblemSpec, points: int = None) -> np.ndarray:
    grid = TorusGrid(problem.k, points or cfg.cond_torus_grid)
    return grid.points().reshape(-1, problem.k)


def theorem1_margins(problem: ProblemSpec, phi: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    (lambda_W + <grad W, grad V>/2, <grad W, grad V>) on the product of angle
    samples phi (Q, k) and points x (n, m); both arrays have shape (Q, n).
    """
    M, V, W = problem.manifold, problem.domain.V, problem.W
    x = np.asarray(x, dtype=float)
    con = connection(M, x)
    dV = V.derivatives(x, order=1).gradient
    X = np.broadcast_to(x[None, :, :], (phi.shape[0],) + x.shape)
    P = np.broadcast_to(phi[:, None, :], (phi.shape[0], x.shape[0], phi.shape[1]))
    dW = W.derivatives(X, P if W.depends_on_phi else None, order=2)
    A = dW.hessian - np.einsum("...k,...kij->...ij", dW.gradient, con.gamma)
    g = np.broadcast_to(con.g, A.shape)
    lam = relative_min_eig(g, A)
    pairing = np.einsum("qni,nij,nj->qn", dW.gradient, con.ginv, dV)
    return lam + 0.5 * pairing, pairing


def check_theorem1(problem: ProblemSpec, sample: DomainSample = None, torus_points: int = None) -> ConditionFragment:
    """lambda_W + <grad W, grad V>/2 > 0 on T^k x Omega-bar and <grad W, grad V> > 0 on T^k x boundary"""
    sample = sample or sample_domain(problem)
    phi = _torus_angles(problem, torus_points)
    pts = sample.closed

    interior, _ = theorem1_margins(problem, phi, pts)
    q, n = np.unravel_index(int(np.argmin(interior)), interior.shape)
    margin_in = float(interior[q, n])
    phi_at = phi[q]
    where = pts[n]
    margin_in, where = _polish(
        lambda x: theorem1_margins(problem, phi_at[None, :], np.atleast_2d(x))[0][0, 0], where, margin_in, problem
    )
    parts: Dict[str, Any] = {
        "interior_margin": margin_in,
        "interior_argmin": where.tolist(),
        "interior_phi": phi_at.tolist(),
        "torus_points": int(phi.shape[0]),
    }

    margin = margin_in
    verdict = _verdict(margin_in, cfg.delta_strict)
    note = CHART_NOTE
    if sample.boundary.shape[0]:
        _, pairing = theorem1_margins(problem, phi, sample.boundary)
        qb, nb = np.unravel_index(int(np.argmin(pairing)), pairing.shape)
        margin_bd = float(pairing[qb, nb])
        parts["boundary_margin"] = margin_bd
        parts["boundary_argmin"] = sample.boundary[nb].tolist()
        parts["boundary_phi"] = phi[qb].tolist()
        if margin_bd <= cfg.delta_strict:
            verdict = Verdict.FAIL
        if margin_bd < margin:
            margin, where = margin_bd, sample.boundary[nb]
    else:
        parts["boundary_margin"] = None
        note = "empty boundary sample"
        if verdict == Verdict.PASS:
            verdict = Verdict.INCONCLUSIVE
    logger.debug("Theorem-1 inequalities checked", module="conditions", margin=margin, verdict=verdict)
    return ConditionFragment("theorem1", verdict, margin, where.tolist(), pts.shape[0] * phi.shape[0], note, parts)


def check_C3(problem: ProblemSpec, sample: DomainSample = None, pairs: int = 6, seed: int = 0) -> ConditionFragment:
    """Connect random pairs of interior samples with the connecting map and report the worst ODE defect"""
    sample = sample or sample_domain(problem)
    M, dom = problem.manifold, problem.domain
    pts = sample.interior
    threshold = 10.0 * cfg.tol_bvp
    if pts.shape[0] < 2:
        return ConditionFragment("C3", Verdict.INCONCLUSIVE, 0.0, None, 0, "fewer than two interior samples")
    rng = np.random.default_rng(seed)
    worst, worst_at, failures = 0.0, None, []
    for _ in range(pairs):
        i, j = rng.choice(pts.shape[0], size=2, replace=False)
        x, y = pts[i], pts[j]
        try:
            path = conformal_connect(M, dom.V, x, y, level=dom.level)
            defect = max(path.defect, path.ode_residual(M, dom.V))
        except (NoConnectionError, DomainViolationError) as exc:
            failures.append({"x": x.tolist(), "y": y.tolist(), "error": str(exc)})
            continue
        if defect > worst or worst_at is None:
            worst, worst_at = defect, [x.tolist(), y.tolist()]
    margin = threshold - worst
    verdict = Verdict.FAIL if failures or margin <= 0 else Verdict.PASS
    parts = {"pairs": pairs, "worst_defect": worst, "worst_pair": worst_at, "failures": failures}
    return ConditionFragment("C3", verdict, margin, None, pairs, CHART_NOTE, parts)


def _unit_directions(M: ChartManifold, x: np.ndarray, count: int, rng) -> np.ndarray:
    """g-unit directions at each point: shape (n, count, m)"""
    L = _metric_factor(M.metric_at(x))
    Linv_T = np.swapaxes(np.linalg.inv(L), -1, -2)
    if M.m == 1:
        base = np.ones((count, 1))
    elif M.m == 2:
        theta = np.linspace(0.0, np.pi, count, endpoint=False)
        base = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    else:
        base = rng.standard_normal((count, M.m))
        base /= np.linalg.norm(base, axis=-1, keepdims=True)
    return np.einsum("nij,cj->nci", Linv_T, base)


def alpha2_margin(problem: ProblemSpec, sample: DomainSample = None, directions: int = 24, seed: int = 0) -> Tuple[float, List[float]]:
    """
    Largest alpha2 with z1^2 - |<grad V, e>| z1 z2 + (Hess V(e, e)/2 - K*) z2^2
    >= alpha2 (z1^2 + z2^2) over Omega-bar samples and g-unit e.
    """
    M, V = problem.manifold, problem.domain.V
    sample = sample or sample_domain(problem)
    pts = sample.closed
    rng = np.random.default_rng(seed)
    d = V.derivatives(pts, order=2)
    A = hessian_form(M, V, pts, derivs=d)
    kstar = max_sectional_field(M, pts, seed)
    E = _unit_directions(M, pts, directions, rng)
    a = np.abs(np.einsum("ni,nci->nc", d.gradient, E))
    dd = 0.5 * np.einsum("nci,nij,ncj->nc", E, A, E) - kstar[:, None]
    alpha = 0.5 * (1.0 + dd) - np.sqrt((0.5 * (1.0 - dd)) ** 2 + 0.25 * a**2)
    n, _ = np.unravel_index(int(np.argmin(alpha)), alpha.shape)
    return float(alpha.min()), pts[n].tolist()


def check_all(
    problem: ProblemSpec,
    resolution: int = None,
    seed: int = None,
    c3_pairs: int = 6,
    torus_points: int = None,
) -> ConditionReport:
    seed = cfg.seed if seed is None else seed
    sample = sample_domain(problem, resolution)
    fragments = {
        "C1": check_C1(problem, sample),
        "C2": check_C2(problem, sample, seed),
        "C3": check_C3(problem, sample, c3_pairs, seed),
        "theorem1": check_theorem1(problem, sample, torus_points),
    }
    alpha2, alpha2_at = alpha2_margin(problem, sample, seed=seed)
    fragments["C2"].parts["alpha2"] = alpha2
    fragments["C2"].parts["alpha2_at"] = alpha2_at
    report = ConditionReport(fragments, sample.resolution, seed)
    logger.log_stage(
        "conditions",
        problem=problem.name,
        verdict=report.verdict,
        margins={name: frag.margin for name, frag in fragments.items()},
    )
    return report
