"""
Unit tests for the L-BFGS optimizer and the spectral Galerkin engine
"""

import pytest
import numpy as np
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from scipy.optimize import rosen, rosen_der

from core.errors import BarrierInfeasibleError, ChartDomainError
from core.geometry import ChartManifold, ScalarField
from core.problem import DomainSpec, ProblemSpec
from core.torusfield import FourierField, FrequencyVector, TorusGrid, half_space_indices, pack, resize, unpack
from solver.engine import (
    GalerkinConfig,
    connecting_profile,
    functional_J,
    gradient_J,
    initial_guess,
    minimize,
)
from solver.lbfgs import LBFGSOptions, lbfgs, two_loop


def small_field(rng, N, amplitude):
    idx = half_space_indices(N, 2)
    coeffs = amplitude * (rng.normal(size=(len(idx), 2)) + 1j * rng.normal(size=(len(idx), 2)))
    coeffs[0] = coeffs[0].real
    return FourierField(2, N, 2, coeffs)


def planar_problem(W: str) -> ProblemSpec:
    return ProblemSpec(
        k=2,
        m=2,
        omega=FrequencyVector((1.0, np.sqrt(2.0))),
        manifold=ChartManifold.from_strings([["1", "0"], ["0", "1"]], np.array([[-2, 2], [-2, 2]], dtype=float)),
        W=ScalarField.parse(W, 2, 2),
        domain=DomainSpec(ScalarField.parse("(x1^2 + x2^2)/2", 2), 0.5),
        labels={"name": "planar"},
    )


class TestLBFGS:
    """Test suite for the optimizer"""

    def test_rosenbrock(self):
        """Classic banana valley from (-1.2, 1)"""
        result = lbfgs(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0]), LBFGSOptions(g_tol=1e-8, max_iter=1000))
        assert result.converged
        assert np.allclose(result.x, [1.0, 1.0], atol=1e-6)
        assert result.history[-1] <= result.history[0]

    def test_history_is_monotone(self):
        """Accepted steps never raise the objective beyond rounding"""
        result = lbfgs(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0, -0.5, 0.8]), LBFGSOptions(g_tol=1e-8, max_iter=2000))
        history = np.array(result.history)
        assert history.size == result.iterations + 1
        assert np.all(np.diff(history) <= 1e-14 * np.maximum(1.0, np.abs(history[:-1])))

    def test_quadratic(self):
        """Strictly convex quadratic reaches A^-1 b"""
        np.random.seed(42)
        Q = np.random.randn(6, 6)
        A = Q @ Q.T + 6.0 * np.eye(6)
        b = np.random.randn(6)
        result = lbfgs(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(6), LBFGSOptions(g_tol=1e-12, max_iter=200))
        assert result.converged
        assert np.allclose(result.x, np.linalg.solve(A, b), atol=1e-10)

    def test_infeasible_start(self):
        """An infinite value at x0 stops immediately"""
        result = lbfgs(lambda x: (np.inf, np.zeros_like(x)), np.ones(3))
        assert not result.converged
        assert result.message == "infeasible starting point"

    def test_line_search_backs_off_infeasible_region(self):
        """Points with x > 0.5 are infeasible; the minimum of (x - 1)^2 on x < 0.5 is approached"""
        def fun(x):
            if x[0] >= 0.5:
                return np.inf, np.zeros(1)
            return float((x[0] - 1.0) ** 2), np.array([2.0 * (x[0] - 1.0)])

        result = lbfgs(fun, np.array([0.0]), LBFGSOptions(g_tol=1e-12, max_iter=50))
        assert result.x[0] < 0.5
        assert result.f < 1.0

    def test_two_loop_without_history(self):
        """Empty memory gives steepest descent"""
        g = np.array([1.0, -2.0])
        assert np.array_equal(two_loop(g, [], []), -g)


class TestGalerkinConfig:
    """Test suite for engine settings"""

    def test_default_grid(self):
        """P = 0 means 2N + 2"""
        assert GalerkinConfig(N=5, P=0).P == 12

    def test_unresolved_grid(self):
        """P below 2N + 2 is rejected"""
        with pytest.raises(ValueError):
            GalerkinConfig(N=5, P=10)

    def test_padded_grid(self):
        """Nonlinear products use the padded grid"""
        assert GalerkinConfig(N=4, P=16, pad_factor=2).galerkin_grid(2).P == 32


class TestFunctional:
    """Test suite for the action functional and its gradient"""

    def test_value_at_exact_solution(self, flat_problem, flat_exact):
        """J = -(b, u)/2 at the solution of -D^2 u + u = b"""
        J = functional_J(flat_problem, flat_exact, TorusGrid(2, 16))
        assert J == pytest.approx(-(0.0225 + 0.02 / 3.0) / 2.0, abs=1e-12)

    def test_gradient_vanishes_at_exact_solution(self, flat_problem, flat_exact):
        """Euler-Lagrange residual of the closed-form field"""
        r = gradient_J(flat_problem, flat_exact, TorusGrid(2, 16))
        assert np.max(np.abs(r.coeffs)) <= 1e-12

    @pytest.mark.parametrize("name,amplitude", [("flat", 0.05), ("sphere", 0.01)])
    def test_gradient_matches_finite_differences(self, name, amplitude, flat_problem, sphere_problem):
        """pack(gradient_J) is the gradient of J composed with unpack"""
        problem = flat_problem if name == "flat" else sphere_problem
        rng = np.random.default_rng(42)
        grid = TorusGrid(2, 12)
        h = 1e-6
        for _ in range(10):
            u = small_field(rng, 2, amplitude)
            theta = pack(u)
            g = pack(gradient_J(problem, u, grid))
            d = rng.normal(size=theta.size)
            d /= np.linalg.norm(d)
            fp = functional_J(problem, unpack(theta + h * d, 2, 2, 2), grid)
            fm = functional_J(problem, unpack(theta - h * d, 2, 2, 2), grid)
            fd = (fp - fm) / (2.0 * h)
            assert abs(fd - g @ d) <= 1e-6 * max(abs(g @ d), np.linalg.norm(g), 1e-3)

    def test_field_outside_chart(self, flat_problem):
        """Samples beyond the chart box are reported with their angles"""
        with pytest.raises(ChartDomainError):
            functional_J(flat_problem, FourierField.constant([3.0, 0.0], 2, 2), TorusGrid(2, 8))


class TestEngine:
    """Test suite for barrier continuation and the solve report"""

    def test_initial_guess_is_averaged_critical_point(self, flat_problem):
        """The phi-average of W is |x|^2/2, critical at the origin"""
        u0, fallback = initial_guess(flat_problem, N=4)
        assert not fallback
        assert np.allclose(u0.coeffs[0].real, 0.0, atol=1e-10)
        assert np.all(u0.coeffs[1:] == 0)

    def test_recovers_closed_form(self, flat_solution):
        """Coefficient error against the exact solution"""
        assert flat_solution.converged
        assert flat_solution.reference_error <= 1e-8
        assert flat_solution.containment_margin > 0.0
        assert flat_solution.resolved
        assert flat_solution.stages[-1]["beta"] == 0.0

    def test_solution_modes(self, flat_solution):
        """a(1,0) = (0.075, 0), a(0,1) = (0, -0.1i/3)"""
        u = flat_solution.u
        assert np.allclose(u.coefficient((1, 0)), [0.075, 0.0], atol=1e-8)
        assert np.allclose(u.coefficient((0, 1)), [0.0, -0.1j / 3.0], atol=1e-8)
        assert np.allclose(u.coefficient((2, 1)), 0.0, atol=1e-8)

    def test_infeasible_start_raises(self, flat_problem, flat_config):
        """A constant field with V >= level cannot start the barrier"""
        with pytest.raises(BarrierInfeasibleError):
            minimize(flat_problem, flat_config, u0=FourierField.constant([1.5, 0.0], 4, 2))

    def test_deterministic(self, flat_problem, flat_config, flat_solution):
        """Same inputs, same coefficients"""
        again = minimize(flat_problem, flat_config)
        assert np.array_equal(again.u.coeffs, flat_solution.u.coeffs)
        assert again.iterations == flat_solution.iterations

    def test_report_excludes_timing(self, flat_solution):
        """Wall-clock time stays out of the report section"""
        doc = flat_solution.to_dict()
        assert "timing" not in doc
        assert doc["verdict"] == "converged"
        assert doc["u"]["N"] == 4

    def test_stage_records(self, flat_problem):
        """Every barrier stage logs and records its optimizer message"""
        report = minimize(flat_problem, GalerkinConfig(N=2, P=6))
        assert report.converged
        assert len(report.stages) >= 2
        for stage in report.stages:
            assert set(stage) >= {"beta", "iterations", "f", "grad_norm", "message"}
            assert isinstance(stage["message"], str)

    def test_rotated_coordinates(self):
        """Rotating the chart by an orthogonal R rotates the solution coefficients by R"""
        R = np.array([[0.6, -0.8], [0.8, 0.6]])
        config = GalerkinConfig(N=2, P=8)
        plain = minimize(planar_problem("(x1^2 + x2^2)/2 - 0.3*cos(phi1)*x1 - 0.2*sin(phi2)*x2"), config)
        rotated = minimize(
            planar_problem(
                "(x1^2 + x2^2)/2 - (0.18*cos(phi1) - 0.16*sin(phi2))*x1 - (0.24*cos(phi1) + 0.12*sin(phi2))*x2"
            ),
            config,
        )
        assert plain.converged and rotated.converged
        assert np.allclose(rotated.u.coeffs, plain.u.coeffs @ R.T, atol=1e-8)
        assert rotated.J == pytest.approx(plain.J, abs=1e-12)

    def test_sphere_problem_converges(self, sphere_problem):
        """Curved metric and a small forcing"""
        report = minimize(sphere_problem, GalerkinConfig(N=3, P=8))
        assert report.converged
        assert report.containment_margin > 0.0


class TestConnectingFamily:
    """Test suite for J along pointwise connecting paths"""

    def test_endpoints_and_convexity(self, flat_problem, flat_exact):
        """Profile matches J at the ends and lies below the chord"""
        grid = TorusGrid(2, 4)
        u1 = resize(flat_exact, 1)
        u2 = u1 + FourierField.from_modes({(0, 0): [0.1, -0.05], (1, 1): [0.02j, 0.01]}, m=2, N=1, k=2)
        profile = connecting_profile(flat_problem, u1, u2, [0.0, 0.5, 1.0], grid)
        assert profile[0] == pytest.approx(functional_J(flat_problem, u1, grid), abs=1e-8)
        assert profile[2] == pytest.approx(functional_J(flat_problem, u2, grid), abs=1e-8)
        assert profile[1] <= 0.5 * (profile[0] + profile[2]) + 1e-9
