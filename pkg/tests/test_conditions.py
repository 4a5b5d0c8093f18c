"""
Unit tests for the sampling verifier of the hypotheses on V and W
"""

import pytest
import numpy as np
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.conditions import (
    Verdict,
    alpha2_margin,
    check_all,
    check_C1,
    check_C2,
    check_theorem1,
    lambda_V,
    max_sectional_field,
    mu_V,
    sample_domain,
)
from core.errors import DomainViolationError
from core.geometry import ChartManifold, ScalarField, gradient
from core.problem import DomainSpec, ProblemSpec
from core.torusfield import FrequencyVector
from conftest import make_problem

IDENTITY = [["1", "0"], ["0", "1"]]
FLAT_W = "(x1^2 + x2^2)/2 - 0.3*cos(phi1)*x1 - 0.2*sin(phi2)*x2"
SPHERE = [["4/(1 + x1^2 + x2^2)^2", "0"], ["0", "4/(1 + x1^2 + x2^2)^2"]]
DISK = [["4/(1 - x1^2 - x2^2)^2", "0"], ["0", "4/(1 - x1^2 - x2^2)^2"]]
SPHERE_W = "(x1^2 + x2^2)/2 - 0.03*cos(phi1)*x1 - 0.02*sin(phi2)*x2"


def flat_variant(W=FLAT_W, V="(x1^2 + x2^2)/2", level=0.5, box=((-2, 2), (-2, 2))) -> ProblemSpec:
    return ProblemSpec(
        k=2,
        m=2,
        omega=FrequencyVector((1.0, np.sqrt(2.0))),
        manifold=ChartManifold.from_strings(IDENTITY, np.array(box, dtype=float)),
        W=ScalarField.parse(W, 2, 2),
        domain=DomainSpec(ScalarField.parse(V, 2), level, resolution=32),
        labels={"name": "variant"},
    )


class TestVerdict:
    """Test suite for verdict aggregation"""

    def test_worst(self):
        """fail > inconclusive > pass"""
        assert Verdict.worst([Verdict.PASS, Verdict.INCONCLUSIVE]) == Verdict.INCONCLUSIVE
        assert Verdict.worst([Verdict.INCONCLUSIVE, Verdict.FAIL, Verdict.PASS]) == Verdict.FAIL
        assert Verdict.worst([]) == Verdict.PASS


class TestSampling:
    """Test suite for sample_domain"""

    def test_unit_disk(self, flat_problem):
        """Interior samples lie in the disk, boundary samples on the circle"""
        sample = sample_domain(flat_problem)
        assert sample.resolution == 48
        assert np.all(np.sum(sample.interior**2, axis=1) < 1.0)
        radii = np.linalg.norm(sample.boundary, axis=1)
        assert sample.boundary.shape[0] > 50
        assert np.max(np.abs(radii - 1.0)) <= 1e-3
        assert not sample.touches_box
        assert sample.components == 1

    def test_empty_sublevel_set(self):
        """A level below min V leaves nothing to sample"""
        with pytest.raises(DomainViolationError):
            sample_domain(flat_variant(level=-1.0))

    def test_box_too_small(self):
        """The disk does not fit in [-0.9, 0.9]^2"""
        sample = sample_domain(flat_variant(box=((-0.9, 0.9), (-0.9, 0.9))))
        assert sample.touches_box


class TestConditionsOnFlatProblem:
    """Test suite for C1, C2, the Theorem-1 inequalities and alpha2 on the flat benchmark"""

    @pytest.fixture(scope="class")
    def report(self, flat_problem):
        np.random.seed(42)
        return check_all(flat_problem, seed=42)

    def test_all_pass(self, report):
        """Every fragment passes"""
        assert report.verdict == Verdict.PASS
        for frag in report.fragments.values():
            assert frag.verdict == Verdict.PASS, frag.name

    def test_C1_margin(self, report):
        """2 + |x|^2 is smallest at the origin"""
        frag = report.fragments["C1"]
        assert frag.margin == pytest.approx(2.0, abs=1e-6)
        assert np.allclose(frag.argmin, [0.0, 0.0], atol=1e-3)
        assert frag.parts["min_boundary_gradient"] == pytest.approx(1.0, abs=1e-3)

    def test_C2_margin(self, report):
        """mu_V = 1 - |x|^2/2 is smallest on the unit circle"""
        frag = report.fragments["C2"]
        assert frag.margin == pytest.approx(0.5, abs=1e-4)
        assert frag.parts["boundary_hessian"] == pytest.approx(1.0, abs=1e-9)

    def test_theorem1_margins(self, report):
        """Boundary pairing 1 - (b, x) bottoms out near 1 - |b|"""
        frag = report.fragments["theorem1"]
        assert 0.63 <= frag.parts["boundary_margin"] <= 0.65
        assert frag.parts["interior_margin"] > 0.8
        assert frag.margin == pytest.approx(frag.parts["boundary_margin"])

    def test_alpha2(self, report):
        """3/4 - sqrt(5/16) at the boundary"""
        assert 0.185 <= report.fragments["C2"].parts["alpha2"] <= 0.2

    def test_C3_connects_pairs(self, report):
        """Connecting paths exist with small defects"""
        frag = report.fragments["C3"]
        assert frag.parts["failures"] == []
        assert frag.margin > 0.0

    def test_report_serializes(self, report):
        """to_dict is plain data"""
        doc = report.to_dict()
        assert doc["verdict"] == "pass"
        assert set(doc["fragments"]) == {"C1", "C2", "C3", "theorem1"}
        assert doc["note"] == "checked on chart domain only"


class TestFailures:
    """Test suite for failing and inconclusive hypotheses"""

    def test_concave_W_fails_theorem1(self, concave_problem):
        """Hess W = -I makes the interior inequality negative"""
        frag = check_theorem1(concave_problem, sample_domain(concave_problem, 24))
        assert frag.verdict == Verdict.FAIL
        assert frag.margin < 0.0

    def test_chart_too_small_is_inconclusive(self):
        """Sublevel set touching the box cannot pass"""
        problem = flat_variant(box=((-0.9, 0.9), (-0.9, 0.9)))
        sample = sample_domain(problem)
        assert check_C1(problem, sample).verdict == Verdict.INCONCLUSIVE
        assert check_C2(problem, sample).verdict == Verdict.INCONCLUSIVE

    def test_nonconvex_V_fails_C1(self):
        """V = x1^4 - x1^2 + x2^2 has 2 lambda + |grad V|^2 = -4 at the origin"""
        problem = flat_variant(V="x1^4 - x1^2 + x2^2", level=0.5)
        frag = check_C1(problem)
        assert frag.verdict == Verdict.FAIL
        assert frag.margin < 0.0


class TestCurvatureQuantities:
    """Test suite for pointwise quantities on the sphere problem"""

    def test_max_sectional_is_one(self, sphere_problem):
        """K* = 1 on the stereographic chart"""
        pts = np.array([[0.0, 0.0], [0.05, -0.03], [0.08, 0.01]])
        assert np.allclose(max_sectional_field(sphere_problem.manifold, pts), 1.0, atol=1e-10)

    def test_mu_at_pole(self, sphere_problem):
        """Hess V = 20 I in coordinates, g = 4 I at the pole"""
        mu = mu_V(sphere_problem.manifold, sphere_problem.domain.V, np.array([[0.0, 0.0]]))
        assert mu[0] == pytest.approx(5.0, abs=1e-12)

    def test_sphere_C2_passes(self, sphere_problem):
        """mu_V dominates 2 K* on the small cap"""
        frag = check_C2(sphere_problem)
        assert frag.verdict == Verdict.PASS
        assert frag.margin > 0.0

    def test_alpha2_positive_on_sphere(self, sphere_problem):
        """The cap around the pole is strongly convex for V"""
        alpha2, where = alpha2_margin(sphere_problem)
        assert alpha2 > 0.0
        assert len(where) == 2

    def test_sphere_with_flat_V_fails_C2(self):
        """V = |x|^2/2 on the sphere chart: mu_V = (1 - r^2)(1 + r^2)/4 cannot dominate 2 K* = 2"""
        problem = make_problem(SPHERE, SPHERE_W, "(x1^2 + x2^2)/2", 0.125, [[-1, 1], [-1, 1]], name="sphere_flat_V")
        frag = check_C2(problem)
        assert frag.verdict == Verdict.FAIL
        assert frag.margin == pytest.approx(0.75 * 1.25 / 4.0 - 2.0, abs=1e-3)

    def test_lambda_mu_bounds(self):
        """mu_V <= lambda_V <= mu_V + |grad V|_g^2 / 2 at random points"""
        M = ChartManifold.from_strings(DISK, [[-0.9, 0.9], [-0.9, 0.9]])
        V = ScalarField.parse("x1^2 + 2*x2^2 + x1*x2", 2)
        pts = np.random.default_rng(42).uniform(-0.5, 0.5, size=(50, 2))
        lam, mu = lambda_V(M, V, pts), mu_V(M, V, pts)
        grad = gradient(M, V, pts)
        norm_sq = np.einsum("ni,nij,nj->n", grad, M.metric_at(pts), grad)
        assert np.all(mu <= lam + 1e-12)
        assert np.all(lam <= mu + 0.5 * norm_sq + 1e-12)

    def test_mu_is_coordinate_free(self):
        """mu_V is unchanged by the linear substitution x = L y"""
        M = ChartManifold.from_strings(SPHERE, [[-1, 1], [-1, 1]])
        V = ScalarField.parse("x1^2 + 2*x2^2 + x1*x2", 2)
        L = np.array([[1.0, 0.5], [0.0, 2.0]])
        s = "4/(1 + (x1 + 0.5*x2)^2 + (2*x2)^2)^2"
        # L^T L = [[1, 0.5], [0.5, 4.25]]
        pulled = ChartManifold.from_strings([[s, f"0.5*{s}"], [f"0.5*{s}", f"4.25*{s}"]], [[-1, 1], [-1, 1]])
        V_pulled = ScalarField.parse("(x1 + 0.5*x2)^2 + 2*(2*x2)^2 + (x1 + 0.5*x2)*(2*x2)", 2)
        y = np.random.default_rng(7).uniform(-0.2, 0.2, size=(20, 2))
        assert np.allclose(mu_V(pulled, V_pulled, y), mu_V(M, V, y @ L.T), atol=1e-10)
