"""
Shared fixtures: the bundled problems and the solved flat benchmark
"""

import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(ROOT)

from core.geometry import ChartManifold, ScalarField
from core.problem import DomainSpec, ProblemSpec
from core.torusfield import FourierField, FrequencyVector
from problems.loader import load_problem
from solver.engine import GalerkinConfig, minimize

PROBLEMS = os.path.join(ROOT, "problems")
OMEGA = FrequencyVector((1.0, np.sqrt(2.0)))


def problem_path(name: str) -> str:
    return os.path.join(PROBLEMS, f"{name}.qp")


def make_problem(metric_rows, W: str, V: str, level: float, box, name: str = "test") -> ProblemSpec:
    m = len(metric_rows)
    manifold = ChartManifold.from_strings(metric_rows, box)
    return ProblemSpec(
        k=2,
        m=m,
        omega=OMEGA,
        manifold=manifold,
        W=ScalarField.parse(W, m, 2),
        domain=DomainSpec(ScalarField.parse(V, m), level),
        labels={"name": name},
    )


@pytest.fixture(scope="session")
def flat_problem():
    return load_problem(problem_path("linear_flat"))


@pytest.fixture(scope="session")
def sphere_problem():
    return load_problem(problem_path("sphere_pole"))


@pytest.fixture(scope="session")
def disk_problem():
    return load_problem(problem_path("poincare_disk"))


@pytest.fixture(scope="session")
def concave_problem():
    return load_problem(problem_path("concave_fail"))


@pytest.fixture(scope="session")
def flat_exact(flat_problem) -> FourierField:
    """x1 = 0.15 cos t, x2 = (0.2/3) sin(sqrt(2) t)"""
    return flat_problem.reference


@pytest.fixture(scope="session")
def flat_config() -> GalerkinConfig:
    return GalerkinConfig(N=4, P=16)


@pytest.fixture(scope="session")
def flat_solution(flat_problem, flat_config):
    return minimize(flat_problem, flat_config)
