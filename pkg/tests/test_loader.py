"""
Unit tests for problem files: validation, canonical serialization and hashing
"""

import copy
import json

import pytest
import numpy as np
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.errors import ProblemFileError
from problems.loader import load_problem, parse_problem, problem_hash, save_problem, serialize_problem

PROBLEMS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "problems")


@pytest.fixture
def flat_doc():
    with open(os.path.join(PROBLEMS, "linear_flat.qp"), encoding="utf-8") as f:
        return json.load(f)


class TestLoad:
    """Test suite for the bundled problem files"""

    def test_flat_problem(self, flat_problem):
        """Dimensions, frequencies, overrides and the reference field"""
        assert (flat_problem.k, flat_problem.m) == (2, 2)
        assert np.allclose(flat_problem.omega.as_array(), [1.0, np.sqrt(2.0)])
        assert flat_problem.overrides == {"trunc": 4, "grid": 16, "cond_resolution": 48}
        assert flat_problem.domain.resolution == 48
        assert flat_problem.domain.level == 0.5
        assert np.allclose(flat_problem.reference.coefficient((1, 0)), [0.075, 0.0])
        assert flat_problem.name == "linear_flat"

    @pytest.mark.parametrize("name", ["linear_flat", "concave_fail", "sphere_pole", "poincare_disk"])
    def test_bundled_files_load(self, name):
        """Every shipped problem parses"""
        problem = load_problem(os.path.join(PROBLEMS, f"{name}.qp"))
        assert problem.name == name
        assert problem.W.depends_on_phi

    def test_resonant_frequencies_only_warn(self, flat_doc):
        """omega = (1, 2) is accepted and flagged"""
        flat_doc["omega"] = [1, 2]
        problem = parse_problem(flat_doc)
        assert (2, -1) in problem.omega.small_divisors()


class TestCanonicalForm:
    """Test suite for serialize_problem and problem_hash"""

    def test_reparse_keeps_hash(self, flat_problem):
        """Canonical text parses back to the same problem"""
        again = parse_problem(serialize_problem(flat_problem))
        assert problem_hash(again) == problem_hash(flat_problem)
        assert serialize_problem(again) == serialize_problem(flat_problem)

    def test_save_and_load(self, flat_problem, tmp_path):
        """Files written by save_problem load unchanged"""
        path = tmp_path / "copy.qp"
        save_problem(flat_problem, path)
        assert problem_hash(load_problem(path)) == problem_hash(flat_problem)

    def test_hash_is_stable(self, flat_doc):
        """Same document, same hash; a changed W changes it"""
        h1 = problem_hash(parse_problem(flat_doc))
        h2 = problem_hash(parse_problem(copy.deepcopy(flat_doc)))
        assert h1 == h2
        assert len(h1) == 64
        flat_doc["W"] = "(x1^2 + x2^2)/2 - 0.3*cos(phi1)*x1"
        assert problem_hash(parse_problem(flat_doc)) != h1

    def test_whitespace_does_not_matter(self, flat_doc):
        """Expressions are hashed in canonical form"""
        h1 = problem_hash(parse_problem(flat_doc))
        flat_doc["W"] = "(x1^2+x2^2)/2   - 0.3*cos(phi1)*x1 - 0.2*sin(phi2)*x2"
        assert problem_hash(parse_problem(flat_doc)) == h1


class TestValidation:
    """Test suite for malformed problem documents"""

    def test_missing_section(self, flat_doc):
        """Required sections are named in the error"""
        del flat_doc["W"]
        with pytest.raises(ProblemFileError, match="missing section 'W'"):
            parse_problem(flat_doc)

    def test_invalid_json(self, tmp_path):
        """Decode errors carry line and column"""
        path = tmp_path / "broken.qp"
        path.write_text('{\n  "name": ,\n}\n', encoding="utf-8")
        with pytest.raises(ProblemFileError, match="line 2 column"):
            load_problem(path)

    def test_missing_file(self, tmp_path):
        """Unreadable paths are problem-file errors"""
        with pytest.raises(ProblemFileError, match="cannot read"):
            load_problem(tmp_path / "absent.qp")

    def test_unknown_setting(self, flat_doc):
        """Only known configuration keys may be overridden"""
        flat_doc["config"]["lerning_rate"] = 0.1
        with pytest.raises(ProblemFileError, match="unknown setting 'lerning_rate'"):
            parse_problem(flat_doc)

    def test_non_numeric_setting(self, flat_doc):
        """Booleans are not numbers here"""
        flat_doc["config"]["trunc"] = True
        with pytest.raises(ProblemFileError, match="config.trunc"):
            parse_problem(flat_doc)

    def test_bad_expression(self, flat_doc):
        """Parse errors are prefixed with the field they came from"""
        flat_doc["W"] = "x1 +"
        with pytest.raises(ProblemFileError, match="^W:"):
            parse_problem(flat_doc)

    def test_V_cannot_use_angles(self, flat_doc):
        """The auxiliary function lives on the chart only"""
        flat_doc["auxiliary"]["V"] = "x1^2 + phi1"
        with pytest.raises(ProblemFileError, match="auxiliary.V"):
            parse_problem(flat_doc)

    def test_asymmetric_metric(self, flat_doc):
        """g12 and g21 must agree"""
        flat_doc["metric"] = [["1", "x1/10"], ["0", "1"]]
        with pytest.raises(ProblemFileError, match="differ"):
            parse_problem(flat_doc)

    def test_symmetric_metric_written_differently(self, flat_doc):
        """Numerically equal off-diagonal entries are accepted"""
        flat_doc["metric"] = [["1", "x1*x2/10"], ["x2*x1/10", "1"]]
        problem = parse_problem(flat_doc)
        assert np.allclose(problem.manifold.metric_at(np.array([0.5, 0.4])), [[1.0, 0.02], [0.02, 1.0]])

    def test_wrong_omega_length(self, flat_doc):
        """k entries are required"""
        flat_doc["omega"] = [1, "sqrt(2)", "sqrt(3)"]
        with pytest.raises(ProblemFileError, match="omega"):
            parse_problem(flat_doc)

    def test_zero_frequency(self, flat_doc):
        """Frequencies must be nonzero"""
        flat_doc["omega"] = [1, 0]
        with pytest.raises(ProblemFileError, match="omega"):
            parse_problem(flat_doc)

    def test_metric_shape(self, flat_doc):
        """An m x m array of strings"""
        flat_doc["metric"] = [["1", "0"]]
        with pytest.raises(ProblemFileError, match="metric"):
            parse_problem(flat_doc)

    def test_reference_dimensions(self, flat_doc):
        """The reference must match (m, k)"""
        flat_doc["reference"]["m"] = 3
        flat_doc["reference"]["modes"] = []
        with pytest.raises(ProblemFileError):
            parse_problem(flat_doc)
