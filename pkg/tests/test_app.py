"""
Unit tests for the command-line runner and run artifacts
"""

import json

import pytest
import numpy as np
import pandas as pd
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app import EXIT_ERROR, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_PASS, _verify_verdict, exit_code, main, run, run_settings
from core.conditions import Verdict
from core.errors import ProblemFileError
from core.torusfield import FourierField
from utils import artifacts
from utils.logger import logger

PROBLEMS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "problems")
FLAT = os.path.join(PROBLEMS, "linear_flat.qp")
CONCAVE = os.path.join(PROBLEMS, "concave_fail.qp")


class TestExitCodes:
    """Test suite for verdict aggregation into exit codes"""

    def test_mapping(self):
        """fail -> 2, inconclusive -> 3, pass -> 0"""
        assert exit_code({"a": Verdict.PASS, "b": Verdict.PASS}) == EXIT_PASS
        assert exit_code({"a": Verdict.PASS, "b": Verdict.INCONCLUSIVE}) == EXIT_INCONCLUSIVE
        assert exit_code({"a": Verdict.INCONCLUSIVE, "b": Verdict.FAIL}) == EXIT_FAIL

    def test_verify_verdict(self):
        """Residual and speed thresholds, then the uniqueness probe"""
        section = {"torus_l2": 1e-10, "line_sup": 1e-10, "sup_speed": 0.17, "sup_speed_2T": 0.1705, "uniqueness": None}
        assert _verify_verdict(section, False) == Verdict.PASS
        assert _verify_verdict({**section, "line_sup": 1e-3}, False) == Verdict.FAIL
        assert _verify_verdict({**section, "sup_speed_2T": 0.2}, False) == Verdict.FAIL
        probe = {"max_coeff_distance": 1e-3, "inconclusive": False}
        assert _verify_verdict({**section, "uniqueness": probe}, False) == Verdict.FAIL
        # several solutions are expected when the hypotheses fail
        assert _verify_verdict({**section, "uniqueness": probe}, True) == Verdict.PASS
        probe = {"max_coeff_distance": 0.0, "inconclusive": True}
        assert _verify_verdict({**section, "uniqueness": probe}, False) == Verdict.INCONCLUSIVE

    def test_settings_precedence(self, flat_problem):
        """CLI flag > problem file > environment"""
        settings = run_settings(flat_problem)
        assert settings["trunc"] == 4
        assert settings["cond_resolution"] == 48
        assert run_settings(flat_problem, trunc=6, seed=3)["trunc"] == 6
        assert run_settings(flat_problem, seed=3)["seed"] == 3
        assert "out_dir" not in settings


class TestCommands:
    """Test suite for the check, solve and all subcommands"""

    def test_check_concave_fails(self, tmp_path):
        """Hess W = -I violates the interior inequality"""
        report, code = run("check", CONCAVE, out=str(tmp_path))
        assert code == EXIT_FAIL
        assert report["verdicts"]["conditions"] == "fail"
        assert report["conditions"]["fragments"]["theorem1"]["margin"] < 0.0
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "timings.json").exists()

    def test_solve_is_reproducible(self, tmp_path):
        """Same seed, byte-identical report"""
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["solve", FLAT, "--seed", "7", "--out", str(a)]) == EXIT_PASS
        assert main(["solve", FLAT, "--seed", "7", "--out", str(b)]) == EXIT_PASS
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        doc = json.loads((a / "report.json").read_text(encoding="utf-8"))
        assert doc["seed"] == 7
        assert "timing" not in doc["solve"]
        assert doc["solve"]["reference_error"] <= 1e-8

    def test_all_passes_on_flat(self, tmp_path):
        """Every stage passes on the closed-form benchmark"""
        code = main(["all", FLAT, "--out", str(tmp_path), "--format", "both"])
        assert code == EXIT_PASS
        doc = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
        assert set(doc["verdicts"]) == {"conditions", "solve", "verify", "dichotomy"}
        assert doc["dichotomy"]["stable_dim"] == 2
        assert doc["verify"]["d1"]["d1_T"] <= 1e-12
        frame = pd.read_csv(tmp_path / "line_residual.csv")
        assert list(frame.columns) == ["t", "r1", "r2", "speed"]
        assert (tmp_path / "exponents.csv").exists()
        assert (tmp_path / "conditions.csv").exists()
        assert (tmp_path / "solution.json").exists()

    def test_missing_problem_file(self, tmp_path):
        """Execution errors exit with 1"""
        assert main(["check", str(tmp_path / "absent.qp"), "--out", str(tmp_path)]) == EXIT_ERROR

    def test_unknown_command(self):
        """argparse rejects commands it does not know"""
        with pytest.raises(SystemExit):
            main(["optimize", FLAT])


class TestArtifacts:
    """Test suite for report documents, CSV output and stored solutions"""

    def test_serializable(self):
        """numpy, enums and non-finite floats become JSON builtins"""
        doc = artifacts.make_serializable({
            "a": np.arange(3),
            "b": np.float64(0.5),
            "c": Verdict.INCONCLUSIVE,
            "d": float("inf"),
            "e": (np.int64(2), np.bool_(True)),
        })
        assert doc == {"a": [0, 1, 2], "b": 0.5, "c": "inconclusive", "d": "inf", "e": [2, True]}
        json.dumps(doc)

    def test_documents_are_sorted(self, tmp_path):
        """Keys are written in sorted order"""
        artifacts.put_document("doc.json", {"b": 1, "a": 2}, str(tmp_path))
        text = (tmp_path / "doc.json").read_text(encoding="utf-8")
        assert text.index('"a"') < text.index('"b"')
        assert artifacts.get_document("doc.json", str(tmp_path)) == {"a": 2, "b": 1}
        assert artifacts.get_document("other.json", str(tmp_path)) is None

    def test_csv_precision(self, tmp_path):
        """17 significant digits"""
        artifacts.write_csv("values.csv", pd.DataFrame({"x": [0.1]}), str(tmp_path))
        lines = (tmp_path / "values.csv").read_text(encoding="utf-8").splitlines()
        assert lines == ["x", "0.10000000000000001"]

    def test_stored_solution(self, flat_exact, tmp_path):
        """Solutions are tied to the hash of their problem"""
        artifacts.save_solution(flat_exact, {"converged": True}, "abc", str(tmp_path))
        u = artifacts.load_solution("abc", str(tmp_path))
        assert isinstance(u, FourierField)
        assert np.array_equal(u.coeffs, flat_exact.coeffs)
        with pytest.raises(ProblemFileError):
            artifacts.load_solution("def", str(tmp_path))
        assert artifacts.load_solution("abc", str(tmp_path / "empty")) is None


class TestLogger:
    """Test suite for structured log context"""

    def test_context_is_plain_data(self):
        """numpy values and verdicts are converted for the JSON formatter"""
        extra = logger._extra("solver", {"beta": np.float64(0.5), "verdict": Verdict.FAIL, "x": np.zeros(2)})
        assert extra == {"qp_module": "solver", "context": {"beta": 0.5, "verdict": "fail", "x": [0.0, 0.0]}}

    def test_nested_stage_record(self):
        """A stage record carrying its own message key is logged under one field"""
        stage = {"beta": 0.1, "iterations": 3, "message": "gradient tolerance reached"}
        logger.debug("Barrier stage done", module="solver", stage=stage)
        logger.warning("Uniqueness run did not converge", module="verify", reason=stage["message"])
