"""
Unit tests for the expression language and forward-mode differentiation
"""

import pytest
import numpy as np
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.autodiff import eval_with_derivatives
from core.errors import ArityError, ExpressionDomainError, ExpressionSyntaxError, UnknownIdentifierError
from core.expression import Binary, Const, Pow, Unary, Var, format_expression, parse_expression, variables


class TestParser:
    """Test suite for parse_expression and format_expression"""

    def test_half_norm_squared(self):
        """x1^2/2 + x2^2/2 parses to a sum of halved squares"""
        ast = parse_expression("x1^2/2 + x2^2/2", k=0, m=2)
        x1, x2 = Var("x1", "x", 0), Var("x2", "x", 1)
        expected = Binary("+", Binary("/", Pow(x1, 2), Const(2.0)), Binary("/", Pow(x2, 2), Const(2.0)))
        assert ast == expected

    def test_precedence(self):
        """^ binds tighter than unary minus, which binds tighter than * and /"""
        value = lambda text: float(eval_with_derivatives(parse_expression(text, m=1), np.array([3.0]), order=0).value)
        assert value("-x1^2") == -9.0
        assert value("2*x1^2") == 18.0
        assert value("8/2/2") == 2.0
        assert value("1 - 2 - 3") == -4.0
        assert value("x1^-1") == pytest.approx(1.0 / 3.0, abs=1e-15)
        assert value("-(1 + x1)*2") == -8.0

    def test_syntax_error_offset(self):
        """A dangling operator is reported at the end of input"""
        with pytest.raises(ExpressionSyntaxError) as err:
            parse_expression("x1 +", m=1)
        assert err.value.offset == 4

    def test_offsets_are_bytes(self):
        """Offsets count UTF-8 bytes, not characters"""
        with pytest.raises(ExpressionSyntaxError) as err:
            parse_expression("x1 +\u00a0", m=1)
        assert err.value.offset == 6

    def test_unknown_identifiers(self):
        """Undeclared variables and unknown functions are rejected"""
        with pytest.raises(UnknownIdentifierError):
            parse_expression("y1 + 1", k=1, m=1)
        with pytest.raises(UnknownIdentifierError):
            parse_expression("x3", k=0, m=2)
        with pytest.raises(UnknownIdentifierError):
            parse_expression("phi2*x1", k=1, m=1)
        with pytest.raises(UnknownIdentifierError):
            parse_expression("atan(x1)", m=1)

    def test_arity(self):
        """Every function takes exactly one argument"""
        with pytest.raises(ArityError):
            parse_expression("sin(x1, x2)", m=2)
        with pytest.raises(ArityError):
            parse_expression("cos()", m=1)
        with pytest.raises(ArityError):
            parse_expression("exp + 1", m=1)

    def test_non_integer_exponent(self):
        """Exponents must be integer constants"""
        with pytest.raises(ExpressionSyntaxError):
            parse_expression("x1^0.5", m=1)
        with pytest.raises(ExpressionSyntaxError):
            parse_expression("x1^x1", m=1)

    @pytest.mark.parametrize("text", [
        "(x1^2 + x2^2)/2 - 0.3*cos(phi1)*x1 - 0.2*sin(phi2)*x2",
        "4/(1 + x1^2 + x2^2)^2",
        "-sqrt(1 + tanh(x1))*exp(-x2) + log(2 + pi)",
        "1e-3*x1^-2",
    ])
    def test_format_reparses_to_same_tree(self, text):
        """format_expression is a faithful unparse"""
        ast = parse_expression(text, k=2, m=2)
        assert parse_expression(format_expression(ast), k=2, m=2) == ast

    def test_variables(self):
        """variables lists (kind, index) pairs"""
        ast = parse_expression("cos(phi2)*x1 + x1", k=2, m=1)
        assert variables(ast) == {("phi", 1), ("x", 0)}

    def test_pi_constant(self):
        """pi is a named constant"""
        assert parse_expression("pi") == Const(np.pi)
        assert isinstance(parse_expression("-pi"), Unary)


class TestAutodiff:
    """Test suite for eval_with_derivatives"""

    EXPRESSIONS = [
        "sin(x1)*exp(x2)",
        "tanh(x1*x2) - x2^3",
        "sqrt(1 + x1^2)/(2 + cos(x2))",
        "log(3 + x1 - x2)*x1^-1",
        "4/(1 + x1^2 + x2^2)^2",
    ]

    def test_quadratic(self):
        """Value, gradient and Hessian of |x|^2/2"""
        d = eval_with_derivatives(parse_expression("x1^2/2 + x2^2/2", m=2), np.array([0.3, 0.4]))
        assert d.value == pytest.approx(0.125, abs=1e-15)
        assert np.allclose(d.gradient, [0.3, 0.4], atol=1e-15)
        assert np.allclose(d.hessian, np.eye(2), atol=1e-15)

    def test_phi_parameter(self):
        """phi enters as a parameter"""
        d = eval_with_derivatives(parse_expression("0.3*cos(phi1)", k=1, m=1), np.array([0.0]), np.array([0.0]))
        assert d.value == pytest.approx(0.3, abs=1e-15)
        assert np.allclose(d.gradient, 0.0)

    def test_phi_required(self):
        """Expressions in phi need angles"""
        with pytest.raises(ValueError):
            eval_with_derivatives(parse_expression("cos(phi1)*x1", k=1, m=1), np.array([1.0]))

    def test_mixed_derivative_along_omega(self):
        """d/dt of the x-gradient of cos(phi1)*x1 along phi + t*omega"""
        ast = parse_expression("cos(phi1)*x1", k=2, m=1)
        omega = np.array([1.0, np.sqrt(2.0)])
        at_zero = eval_with_derivatives(ast, np.array([0.5]), np.array([0.0, 0.0]), omega=omega)
        at_quarter = eval_with_derivatives(ast, np.array([0.5]), np.array([np.pi / 2, 0.0]), omega=omega)
        assert at_zero.hessian[0, 1] == pytest.approx(0.0, abs=1e-15)
        assert at_quarter.hessian[0, 1] == pytest.approx(-1.0, abs=1e-15)
        assert at_quarter.gradient[1] == pytest.approx(-0.5, abs=1e-15)

    def test_domain_error_reports_point(self):
        """log of a nonpositive value names the offending point"""
        ast = parse_expression("log(x1)", m=1)
        with pytest.raises(ExpressionDomainError) as err:
            eval_with_derivatives(ast, np.array([[1.0], [-2.0], [3.0]]))
        assert err.value.point["x1"] == -2.0

    def test_batched_shapes(self):
        """Batch dimensions of x and phi broadcast"""
        ast = parse_expression("cos(phi1)*x1*x2", k=1, m=2)
        x = np.random.default_rng(0).normal(size=(5, 3, 2))
        phi = np.zeros((5, 3, 1))
        d = eval_with_derivatives(ast, x, phi)
        assert d.value.shape == (5, 3)
        assert d.gradient.shape == (5, 3, 2)
        assert d.hessian.shape == (5, 3, 2, 2)

    @pytest.mark.parametrize("text", EXPRESSIONS)
    def test_against_central_differences(self, text):
        """Gradient and Hessian agree with central differences at step 1e-5"""
        ast = parse_expression(text, m=2)
        rng = np.random.default_rng(42)
        h = 1e-5
        for x in rng.uniform(0.2, 0.8, size=(5, 2)):
            d = eval_with_derivatives(ast, x)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                fp = eval_with_derivatives(ast, x + e)
                fm = eval_with_derivatives(ast, x - e)
                fd_grad = (fp.value - fm.value) / (2 * h)
                fd_hess = (fp.gradient - fm.gradient) / (2 * h)
                assert abs(fd_grad - d.gradient[j]) <= 1e-7 * max(1.0, abs(d.gradient[j]))
                assert np.all(np.abs(fd_hess - d.hessian[j]) <= 1e-7 * np.maximum(1.0, np.abs(d.hessian[j])))

    def test_hessian_symmetry(self):
        """Hessians are symmetric to rounding"""
        rng = np.random.default_rng(7)
        for text in self.EXPRESSIONS:
            d = eval_with_derivatives(parse_expression(text, m=2), rng.uniform(0.2, 0.8, size=(20, 2)))
            asym = np.abs(d.hessian - np.swapaxes(d.hessian, -1, -2))
            assert np.all(asym <= 1e-14 * np.maximum(1.0, np.abs(d.hessian)))
