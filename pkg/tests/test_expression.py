import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wiener_minimax.expression import ExpressionError, compile_expression


class TestGrammar:
    @pytest.mark.parametrize(
        "text, x, expected",
        [
            ("1 + 2*x", 3.0, 7.0),
            ("x^2", 3.0, 9.0),
            ("2^3^2", 0.0, 512.0),  # right associative
            ("-x^2", 2.0, -4.0),
            ("log(e)", 0.0, 1.0),
            ("exp(0) + sqrt(4) + abs(-3)", 0.0, 6.0),
            ("pow(x, 3)", 2.0, 8.0),
            ("pi", 0.0, math.pi),
            ("(x - 1)/(x + 1)", 3.0, 0.5),
        ],
    )
    def test_values(self, text, x, expected):
        assert compile_expression(text)(x) == pytest.approx(expected, rel=1e-15)

    def test_scalar_returns_float(self):
        assert isinstance(compile_expression("x + 1")(1.0), float)

    def test_vectorized(self):
        fn = compile_expression("x*x")
        np.testing.assert_array_equal(fn(np.array([1.0, 2.0, 3.0])), [1.0, 4.0, 9.0])

    @pytest.mark.parametrize(
        "text",
        ["import os", "__import__('os')", "y + 1", "x.real", "sin(x)", "x if x else 1",
         "log(x, 2)", "[x]", "lambda: 1", "", "1 +"],
    )
    def test_rejects(self, text):
        with pytest.raises(ExpressionError):
            compile_expression(text)


class TestProperties:
    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_linear_matches_python(self, a, x):
        fn = compile_expression(f"({a!r})*x + 1")
        assert fn(x) == pytest.approx(a * x + 1, rel=1e-12, abs=1e-12)

    @given(st.floats(1e-3, 1e3))
    def test_log_exp_roundtrip(self, x):
        assert compile_expression("exp(log(x))")(x) == pytest.approx(x, rel=1e-12)
