import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wiener_minimax.model import (
    CoefficientFn,
    DiffusionModel,
    ModelError,
    builtin_bessel,
    builtin_power,
    check_assumptions,
    constant_model,
    default_grid,
    K_fn,
    model_from_dict,
    snr,
)


def bessel_K(d0, d1):
    # drift (d-1)/(2x), unit volatility: K = (d0 - 2)/(d1 - d0), constant in x
    return (d0 - 2.0) / (d1 - d0)


class TestCoefficients:
    def test_rho_constant(self):
        m = constant_model(0.5, 2.0, 3.0)
        assert snr(m, 1.0) == pytest.approx(0.5)
        assert m.rho2(np.array([0.0, 5.0])) == pytest.approx([0.25, 0.25])

    def test_rho_bessel(self):
        m = builtin_bessel(3, 4)
        x = np.array([0.5, 1.0, 2.0])
        np.testing.assert_allclose(snr(m, x), 0.5 / x, rtol=1e-15)

    def test_snr_rejects_outside_domain(self):
        with pytest.raises(ModelError):
            snr(builtin_bessel(3, 4), -1.0)

    @pytest.mark.parametrize("d0, d1", [(3, 4), (0.5, 1.5), (2, 5), (1.5, 2.5)])
    def test_K_bessel_closed_form(self, d0, d1):
        m = builtin_bessel(d0, d1)
        x = np.array([0.1, 1.0, 7.0])
        np.testing.assert_allclose(K_fn(m, x), bessel_K(d0, d1), rtol=1e-12, atol=1e-15)

    def test_K_finite_difference_matches_analytic(self):
        m = builtin_bessel(3, 4)
        x = np.geomspace(0.05, 20, 50)
        np.testing.assert_allclose(K_fn(m, x, analytic=False), K_fn(m, x, analytic=True), rtol=1e-6)

    def test_fd_derivative(self):
        c = CoefficientFn.from_expression("x^3")
        assert c.derivative(2.0) == pytest.approx(12.0, rel=1e-8)

    def test_constant_coefficient_shapes(self):
        c = CoefficientFn.constant(2.0)
        assert c(1.0) == 2.0
        assert c(np.zeros(3)).shape == (3,)


class TestValidation:
    def test_empty_domain(self):
        c = CoefficientFn.constant(1.0)
        with pytest.raises(ModelError):
            DiffusionModel((1.0, 1.0), c, c, c)

    def test_bad_cost(self):
        with pytest.raises(ModelError):
            constant_model(cost_rate=0.0)

    def test_equal_drifts(self):
        with pytest.raises(ModelError):
            constant_model(1.0, 1.0)
        with pytest.raises(ModelError):
            builtin_bessel(3, 3)


class TestRegimes:
    def test_bessel_3_4_is_A31(self):
        rep = check_assumptions(builtin_bessel(3, 4))
        assert rep.regime == "A31"
        assert rep.rho2_direction == "decreasing"
        assert rep.ok

    def test_bessel_half_fails(self):
        rep = check_assumptions(builtin_bessel(0.5, 1.5))
        assert rep.regime == "none"
        assert rep.violations
        assert not rep.ok

    def test_constant_snr(self):
        assert check_assumptions(constant_model()).regime == "constant_snr"

    def test_power_is_constant_snr(self):
        # mu_i = eta_i x, sigma = x  ->  rho = eta1 - eta0
        rep = check_assumptions(builtin_power(0.1, 0.6))
        assert rep.regime == "constant_snr"

    def test_A32_custom(self):
        # rho^2 = x^2 increasing on (1, 3), mu0 = 0, sigma = 1, Delta = x:
        # K = -1/2 (1/x)' = 1/(2 x^2) > -1/2  -> A32 fails
        m = model_from_dict({"type": "custom", "domain": [1, 3], "mu0": 0, "mu1": "x", "sigma": 1})
        rep = check_assumptions(m)
        assert rep.rho2_direction == "increasing"
        assert rep.regime == "none"

    def test_A32_holds(self):
        # mu0 = -x^2, Delta = x, sigma = 1: K = -x + 1/(2 x^2) < -1/2 on (2, 5)
        m = model_from_dict({"type": "custom", "domain": [2, 5], "mu0": "-x^2", "mu1": "x - x^2",
                             "sigma": 1})
        assert check_assumptions(m).regime == "A32"

    def test_non_monotone(self):
        m = model_from_dict({"type": "custom", "domain": [-2, 2], "mu0": 0, "mu1": "1 + x^2",
                             "sigma": 1})
        rep = check_assumptions(m)
        assert rep.rho2_direction == "non_monotone"
        assert rep.regime == "none"

    def test_report_serializable(self):
        d = check_assumptions(builtin_bessel(3, 4)).to_dict()
        assert d["regime"] == "A31"
        assert len(d["K_samples"]) == default_grid(builtin_bessel(3, 4)).size


class TestDescriptors:
    @pytest.mark.parametrize(
        "doc",
        [
            {"type": "bessel", "delta0": 3, "delta1": 4},
            {"type": "power", "eta0": 0.1, "eta1": 0.6},
            {"type": "constant", "mu0": 0, "mu1": 2, "sigma": 1.5, "cost_rate": 3},
            {"type": "custom", "domain": [0, None], "mu0": "1/x", "mu1": "1.5/x", "sigma": 1},
        ],
    )
    def test_roundtrip(self, doc):
        m = model_from_dict(doc)
        m2 = model_from_dict(m.to_dict())
        x = default_grid(m, 16)
        np.testing.assert_allclose(m2.rho(x) * np.ones_like(x), m.rho(x) * np.ones_like(x))
        assert m2.cost_rate == m.cost_rate

    @pytest.mark.parametrize("doc", [{}, {"type": "nope"}, {"type": "bessel", "delta0": 3}])
    def test_bad_descriptor(self, doc):
        with pytest.raises(ModelError):
            model_from_dict(doc)


class TestProperties:
    @given(st.floats(0.1, 10), st.floats(0.1, 5), st.floats(0.05, 50))
    @settings(max_examples=50)
    def test_K_bessel_invariant(self, d0, gap, x):
        m = builtin_bessel(d0, d0 + gap)
        assert K_fn(m, x) == pytest.approx(bessel_K(d0, d0 + gap), rel=1e-9, abs=1e-12)

    @given(st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.1, 3))
    @settings(max_examples=50)
    def test_constant_model_always_constant_snr(self, mu0, gap, sigma):
        assert check_assumptions(constant_model(mu0, mu0 + gap, sigma)).regime == "constant_snr"
