import math

import numpy as np
import pytest

from wiener_minimax.csnr import RunningCostFn, case1_residual, solve
from wiener_minimax.minimax import (
    BracketError,
    DerivativeEstimate,
    NoSignChangeError,
    dJ_dpsi,
    find_lfd,
    verify_saddle,
)
from wiener_minimax.rules import ConstantBand
from wiener_minimax.simulate import MCSettings, RngSpec

MC = MCSettings(n_paths=10000, n_batches=20, dt=1e-3, horizon=30.0)


def exact_estimator(fn):
    """Derivative estimator with no noise, built from a closed-form bracket function."""

    def est(phi):
        b = float(fn(phi))
        return DerivativeEstimate(phi, b / (1 + phi) ** 2, 0.0, 0, 0.0, b, 0.0, b)

    return est


class TestRootSearch:
    def test_closed_form_bracket(self, const_model, csnr_unit):
        res = find_lfd(const_model, 0.0, csnr_unit, tol=1e-6,
                       estimator=exact_estimator(lambda p: case1_residual(csnr_unit, p)))
        assert len(res.roots) == 1
        assert res.phi0 == pytest.approx(csnr_unit.phi0, abs=1e-6)
        lo, hi = res.endpoint_checks
        assert lo.bracket == pytest.approx(1.0, abs=1e-5)
        assert hi.bracket == pytest.approx(-1.0, abs=1e-5)

    def test_asymmetric_cost(self, const_model):
        sol = solve(1.0, RunningCostFn.from_expression("x"))
        res = find_lfd(const_model, 0.0, sol, tol=1e-8,
                       estimator=exact_estimator(lambda p: case1_residual(sol, p)))
        assert res.phi0 == pytest.approx(sol.phi0, rel=1e-7)

    def test_several_roots(self, const_model):
        band = ConstantBand(0.5, 2.0)
        roots = [0.7, 1.0, 1.4]
        fn = lambda p: -np.prod([p - r for r in roots])
        res = find_lfd(const_model, 0.0, band, tol=1e-6, n_scan=33, estimator=exact_estimator(fn))
        np.testing.assert_allclose([r.phi0 for r in res.roots], roots, atol=1e-5)
        assert all(abs(r.residual) < 1e-9 for r in res.roots)

    def test_no_sign_change(self, const_model):
        with pytest.raises(NoSignChangeError) as info:
            find_lfd(const_model, 0.0, ConstantBand(0.5, 2.0),
                     estimator=exact_estimator(lambda p: 1.0))
        assert len(info.value.scan) == 17

    def test_bracket_override(self, const_model, csnr_unit):
        est = exact_estimator(lambda p: case1_residual(csnr_unit, p))
        with pytest.raises(BracketError):
            find_lfd(const_model, 0.0, csnr_unit, bracket=(0.5, 1.0), estimator=est)
        res = find_lfd(const_model, 0.0, csnr_unit, bracket=(0.95, 1.05), estimator=est)
        assert res.bracket == (0.95, 1.05)

    def test_dJ_outside_bracket(self, const_model, csnr_unit):
        with pytest.raises(BracketError):
            dJ_dpsi(const_model, 0.0, 2.0, csnr_unit, MC)


class TestMonteCarlo:
    @pytest.mark.parametrize("phi", [0.9, 1.0, 1.1])
    def test_derivative_matches_closed_form(self, const_model, csnr_unit, phi):
        d = dJ_dpsi(const_model, 0.0, phi, csnr_unit, MC, RngSpec(1))
        exact = case1_residual(csnr_unit, phi)
        assert abs(d.bracket - exact) <= 4 * d.bracket_stderr + 5e-3
        assert d.value == pytest.approx(d.bracket / (1 + phi) ** 2)
        assert d.mass_at_one == 0.0

    def test_endpoint_values(self, const_model, csnr_unit):
        lo = dJ_dpsi(const_model, 0.0, csnr_unit.l0 * (1 + 1e-6), csnr_unit, MC, RngSpec(2))
        hi = dJ_dpsi(const_model, 0.0, csnr_unit.l1 * (1 - 1e-6), csnr_unit, MC, RngSpec(2))
        assert lo.bracket == pytest.approx(1.0, abs=1e-2)
        assert hi.bracket == pytest.approx(-1.0, abs=1e-2)

    def test_saddle_at_lfd(self, const_model, csnr_unit):
        rep = verify_saddle(const_model, 0.0, csnr_unit.phi0, csnr_unit,
                            [0.25, 0.5, 0.8, 1.25, 2.0, 4.0], MC, RngSpec(3))
        assert rep.passed
        assert rep.to_dict()["passed"]

    def test_saddle_fails_off_lfd(self, const_model):
        # a wide band started far from its balancing prior: larger priors are worse
        band = ConstantBand(0.3, 3.0)
        rep = verify_saddle(const_model, 0.0, 0.35, band, [0.5, 1.0, 2.0], MC, RngSpec(4),
                            delta=None)
        assert not rep.passed
        assert rep.violations
