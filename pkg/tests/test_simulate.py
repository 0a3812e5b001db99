import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from wiener_minimax.decision import Decision, decision_of, decisions_of
from wiener_minimax.model import builtin_bessel, constant_model
from wiener_minimax.rules import ConstantBand, ImmediateRule
from wiener_minimax.simulate import (
    MCSettings,
    RngSpec,
    batch_mean_se,
    default_horizon,
    gamma_T,
    gamma_T_closed,
    h_exact,
    run_until_exit,
    sample_sup_log_phi_hat,
    simulate_exits,
    simulate_joint,
    simulate_terminal,
    simulate_time_changed,
    simulate_under_pinf,
    time_change_grid,
    time_change_inverse,
)


def exit_oracle(l0, l1, phi, rho2):
    """Upper-exit probability and mean exit time of phi*L from (l0, l1) under the null.

    phi*L is a martingale, so P(upper) = (phi - l0)/(l1 - l0); Wald's identity
    for log L (drift -rho^2/2) gives E[tau] = -2 E[log L_tau] / rho^2.
    """
    p = (phi - l0) / (l1 - l0)
    mean_logL = p * math.log(l1 / phi) + (1 - p) * math.log(l0 / phi)
    return p, -2.0 * mean_logL / rho2


class TestRng:
    def test_reproducible(self):
        a = RngSpec(3, 1).generator(0, 0).standard_normal(5)
        b = RngSpec(3, 1).generator(0, 0).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = RngSpec(3, 1).generator().standard_normal(5)
        b = RngSpec(3, 2).generator().standard_normal(5)
        assert not np.allclose(a, b)

    @pytest.mark.parametrize("seed", [-1, 2**64, 1.5])
    def test_invalid_seed(self, seed):
        with pytest.raises(ValueError):
            RngSpec(seed)

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            MCSettings(n_paths=10, n_batches=20)
        with pytest.raises(ValueError):
            MCSettings(dt=0.0)


class TestSinglePath:
    def test_constant_model_exact_logL(self):
        m = constant_model(0.0, 2.0, 1.0)
        dt, T = 0.01, 1.0
        dB = np.sqrt(dt) * np.random.default_rng(0).standard_normal(100)
        p = simulate_joint(m, 0.0, dt, T, increments=dB)
        W = np.concatenate([[0.0], np.cumsum(dB)])
        np.testing.assert_allclose(p.X, W, atol=1e-13)
        np.testing.assert_allclose(p.logL, 2.0 * W - 0.5 * 4.0 * p.times, atol=1e-12)
        q = simulate_under_pinf(m, 0.0, dt, T, increments=dB)
        np.testing.assert_allclose(q.X, W + 2.0 * q.times, atol=1e-12)
        np.testing.assert_allclose(q.logL, 2.0 * W + 0.5 * 4.0 * q.times, atol=1e-12)

    def test_domain_exit_truncates(self):
        m = builtin_bessel(3, 4)
        dB = np.full(100, -0.5)
        p = simulate_joint(m, 1.0, 0.01, 1.0, increments=dB)
        assert p.exit_index is not None
        assert p.X.size == p.exit_index + 1
        assert np.all(m.contains(p.X))

    def test_wrong_increment_shape(self):
        with pytest.raises(ValueError):
            simulate_joint(constant_model(), 0.0, 0.1, 1.0, increments=np.zeros(3))

    def test_time_change_identity_for_unit_snr(self):
        m = constant_model()
        p = simulate_joint(m, 0.0, 0.01, 1.0, RngSpec(1))
        A = time_change_grid(m, p)
        np.testing.assert_allclose(A, p.times, atol=1e-12)
        assert time_change_inverse(A, p.times, 0.5) == pytest.approx(0.5)

    def test_time_changed_logL(self):
        m = builtin_bessel(3, 4)
        dB = np.sqrt(0.01) * np.random.default_rng(1).standard_normal(50)
        p = simulate_time_changed(m, 1.0, 1.0, 0.01, 0.5, increments=dB)
        np.testing.assert_allclose(p.logL[1:], np.cumsum(dB - 0.005)[: p.logL.size - 1], atol=1e-13)
        assert p.clock == "changed"


class TestMartingale:
    @pytest.mark.parametrize("model, x0", [(constant_model(), 0.0), (builtin_bessel(3, 4), 1.0)])
    def test_mean_L_is_one(self, model, x0):
        n = 20000
        _, logL, _ = simulate_terminal(model, x0, 1.0, 1e-2, n, RngSpec(5))
        L = np.exp(logL)
        assert abs(L.mean() - 1.0) <= 4 * L.std(ddof=1) / math.sqrt(n)

    def test_mean_inverse_L_under_pinf(self):
        n = 20000
        _, logL, _ = simulate_terminal(constant_model(), 0.0, 1.0, 1e-2, n, RngSpec(6), "Pinf")
        Li = np.exp(-logL)
        assert abs(Li.mean() - 1.0) <= 4 * Li.std(ddof=1) / math.sqrt(n)


class TestExits:
    @pytest.fixture(scope="class")
    @classmethod
    def sample(cls):
        m = constant_model()
        mc = MCSettings(n_paths=20000, n_batches=20, dt=1e-3, horizon=20.0)
        return simulate_exits(m, 0.0, 0.0, ConstantBand(0.7, 1.5), mc, RngSpec(11))

    def test_exit_probability(self, sample):
        p_exact, _ = exit_oracle(0.7, 1.5, 1.0, 1.0)
        upper = (sample.side == 1).astype(float)
        p, se = batch_mean_se(upper, sample.batch, sample.n_batches)
        assert abs(p - p_exact) <= 4 * se

    def test_mean_exit_time(self, sample):
        _, t_exact = exit_oracle(0.7, 1.5, 1.0, 1.0)
        t, se = batch_mean_se(sample.tau, sample.batch, sample.n_batches)
        assert abs(t - t_exact) <= 4 * se + 2e-3

    def test_exit_on_boundary(self, sample):
        lphi = np.log(sample.L_tau)
        lo = sample.side == 0
        np.testing.assert_allclose(lphi[lo], math.log(0.7), atol=1e-12)
        np.testing.assert_allclose(lphi[~lo], math.log(1.5), atol=1e-12)

    def test_no_horizon_hits(self, sample):
        assert sample.fraction("horizon") == 0.0

    def test_integral_of_L(self, sample):
        # E0[int_0^tau L dt] = E_inf[tau]; for phi*L a martingale this equals
        # E0[tau] minus nothing simple, so check the trapezoid bound instead
        assert np.all(sample.int_L <= sample.tau * 1.5 + 1e-12)
        assert np.all(sample.int_L >= sample.tau * 0.7 - 1e-12)

    def test_common_random_numbers(self):
        m = constant_model()
        mc = MCSettings(n_paths=3000, n_batches=10, dt=1e-3, horizon=20.0)
        a = simulate_exits(m, 0.0, 0.0, ConstantBand(0.7, 1.5), mc, RngSpec(2))
        b = simulate_exits(m, 0.0, 0.0, ConstantBand(0.7, 1.5), mc, RngSpec(2))
        np.testing.assert_array_equal(a.tau, b.tau)
        np.testing.assert_array_equal(a.logL_tau, b.logL_tau)

    def test_outside_band_stops_immediately(self):
        m = constant_model()
        mc = MCSettings(n_paths=100, n_batches=10, dt=1e-3, horizon=1.0)
        s = simulate_exits(m, 0.0, math.log(2.0), ConstantBand(0.7, 1.5), mc, RngSpec())
        assert np.all(s.tau == 0.0) and np.all(s.side == 1)
        s = simulate_exits(m, 0.0, 0.0, ImmediateRule(), mc, RngSpec())
        assert np.all(s.tau == 0.0)

    def test_run_until_exit(self):
        out = run_until_exit(constant_model(), 0.0, 1.0, ConstantBand(0.7, 1.5), 1e-3, 50.0, RngSpec(4))
        assert out.exited_side in ("lower", "upper")
        assert out.phi_tau == pytest.approx(0.7 if out.exited_side == "lower" else 1.5, rel=1e-12)
        assert out.decision == (Decision.NULL if out.exited_side == "lower" else Decision.ALT)
        assert out.cost_integral >= out.tau


class TestSupremum:
    def test_sup_law_is_exponential(self):
        s = sample_sup_log_phi_hat(0.5, 2.0, 1e-2, 20000, RngSpec(8))
        assert stats.kstest(s, "expon").pvalue > 0.01

    def test_truncated_sup_is_smaller(self):
        a = sample_sup_log_phi_hat(1.0, 1.0, 1e-2, 1000, RngSpec(8), truncation_correction=False)
        b = sample_sup_log_phi_hat(1.0, 1.0, 1e-2, 1000, RngSpec(8), truncation_correction=True)
        assert np.all(b >= a)

    def test_h_half(self):
        assert h_exact(0.5) == pytest.approx(0.8465735902799727, rel=1e-15)
        n = 40000
        s = sample_sup_log_phi_hat(0.5, 2.0, 1e-2, n, RngSpec(9))
        v = np.minimum(1.0, 0.5 * np.exp(s))
        assert abs(v.mean() - h_exact(0.5)) <= 4 * v.std(ddof=1) / math.sqrt(n)

    def test_h_values(self):
        np.testing.assert_allclose(h_exact(np.array([0.0, 1.0, 3.0])), [0.0, 1.0, 1.0])

    @pytest.mark.parametrize("T", [0.5, 1.0, 8.0])
    def test_gamma_quadrature_vs_closed_form(self, T):
        phi = np.geomspace(0.05, 20, 25)
        np.testing.assert_allclose(gamma_T(phi, T), gamma_T_closed(phi, T), atol=1e-10)

    def test_gamma_closed_form_vs_mc(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal(400000)
        y = 0.7 * np.exp(-0.5 * 2.0 + math.sqrt(2.0) * z)
        v = h_exact(y)
        assert abs(v.mean() - gamma_T_closed(0.7, 2.0)) <= 4 * v.std() / math.sqrt(z.size)


class TestDecision:
    def test_values(self):
        assert decision_of(0.5) is Decision.NULL
        assert decision_of(2.0) is Decision.ALT
        assert decision_of(1.0) is Decision.TIE
        assert Decision.TIE.resolved() == 1
        with pytest.raises(ValueError):
            decision_of(0.0)

    @given(st.floats(1e-6, 1e6))
    def test_vector_matches_scalar(self, v):
        assert decisions_of(np.array([v]))[0] == int(decision_of(v))


class TestHelpers:
    def test_batch_mean_se(self):
        v = np.arange(10, dtype=float)
        b = np.repeat(np.arange(5), 2)
        mean, se = batch_mean_se(v, b, 5)
        means = np.array([0.5, 2.5, 4.5, 6.5, 8.5])
        assert mean == 4.5
        assert se == pytest.approx(np.std(means, ddof=1) / math.sqrt(5))

    def test_default_horizon(self):
        assert default_horizon(constant_model(0, 2, 1)) == pytest.approx(12.5)

    @given(st.floats(0.2, 0.95), st.floats(1.05, 5.0))
    @settings(max_examples=20, deadline=None)
    def test_exits_land_on_band(self, l0, l1):
        mc = MCSettings(n_paths=50, n_batches=5, dt=1e-3, horizon=100.0)
        s = simulate_exits(constant_model(), 0.0, 0.0, ConstantBand(l0, l1), mc, RngSpec(1))
        L = s.L_tau[s.side != 2]
        assert np.all((np.isclose(L, l0, rtol=1e-10)) | (np.isclose(L, l1, rtol=1e-10)))
