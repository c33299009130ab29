"""Invariant-measure realizations: quadrature and Langevin, and the
smoothed loss, its gradient, and moments, against Gaussian oracles.

For the quadratic loss the measure is Gaussian with mean x/(1+gamma) and
variance gamma/(beta*(1+gamma)); completing the square also gives the
smoothed loss x^2/(2(1+gamma)) + log(1+gamma)/(2 beta) in closed form.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from twoscale.errors import DivergedError, MethodError
from twoscale.gibbs import (
    GibbsFactory,
    LangevinConfig,
    MomentTable,
    build_gibbs,
    local_entropy,
    local_entropy_gradient,
    moments,
)
from twoscale.problems import CoupledPotential, make_problem


def quad_entropy_oracle(x, gamma, beta):
    return x * x / (2.0 * (1.0 + gamma)) + math.log(1.0 + gamma) / (2.0 * beta)


class TestQuadratureGaussianOracle:
    def test_mean_and_variance(self, quad_pot):
        rep = build_gibbs(quad_pot, 1.0)
        m = moments(rep)
        np.testing.assert_allclose(m.mean, [1.0 / 1.5], atol=1e-10)
        np.testing.assert_allclose(m.m2 - m.mean[0] ** 2, 1.0 / 3.0, atol=1e-10)

    def test_zero_problem_gaussian(self):
        pot = CoupledPotential(make_problem("zero", {"dim": 1}), gamma=1.0, beta=2.5)
        m = moments(build_gibbs(pot, 0.0))
        np.testing.assert_allclose(m.mean, [0.0], atol=1e-12)
        np.testing.assert_allclose(m.m2, 1.0 / 2.5, atol=1e-10)

    def test_first_absolute_moment(self, quad_pot):
        # E|y| = sigma*sqrt(2/pi); |y| has a kink, so the default grid is
        # accurate only to O(h^2) locally; a finer grid nails it.
        oracle = math.sqrt(2.0 / (3.0 * math.pi))
        m_default = moments(build_gibbs(quad_pot, 0.0))
        assert abs(m_default.m1 - oracle) <= 2e-3
        m_fine = moments(build_gibbs(quad_pot, 0.0, quad_points=4097))
        assert abs(m_fine.m1 - oracle) <= 1e-5

    def test_normalization_against_scipy(self, quad_pot, sdw_pot):
        for pot, x in ((quad_pot, 0.4), (sdw_pot, 0.3)):
            rep = build_gibbs(pot, x)
            lo, hi = rep.support_box[0]
            mass = quad(lambda y: rep.density(np.array([y])), lo, hi, limit=300)[0]
            assert abs(mass - 1.0) <= 1e-8

    def test_log_density_differences_exact(self, sdw_pot):
        rep = build_gibbs(sdw_pot, 0.2)
        y1, y2 = np.array([0.5]), np.array([-0.8])
        lhs = rep.log_density(y1) - rep.log_density(y2)
        rhs = -sdw_pot.beta * (sdw_pot.value(y1, rep.x) - sdw_pot.value(y2, rep.x))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-14)

    def test_support_box_stable_under_doubling(self, quad_pot):
        rep = build_gibbs(quad_pot, 1.0)
        assert rep.meta["expansions"] == 0
        # explicit re-check: doubling the box leaves log Z unchanged
        wide = build_gibbs(quad_pot, 1.0, quad_points=513)
        assert abs(wide.log_normalizer - rep.log_normalizer) < 1e-10

    def test_dimension_two_supported_three_rejected(self):
        pot2 = CoupledPotential(make_problem("quadratic", {"dim": 2}), 0.5, 1.0)
        rep = build_gibbs(pot2, np.array([1.0, -1.0]), quad_points=121)
        m = moments(rep)
        np.testing.assert_allclose(m.mean, np.array([1.0, -1.0]) / 1.5, atol=1e-8)
        pot3 = CoupledPotential(make_problem("quadratic", {"dim": 3}), 0.5, 1.0)
        with pytest.raises(ValueError, match="dimension"):
            build_gibbs(pot3, np.zeros(3))


class TestLocalEntropy:
    def test_zero_loss_gives_zero_for_any_beta(self):
        for beta in (0.5, 1.0, 2.5):
            pot = CoupledPotential(make_problem("zero", {"dim": 1}), gamma=0.7, beta=beta)
            assert abs(local_entropy(build_gibbs(pot, 1.3))) <= 1e-12

    def test_quadratic_closed_form(self, quad_pot):
        # frozen from the symbolic Gaussian-convolution oracle
        assert abs(local_entropy(build_gibbs(quad_pot, 0.0)) - 0.2027325540540822) <= 1e-12
        for x in (-2.0, -0.3, 1.0, 2.0):
            le = local_entropy(build_gibbs(quad_pot, x))
            np.testing.assert_allclose(le, quad_entropy_oracle(x, 0.5, 1.0), atol=1e-10)

    def test_against_independent_convolution_quadrature(self, quad_pot):
        x, gamma, beta = 0.7, 0.5, 1.0
        conv = quad(
            lambda y: (2 * math.pi * gamma / beta) ** -0.5
            * math.exp(-beta * (0.5 * y * y + (x - y) ** 2 / (2 * gamma))),
            -40,
            40,
            limit=300,
        )[0]
        oracle = -math.log(conv) / beta
        np.testing.assert_allclose(local_entropy(build_gibbs(quad_pot, x)), oracle, atol=1e-9)

    def test_small_smoothing_approaches_loss(self):
        prob = make_problem("quadratic", {"dim": 1})
        for gamma in (0.1, 0.01):
            pot = CoupledPotential(prob, gamma=gamma, beta=1.0)
            le = local_entropy(build_gibbs(pot, 1.0))
            assert abs(le - 0.5) <= gamma

    def test_langevin_build_rejected(self, quad_pot):
        rep = build_gibbs(quad_pot, 0.0, method="langevin", sampler=LangevinConfig(n_samples=500, n_chains=10))
        with pytest.raises(MethodError):
            local_entropy(rep)


class TestGradient:
    def test_quadratic_oracle(self, quad_pot):
        g = local_entropy_gradient(build_gibbs(quad_pot, 1.0))
        np.testing.assert_allclose(g.value, [1.0 / 1.5], atol=1e-9)

    def test_zero_loss_zero_gradient(self, zero_pot):
        g = local_entropy_gradient(build_gibbs(zero_pot, 2.0))
        np.testing.assert_allclose(g.value, [0.0], atol=1e-12)

    def test_double_well_symmetric_point(self):
        pot = CoupledPotential(make_problem("saturated_double_well", {"dim": 1}), 0.05, 1.0)
        g = local_entropy_gradient(build_gibbs(pot, 0.0))
        np.testing.assert_allclose(g.value, [0.0], atol=1e-10)

    @pytest.mark.parametrize("pot_name", ["quad_pot", "sdw_pot"])
    def test_matches_finite_difference_of_entropy(self, pot_name, request):
        """The measure-average formula equals d/dx of the smoothed loss."""
        pot = request.getfixturevalue(pot_name)
        h = 1e-5
        for x in np.linspace(-2.0, 2.0, 11):
            g = local_entropy_gradient(build_gibbs(pot, x)).value[0]
            fd = (
                local_entropy(build_gibbs(pot, x + h)) - local_entropy(build_gibbs(pot, x - h))
            ) / (2 * h)
            assert abs(g - fd) <= 1e-4 * max(1.0, abs(g))


class TestLangevin:
    def test_agreement_with_quadrature(self, quad_pot, sdw_pot):
        for pot, x, seed in ((quad_pot, 1.0, 5), (sdw_pot, 0.3, 6)):
            ref = moments(build_gibbs(pot, x))
            samp = moments(
                build_gibbs(pot, x, method="langevin", sampler=LangevinConfig(n_samples=40_000, seed=seed))
            )
            assert abs(samp.mean[0] - ref.mean[0]) <= 3.0 * samp.std_err_mean[0]
            assert abs(samp.m2 - ref.m2) <= 3.0 * samp.std_err_m2

    def test_deterministic_given_seed(self, quad_pot):
        cfg = LangevinConfig(n_samples=2000, n_chains=50, seed=9)
        a = build_gibbs(quad_pot, 0.5, method="langevin", sampler=cfg)
        b = build_gibbs(quad_pot, 0.5, method="langevin", sampler=cfg)
        np.testing.assert_array_equal(a.sample_store, b.sample_store)

    def test_gradient_reports_standard_error(self, quad_pot):
        rep = build_gibbs(quad_pot, 1.0, method="langevin", sampler=LangevinConfig(n_samples=20_000, seed=3))
        g = local_entropy_gradient(rep)
        assert g.std_err is not None and 0.0 < g.std_err[0] < 0.05
        assert abs(g.value[0] - 1.0 / 1.5) <= 3.0 * g.std_err[0]

    def test_divergence_detected(self, quad_pot):
        bad = LangevinConfig(n_samples=2000, n_chains=4, step=5.0)  # way past stability
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergedError):
                build_gibbs(quad_pot, 0.0, method="langevin", sampler=bad)

    def test_weights_sum_to_one(self, quad_pot):
        rep = build_gibbs(quad_pot, 0.0, method="langevin", sampler=LangevinConfig(n_samples=1000, n_chains=20))
        # uniform weights by construction: expectation of 1 is 1
        assert rep.expectation(np.ones(rep.flat_samples().shape[0])) == 1.0

    def test_empty_sample_store_rejected(self, quad_pot):
        rep = build_gibbs(
            quad_pot, 0.0, method="langevin", sampler=LangevinConfig(n_samples=0, n_chains=2)
        )
        with pytest.raises(ValueError, match="empty sample store"):
            local_entropy_gradient(rep)


class TestMoments:
    def test_csv_row_schema(self, quad_pot):
        row = moments(build_gibbs(quad_pot, 1.0)).csv_row()
        fields = row.split(",")
        assert len(fields) == 6  # x, mean, m1, m2, method, std_err
        assert fields[4] == "quadrature" and fields[5] == ""
        assert float(fields[0]) == 1.0

    def test_table_invariants_enforced(self):
        with pytest.raises(ValueError, match="m1"):
            MomentTable(x=np.array([0.0]), mean=np.array([0.0]), m1=2.0, m2=1.0, method="quadrature")
        with pytest.raises(ValueError, match="m2"):
            MomentTable(x=np.array([0.0]), mean=np.array([2.0]), m1=1.0, m2=1.0, method="quadrature")

    def test_linear_growth_fit(self, quad_pot, sdw_pot):
        """m1(x) + sqrt(m2(x)) <= C(1+|x|) with a stable fitted C."""
        for pot in (quad_pot, sdw_pot):
            def fitted_c(n_grid):
                xs = np.linspace(-5.0, 5.0, n_grid)
                vals = []
                for x in xs:
                    m = moments(build_gibbs(pot, x))
                    vals.append((m.m1 + math.sqrt(m.m2)) / (1.0 + abs(x)))
                return max(vals)

            c21 = fitted_c(21)
            c41 = fitted_c(41)
            assert np.isfinite(c21)
            assert abs(c41 - c21) <= 0.1 * c21

    def test_variance_lipschitz(self, quad_pot, sdw_pot):
        # quadratic: sqrt(m2 - mean^2) is x-independent (exactly Gaussian)
        xs = np.linspace(-2.0, 2.0, 9)
        stds = []
        for x in xs:
            m = moments(build_gibbs(quad_pot, x))
            stds.append(math.sqrt(m.m2 - float(m.mean[0]) ** 2))
        assert max(stds) - min(stds) <= 1e-9
        # double well: report the empirical ratio, must be finite
        ratios = []
        prev = None
        for x in np.linspace(-2.0, 2.0, 21):
            m = moments(build_gibbs(sdw_pot, x))
            cur = (x, math.sqrt(m.m2))
            if prev is not None:
                ratios.append(abs(cur[1] - prev[1]) / abs(cur[0] - prev[0]))
            prev = cur
        assert np.isfinite(max(ratios))


class TestFactory:
    def test_cache_returns_same_object(self, quad_pot):
        factory = GibbsFactory(quad_pot)
        a = factory(1.0)
        b = factory(np.array([1.0]))
        assert a is b

    def test_warm_start_matches_cold_build(self, sdw_pot):
        factory = GibbsFactory(sdw_pot)
        factory(-1.0)
        warm = factory(0.62)
        cold = build_gibbs(sdw_pot, 0.62)
        np.testing.assert_allclose(warm.log_normalizer, cold.log_normalizer, atol=1e-11)
        np.testing.assert_allclose(
            moments(warm).mean, moments(cold).mean, atol=1e-11
        )
