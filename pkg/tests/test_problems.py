"""Problem families, the coupled potential, and the drift monotonicity check."""

import numpy as np
import pytest

from twoscale.problems import (
    CoupledPotential,
    check_monotonicity,
    make_problem,
)

ALL_FAMILIES = ["quadratic", "zero", "saturated_double_well"]
ADMISSIBLE_GAMMA = {"quadratic": 0.5, "zero": 1.0, "saturated_double_well": 1.0 / 12.0}


class TestFamilies:
    def test_quadratic_value(self):
        prob = make_problem("quadratic", {"dim": 1})
        assert prob.eval(np.array([2.0])) == 2.0

    def test_zero_gradient(self):
        prob = make_problem("zero", {"dim": 3})
        np.testing.assert_array_equal(prob.grad(np.array([0.3, -4.0, 7.0])), np.zeros(3))

    def test_double_well_critical_point_at_origin(self):
        prob = make_problem("saturated_double_well", {"dim": 1})
        assert prob.grad(np.array([0.0])) == 0.0

    def test_double_well_landscape(self):
        prob = make_problem("saturated_double_well", {"dim": 1})
        # wells at +-1, barrier at 0, quadratic continuation beyond |s|=2
        assert prob.eval(np.array([1.0])) == 0.0
        assert prob.eval(np.array([-1.0])) == 0.0
        assert prob.eval(np.array([0.0])) == 0.25
        np.testing.assert_allclose(prob.eval(np.array([2.0])), 2.25)
        np.testing.assert_allclose(prob.grad(np.array([2.0])), 6.0)
        # C1 across the seam and curvature 11 outside
        eps = 1e-7
        left = prob.grad(np.array([2.0 - eps]))
        right = prob.grad(np.array([2.0 + eps]))
        np.testing.assert_allclose(left, right, atol=1e-5)
        np.testing.assert_allclose(
            (prob.grad(np.array([3.0 + 1e-6])) - prob.grad(np.array([3.0]))) / 1e-6,
            11.0,
            rtol=1e-4,
        )

    @pytest.mark.parametrize("name", ALL_FAMILIES)
    @pytest.mark.parametrize("dim", [1, 3])
    def test_gradient_matches_finite_differences(self, name, dim):
        prob = make_problem(name, {"dim": dim})
        rng = np.random.default_rng(42)
        h = 1e-6
        for _ in range(100):
            x = rng.uniform(-3.0, 3.0, size=dim)
            g = prob.grad(x)
            fd = np.empty(dim)
            for d in range(dim):
                e = np.zeros(dim)
                e[d] = h
                fd[d] = (prob.eval(x + e) - prob.eval(x - e)) / (2.0 * h)
            scale = max(1.0, float(np.linalg.norm(g)))
            assert np.linalg.norm(fd - g) <= 1e-5 * scale

    @pytest.mark.parametrize("name", ALL_FAMILIES)
    def test_gradient_lipschitz_bound(self, name):
        prob = make_problem(name, {"dim": 2})
        rng = np.random.default_rng(7)
        for _ in range(200):
            y1, y2 = rng.uniform(-6.0, 6.0, size=(2, 2))
            lhs = np.linalg.norm(prob.grad(y1) - prob.grad(y2))
            assert lhs <= prob.lipschitz_grad * np.linalg.norm(y1 - y2) * (1 + 1e-12) + 1e-14

    @pytest.mark.parametrize("name", ALL_FAMILIES)
    def test_hessian_matches_gradient_differences(self, name):
        prob = make_problem(name, {"dim": 1})
        rng = np.random.default_rng(3)
        h = 1e-6
        for s in rng.uniform(-4.0, 4.0, size=50):
            fd = (prob.grad(np.array([s + h])) - prob.grad(np.array([s - h]))) / (2 * h)
            np.testing.assert_allclose(fd, prob.hess_diag(np.array([s])), atol=2e-4)

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError, match="unknown problem family"):
            make_problem("rastigrin")

    def test_bad_params_rejected(self):
        with pytest.raises(ValueError):
            make_problem("quadratic", {"dim": 0})
        with pytest.raises(ValueError, match="unknown problem parameters"):
            make_problem("quadratic", {"dim": 1, "scale": 2.0})


class TestCoupledPotential:
    def test_value_formula_exact(self, quad_pot):
        y, x = np.array([0.7]), np.array([-0.2])
        expected = 0.5 * 0.7**2 + ((-0.2 - 0.7) ** 2) / (2 * 0.5)
        np.testing.assert_allclose(quad_pot.value(y, x), expected, rtol=1e-15)

    def test_admissibility_gate(self):
        prob = make_problem("quadratic", {"dim": 1})
        with pytest.raises(ValueError, match="gamma"):
            CoupledPotential(prob, gamma=2.0, beta=1.0)  # gamma >= 1/L = 1
        with pytest.raises(ValueError):
            CoupledPotential(prob, gamma=1.0, beta=1.0)  # boundary excluded
        sdw = make_problem("saturated_double_well", {"dim": 1})
        with pytest.raises(ValueError):
            CoupledPotential(sdw, gamma=1.0 / 11.0, beta=1.0)
        with pytest.raises(ValueError):
            CoupledPotential(prob, gamma=0.5, beta=0.0)

    @pytest.mark.parametrize("name", ALL_FAMILIES)
    def test_kappa_positive_for_accepted(self, name):
        prob = make_problem(name, {"dim": 1})
        pot = CoupledPotential(prob, ADMISSIBLE_GAMMA[name], 1.0)
        assert pot.kappa > 0.0

    @pytest.mark.parametrize("name", ALL_FAMILIES)
    def test_confining_on_rays(self, name):
        """Phi(y, x) grows at least quadratically along rays."""
        prob = make_problem(name, {"dim": 1})
        pot = CoupledPotential(prob, ADMISSIBLE_GAMMA[name], 1.0)
        x = np.array([1.0])
        for direction in (+1.0, -1.0):
            radii = np.linspace(5.0, 50.0, 10)
            vals = np.array([pot.value(np.array([direction * r]), x) for r in radii])
            ratios = vals / radii**2
            assert np.all(ratios > 0.05)


class TestMonotonicity:
    def test_quadratic_exact_coefficient(self, quad_pot):
        # b is linear: (b(x,y1)-b(x,y2)).(y1-y2) = -(1 + 1/gamma)|y1-y2|^2,
        # so the normalized defect is kappa - (1 + 1/gamma) = -2 exactly.
        report = check_monotonicity(quad_pot, samples=50, radius=3.0, seed=0)
        assert report.passed
        assert report.kappa == 1.0
        np.testing.assert_allclose(report.max_normalized_defect, -2.0, atol=1e-12)

    def test_zero_problem_tight(self, zero_pot):
        # b(x,y) = (x-y)/gamma exactly: defect identically zero at kappa = 1.
        report = check_monotonicity(zero_pot, samples=50, radius=2.0, seed=1)
        assert report.passed
        assert report.kappa == 1.0
        assert abs(report.max_normalized_defect) <= 1e-9

    def test_double_well_passes(self, sdw_pot):
        report = check_monotonicity(sdw_pot, samples=500, radius=6.0, seed=2)
        assert report.passed

    def test_inadmissible_gamma_refused_upstream(self):
        prob = make_problem("quadratic", {"dim": 1})
        with pytest.raises(ValueError):
            CoupledPotential(prob, gamma=2.0, beta=1.0)
