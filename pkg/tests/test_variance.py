import math

import numpy as np
import pytest
from scipy.stats import norm

from batchpool import dgp
from batchpool import variance as var
from batchpool.errors import NumericalError, SingularInformationError

E_BASE = 0.2


def _v(spec):
    return (lambda p: dgp.var_fn(spec, 0, p), lambda p: dgp.var_fn(spec, 1, p))


def _within_quartile_variance():
    """Average within-cell variance of a standard normal cut at its quartiles."""
    cuts = norm.ppf([0.25, 0.5, 0.75])
    edges = np.concatenate([[-np.inf], cuts, [np.inf]])
    cell_means = (norm.pdf(edges[:-1]) - norm.pdf(edges[1:])) / 0.25
    return 1.0 - 0.25 * np.sum(cell_means**2)


class TestAIPWVariance:
    def test_homoskedastic_constant(self, homoskedastic, gauss_sample):
        value = var.v0_aipw(E_BASE, _v(homoskedastic), 0.0, gauss_sample)
        assert value == pytest.approx(1 / 0.2 + 1 / 0.8, rel=1e-12)

    def test_heteroskedastic_constant(self, heteroskedastic, gauss_sample):
        # E exp(X / 2) = exp(1 / 8)
        value = var.v0_aipw(E_BASE, _v(heteroskedastic), 0.0, gauss_sample)
        assert value == pytest.approx((2 / 0.2 + 1 / 0.8) * math.exp(0.125), rel=1e-10)

    def test_effect_heterogeneity_term(self, homoskedastic, gauss_sample):
        value = var.v0_aipw(0.5, _v(homoskedastic), lambda p: p[:, 0] ** 2, gauss_sample)
        assert value == pytest.approx(4.0 + 1.0, rel=1e-10)

    def test_rejects_boundary_propensity(self, homoskedastic, gauss_sample):
        with pytest.raises(NumericalError):
            var.v0_aipw(1.0, _v(homoskedastic), 0.0, gauss_sample)

    def test_aggregation_of_two_constants(self, homoskedastic, gauss_sample):
        v = _v(homoskedastic)
        per_batch = [var.per_batch_variance("ATE", e, v, 0.0, gauss_sample) for e in (0.2, 0.5)]
        agg = var.vla(per_batch, [1, 1])
        assert agg.matrix[0, 0] == pytest.approx(1 / (0.5 / 6.25 + 0.5 / 4.0))
        pooled = var.v0_aipw(0.35, v, 0.0, gauss_sample)
        assert pooled < agg.matrix[0, 0]
        assert not agg.ridge_used


class TestEPLVariance:
    def test_homoskedastic_identity(self, homoskedastic, gauss_sample):
        V = var.v0_epl(E_BASE, _v(homoskedastic), None, gauss_sample)
        np.testing.assert_allclose(V, np.eye(2) / 0.16, rtol=1e-10, atol=1e-12)

    def test_heteroskedastic_closed_form(self, heteroskedastic, gauss_sample):
        # rho(x) = 0.16 / (1.8 exp(x / 2)); Gaussian moments of exp(-X/2) (1, X, X^2)
        c = 0.16 / 1.8 * math.exp(0.125)
        M = c * np.array([[1.0, -0.5], [-0.5, 1.25]])
        got = var.epl_information(E_BASE, _v(heteroskedastic), None, gauss_sample)
        np.testing.assert_allclose(got, M, rtol=1e-9)

    def test_singular_information(self, homoskedastic, gauss_sample):
        with pytest.raises(SingularInformationError):
            var.v0_epl(E_BASE, _v(homoskedastic), lambda p: np.column_stack([p[:, 0], 2 * p[:, 0]]),
                       gauss_sample)


class TestPsi:
    def test_values(self):
        M = np.diag([2.0, 4.0])
        value, grad = var.psi_value_and_grad("A-opt", M)
        assert value == pytest.approx(-0.75)
        np.testing.assert_allclose(grad, np.diag([0.25, 1 / 16]))
        value, grad = var.psi_value_and_grad("D-opt", M)
        assert value == pytest.approx(math.log(8.0))
        np.testing.assert_allclose(grad, np.diag([0.5, 0.25]))

    def test_singular(self):
        M = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert var.psi_value_and_grad("A-opt", M, gradient=False)[0] == float("-inf")
        with pytest.raises(SingularInformationError):
            var.psi_value_and_grad("D-opt", M)


class TestCoarse:
    def test_quartile_formula(self, homoskedastic):
        # cell indicators jump inside panels, so the rule is only first-order here
        gauss_sample = var.gauss_legendre_sample(nodes=2**17)
        x = gauss_sample.points[:, 0]
        labels = np.searchsorted(norm.ppf([0.25, 0.5, 0.75]), x)
        means = (lambda p: p[:, 0], lambda p: p[:, 0])
        got = var.v0_aipw_coarse(E_BASE, means, _v(homoskedastic), labels, gauss_sample)
        assert got == pytest.approx(6.25 * (1 + _within_quartile_variance()), rel=1e-4)

    def test_exact_cells_reduce_to_efficient(self, homoskedastic, gauss_sample):
        means = (0.0, 1.0)
        labels = np.zeros(gauss_sample.size, dtype=int)
        got = var.v0_aipw_coarse(0.5, means, _v(homoskedastic), labels, gauss_sample)
        assert got == pytest.approx(var.v0_aipw(0.5, _v(homoskedastic), 0.0, gauss_sample))


class TestSamples:
    def test_monte_carlo_is_fixed(self):
        spec = dgp.DGPSpec(dim=3)
        a = var.monte_carlo_sample(spec, 2000)
        b = var.monte_carlo_sample(spec, 2000)
        np.testing.assert_array_equal(a.points, b.points)

    def test_quadrature_integrates_polynomials(self, gauss_sample):
        x = gauss_sample.points[:, 0]
        assert gauss_sample.expect(x**4) == pytest.approx(3.0, rel=1e-10)

    def test_uniform_law(self):
        sample = var.gauss_legendre_sample("uniform-unit-interval", nodes=32)
        assert sample.expect(sample.points[:, 0] ** 3) == pytest.approx(0.25)
