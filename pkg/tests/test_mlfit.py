"""Extended and weighted maximum-likelihood fits and numerical Hessians."""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from cowlib import (ConstructionError, Density1D, EvaluationError, Interval,
                    MixtureComponent, MixtureModel, fit_extended_ml,
                    fit_weighted_ml, make_density, numerical_hessian,
                    yields_only_refit)
from cowlib.toygen import ToySpec, generate_simple, simple_truth_densities


def two_component_model(n, free=False):
    gs, gb, _, _ = simple_truth_densities()
    return MixtureModel(
        [MixtureComponent("s", gs, free), MixtureComponent("b", gb, free)],
        np.array([0.5 * n, 0.5 * n]))


@pytest.fixture(scope="module")
def toy_2000():
    return generate_simple(ToySpec(study="simple", n_events=2000, z=0.3, seed=41))


@pytest.fixture(scope="module")
def yields_fit_2000(toy_2000):
    return fit_extended_ml(toy_2000.m, two_component_model(2000))


class TestExtendedML:
    def test_pure_signal(self):
        gs, gb, _, _ = simple_truth_densities()
        rng = np.random.default_rng(17)
        m = gs.sample(rng, 2000)
        fit = fit_extended_ml(m, two_component_model(2000))
        assert fit.converged
        assert fit.params[0] == pytest.approx(2000, rel=0.05)
        assert fit.params[1] < 100

    def test_yield_identity(self, yields_fit_2000):
        # with all shapes fixed the yield scores force sum(yields) = N
        assert yields_fit_2000.converged
        total = yields_fit_2000.params[:2].sum()
        assert total == pytest.approx(2000.0, rel=1e-12)

    def test_ensemble_recovery_of_fraction(self):
        # fitted fraction unbiased within 3 standard errors over an ensemble
        z_true = 0.3
        zs, sigmas = [], []
        for seed in range(30):
            ds = generate_simple(ToySpec(study="simple", n_events=2000,
                                         z=z_true, seed=1000 + seed))
            fit = fit_extended_ml(ds.m, two_component_model(2000))
            assert fit.converged
            zs.append(fit.params[0] / fit.params[:2].sum())
            sigmas.append(np.sqrt(fit.covariance[0, 0]) / 2000)
        mean_err = np.mean(sigmas) / np.sqrt(len(zs))
        assert abs(np.mean(zs) - z_true) < 3 * mean_err

    def test_covariance_is_negative_inverse_hessian(self, yields_fit_2000):
        fit = yields_fit_2000
        assert np.allclose(fit.covariance, np.linalg.inv(-fit.hessian),
                           rtol=1e-8)
        assert np.all(np.linalg.eigvalsh(fit.covariance) > 0)

    def test_data_outside_support_rejected(self):
        with pytest.raises(EvaluationError):
            fit_extended_ml(np.array([0.5, 1.5]), two_component_model(2))

    def test_init_outside_bounds_rejected(self, toy_2000):
        with pytest.raises(EvaluationError):
            fit_extended_ml(toy_2000.m, two_component_model(2000),
                            init=np.array([-5.0, 100.0]))

    def test_degenerate_components_flagged(self):
        # identical shapes leave the total yield split unidentified
        gs, _, _, _ = simple_truth_densities()
        rng = np.random.default_rng(0)
        m = gs.sample(rng, 1000)
        model = MixtureModel(
            [MixtureComponent("s", gs, False), MixtureComponent("b", gs, False)],
            np.array([500.0, 500.0]))
        fit = fit_extended_ml(m, model)
        assert "hessian_singular" in fit.flags
        assert fit.covariance is None


class TestYieldsOnlyRefit:
    def test_tighter_than_free_fit(self, toy_2000):
        free = fit_extended_ml(toy_2000.m, two_component_model(2000, free=True))
        fixed = yields_only_refit(toy_2000.m, free.model)
        assert free.converged and fixed.converged
        assert np.sqrt(fixed.covariance[0, 0]) < np.sqrt(free.covariance[0, 0])

    def test_zero_yield_component_bounded(self):
        gs, gb, _, _ = simple_truth_densities()
        rng = np.random.default_rng(9)
        m = gs.sample(rng, 1500)
        fit = yields_only_refit(m, two_component_model(1500))
        assert fit.params[1] >= 0.0
        assert fit.params[1] < 0.03 * 1500


@pytest.fixture(scope="module")
def exp_data():
    d = Density1D("exponential", [2.0], Interval(0.0, 3.0))
    rng = np.random.default_rng(23)
    return d, d.sample(rng, 3000)


class TestWeightedML:
    def test_unweighted_reduction_matches_scalar_oracle(self, exp_data):
        # independent oracle: 1-D golden-section minimization of the exact
        # negative log-likelihood
        d, t = exp_data
        fit = fit_weighted_ml(t, np.ones_like(t), d, bounds=[(0.05, 20.0)])
        assert fit.converged

        def nll(lam):
            return -np.sum(Density1D("exponential", [lam], d.support).logpdf(t))

        res = minimize_scalar(nll, bounds=(0.1, 10.0), method="bounded",
                              options={"xatol": 1e-10})
        assert fit.params[0] == pytest.approx(res.x, abs=1e-6)

    def test_scale_invariance_of_point_estimate(self, exp_data):
        d, t = exp_data
        f1 = fit_weighted_ml(t, np.ones_like(t), d, bounds=[(0.05, 20.0)])
        f2 = fit_weighted_ml(t, 2.0 * np.ones_like(t), d, bounds=[(0.05, 20.0)])
        assert f1.params[0] == pytest.approx(f2.params[0], abs=1e-8)

    def test_negative_weights_accepted(self, exp_data):
        d, t = exp_data
        rng = np.random.default_rng(4)
        w = np.where(rng.random(len(t)) < 0.2, -0.3, 1.0)
        fit = fit_weighted_ml(t, w, d, bounds=[(0.05, 20.0)])
        assert fit.converged

    def test_error_conditions(self, exp_data):
        d, t = exp_data
        with pytest.raises(EvaluationError):
            fit_weighted_ml(t, -np.ones_like(t), d)      # sum of weights <= 0
        with pytest.raises(EvaluationError):
            fit_weighted_ml(t, np.ones(len(t) - 1), d)   # length mismatch
        bad = np.ones_like(t)
        bad[0] = np.inf
        with pytest.raises(EvaluationError):
            fit_weighted_ml(t, bad, d)                   # non-finite weight

    def test_density_zero_at_weighted_point_rejected(self):
        # the second monomial density vanishes at the lower support edge
        d = Density1D("monomial", [2.0], Interval(0.0, 1.0))
        t = np.array([0.0, 0.5, 0.7])
        with pytest.raises(EvaluationError):
            fit_weighted_ml(t, np.ones(3), d)


class TestNumericalHessian:
    def test_quadratic_form(self):
        A = np.array([[2.0, 0.3], [0.3, 1.5]])
        H = numerical_hessian(lambda x: 0.5 * x @ A @ x, np.array([0.7, -0.4]))
        assert np.allclose(H, A, rtol=1e-6)

    def test_quartic(self):
        H = numerical_hessian(lambda x: x[0] ** 4, np.array([2.0]))
        assert H[0, 0] == pytest.approx(48.0, abs=1e-3)

    def test_yields_block_matches_analytic(self, toy_2000, yields_fit_2000):
        # closed-form second derivatives of the extended likelihood in the
        # yields: H_xy = sum_i g_x g_y / f^2
        gs, gb, _, _ = simple_truth_densities()
        m = toy_2000.m
        s, b = gs.pdf(m), gb.pdf(m)

        def nll(y):
            f = y[0] * s + y[1] * b
            return np.sum(y) - np.sum(np.log(f))

        yhat = yields_fit_2000.params[:2]
        H_num = numerical_hessian(nll, yhat)
        f = yhat[0] * s + yhat[1] * b
        H_ana = np.array([[np.sum(s * s / f ** 2), np.sum(s * b / f ** 2)],
                          [np.sum(s * b / f ** 2), np.sum(b * b / f ** 2)]])
        assert np.allclose(H_num, H_ana, rtol=1e-4)

    def test_nonfinite_objective_names_probe(self):
        with pytest.raises(EvaluationError, match="probe point"):
            numerical_hessian(lambda x: np.log(x[0]), np.array([1e-7]))
