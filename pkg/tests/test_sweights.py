"""Two-component weight matrices, weight functions and their identities."""

import numpy as np
import pytest

from cowlib import (EvaluationError, FitResult, Interval, MixtureComponent,
                    MixtureModel, SingularModelError, apply_weights,
                    compute_W_variant_A, compute_W_variant_B,
                    compute_W_variant_C, fit_extended_ml, integrate,
                    weight_functions)
from cowlib.sweights import WeightMatrix
from cowlib.toygen import ToySpec, generate_simple, simple_truth_densities

from conftest import sample_box_mixture


@pytest.fixture(scope="module")
def toy_fit():
    """Simple toy with a polished yields-only fit and its plug-in shapes."""
    ds = generate_simple(ToySpec(study="simple", n_events=2000, z=0.3, seed=77))
    gs, gb, _, _ = simple_truth_densities()
    model = MixtureModel(
        [MixtureComponent("s", gs, False), MixtureComponent("b", gb, False)],
        np.array([1000.0, 1000.0]))
    fit = fit_extended_ml(ds.m, model)
    assert fit.converged
    z = float(fit.params[0] / fit.params[:2].sum())
    return ds.m, gs, gb, fit, z


class TestVariantA:
    def test_box_oracle_matrix(self, box_model, box_W, unit_interval):
        gs, gb = box_model
        wm = compute_W_variant_A(gs, gb, 0.5, unit_interval)
        assert np.allclose(wm.W, box_W, atol=1e-9)
        assert np.allclose(wm.A @ wm.W, np.eye(2), atol=1e-10)

    def test_box_oracle_weight_values(self, box_model, unit_interval):
        gs, gb = box_model
        wm = compute_W_variant_A(gs, gb, 0.5, unit_interval)
        wfs = weight_functions(wm, gs, gb)
        assert np.allclose(wfs.w_s([0.1, 0.3, 0.49]), 1.0, atol=1e-9)
        assert np.allclose(wfs.w_s([0.51, 0.7, 0.99]), -1.0, atol=1e-9)

    def test_identical_shapes_singular(self, box_model, unit_interval):
        _, gb = box_model
        with pytest.raises(SingularModelError):
            compute_W_variant_A(gb, gb, 0.5, unit_interval)

    def test_invalid_fraction(self, box_model, unit_interval):
        gs, gb = box_model
        for z in (0.0, 1.0, -0.2, 1.3):
            with pytest.raises(EvaluationError):
                compute_W_variant_A(gs, gb, z, unit_interval)


class TestVariantB:
    def test_two_event_hand_formula(self, box_model):
        gs, gb = box_model
        m = np.array([0.25, 0.75])
        wm = compute_W_variant_B(gs, gb, 0.5, m)
        # per-event terms g_x g_y / g^2 with (s, b, g) = (2, 1, 1.5) at 0.25
        # and (0, 1, 0.5) at 0.75, averaged over the two events
        assert wm.W[0, 0] == pytest.approx(0.5 * 4.0 / 2.25, rel=1e-14)
        assert wm.W[0, 1] == pytest.approx(0.5 * 2.0 / 2.25, rel=1e-14)
        assert wm.W[1, 1] == pytest.approx(0.5 * (1.0 / 2.25 + 4.0), rel=1e-14)

    def test_converges_to_quadrature(self, box_model, box_W):
        gs, gb = box_model
        rng = np.random.default_rng(12345)
        m = sample_box_mixture(rng, 100_000, z=0.5)
        wm = compute_W_variant_B(gs, gb, 0.5, m)
        assert np.allclose(wm.W, box_W, atol=0.02)

    def test_self_consistency_sum_equals_fitted_yield(self, toy_fit):
        m, gs, gb, fit, z = toy_fit
        wm = compute_W_variant_B(gs, gb, z, m)
        w = weight_functions(wm, gs, gb).w_s(m)
        n = len(m)
        assert w.sum() == pytest.approx(n * z, rel=1e-12)
        # equivalently the sample mean of the weights equals the fraction
        assert w.mean() == pytest.approx(z, rel=1e-12)

    def test_coefficient_sums_give_fractions(self, toy_fit):
        # rows of A sum to the component fractions for the self-consistent
        # in-sample estimate
        m, gs, gb, fit, z = toy_fit
        wm = compute_W_variant_B(gs, gb, z, m)
        assert wm.A[0].sum() == pytest.approx(z, rel=1e-10)
        assert wm.A[1].sum() == pytest.approx(1.0 - z, rel=1e-10)

    def test_empty_data_rejected(self, box_model):
        gs, gb = box_model
        with pytest.raises(EvaluationError):
            compute_W_variant_B(gs, gb, 0.5, np.array([]))

    def test_vanishing_mixture_names_observation(self, unit_interval):
        gs = simple_truth_densities()[0]
        from cowlib import make_density
        gb = make_density("uniform", [0.0, 0.5], unit_interval)
        narrow = make_density("uniform", [0.4, 0.5], unit_interval)
        with pytest.raises(EvaluationError, match="observation"):
            compute_W_variant_B(narrow, gb, 0.5, np.array([0.45, 0.9]))


class TestVariantC:
    @staticmethod
    def _analytic_yields_fit(gs, gb, z, m):
        """FitResult carrying the exact inverse yields Hessian as covariance."""
        n = len(m)
        yields = np.array([z * n, (1.0 - z) * n])
        s, b = gs.pdf(m), gb.pdf(m)
        f = yields[0] * s + yields[1] * b
        H = np.array([[np.sum(s * s / f ** 2), np.sum(s * b / f ** 2)],
                      [np.sum(s * b / f ** 2), np.sum(b * b / f ** 2)]])
        return FitResult(params=yields, covariance=np.linalg.inv(H),
                         hessian=-H, nll=0.0, converged=True, n_calls=0)

    def test_exact_hessian_reproduces_variant_B(self, toy_fit):
        m, gs, gb, fit, z = toy_fit
        wm_b = compute_W_variant_B(gs, gb, z, m)
        afit = self._analytic_yields_fit(gs, gb, z, m)
        wm_ci = compute_W_variant_C(afit, len(m), "invert-full-cov")
        wm_cii = compute_W_variant_C(afit, len(m), "yields-only-cov")
        assert np.allclose(wm_ci.W, wm_b.W, rtol=1e-12)
        assert np.allclose(wm_cii.A, wm_b.A, rtol=1e-12)

    def test_numerical_hessian_close_to_variant_B(self, toy_fit):
        m, gs, gb, fit, z = toy_fit
        wm_b = compute_W_variant_B(gs, gb, z, m)
        wm_c = compute_W_variant_C(fit, len(m), "invert-full-cov")
        assert np.allclose(wm_c.W, wm_b.W, rtol=1e-3)

    def test_inverse_consistency(self, toy_fit):
        m, gs, gb, fit, z = toy_fit
        for mode in ("invert-full-cov", "yields-only-cov"):
            wm = compute_W_variant_C(fit, len(m), mode)
            assert np.allclose(wm.A @ wm.W, np.eye(2), atol=1e-10)

    def test_requires_converged_fit_with_covariance(self):
        bad = FitResult(params=np.array([1.0, 1.0]), covariance=None,
                        hessian=None, nll=0.0, converged=False, n_calls=0)
        with pytest.raises(EvaluationError):
            compute_W_variant_C(bad, 10, "invert-full-cov")

    def test_unknown_mode(self, toy_fit):
        m, gs, gb, fit, z = toy_fit
        with pytest.raises(ValueError):
            compute_W_variant_C(fit, len(m), "nope")


class TestWeightFunctions:
    def test_sum_to_unity_box(self, box_model, unit_interval):
        gs, gb = box_model
        wm = compute_W_variant_A(gs, gb, 0.5, unit_interval)
        wfs = weight_functions(wm, gs, gb)
        grid = np.linspace(0, 1, 1001)
        assert np.allclose(wfs.w_s(grid) + wfs.w_b(grid), 1.0, atol=1e-9)

    def test_orthonormality_by_quadrature(self, toy_fit, unit_interval):
        m, gs, gb, fit, z = toy_fit
        wm = compute_W_variant_A(gs, gb, z, unit_interval)
        wfs = weight_functions(wm, gs, gb)
        pairs = {("s", "s"): 1.0, ("s", "b"): 0.0,
                 ("b", "s"): 0.0, ("b", "b"): 1.0}
        for (wx, gy), expected in pairs.items():
            wfn = wfs.w_s if wx == "s" else wfs.w_b
            gfn = gs if gy == "s" else gb
            val = integrate(lambda x: wfn(x) * gfn.pdf(x), unit_interval, 1e-9)
            assert val == pytest.approx(expected, abs=1e-8)

    def test_orthonormality_empirical_measure(self, toy_fit):
        # the per-event-sum matrix is exactly orthonormal against the
        # empirical measure dmu = dN / (z gs + (1-z) gb)
        m, gs, gb, fit, z = toy_fit
        wm = compute_W_variant_B(gs, gb, z, m)
        wfs = weight_functions(wm, gs, gb)
        g = z * gs.pdf(m) + (1.0 - z) * gb.pdf(m)
        n = len(m)
        mat = np.empty((2, 2))
        for i, wfn in enumerate((wfs.w_s, wfs.w_b)):
            for j, gfn in enumerate((gs, gb)):
                mat[i, j] = np.sum(wfn(m) * gfn.pdf(m) / g) / n
        assert np.allclose(mat, np.eye(2), atol=1e-10)

    def test_strict_range(self, unit_interval):
        # smooth shapes so extrapolation beyond the fit range is defined
        gs, gb, _, _ = simple_truth_densities()
        wm = compute_W_variant_A(gs, gb, 0.5, unit_interval)
        strict = weight_functions(wm, gs, gb)
        with pytest.raises(EvaluationError):
            strict.w_s([1.2])
        loose = weight_functions(wm, gs, gb, strict_range=False)
        assert np.isfinite(loose.w_s([1.2])[0])

    def test_negative_denominator_warns(self, box_model):
        gs, gb = box_model
        # a deliberately inconsistent matrix makes the denominator negative
        W = np.array([[1.0, 2.0], [2.0, 1.0]])
        wm = WeightMatrix(W, np.linalg.inv(W), "A", np.array([0.5, 0.5]))
        with pytest.warns(RuntimeWarning):
            wfs = weight_functions(wm, gs, gb)
        assert wfs.warnings


@pytest.fixture(scope="module")
def box_wfs(box_model, unit_interval):
    gs, gb = box_model
    wm = compute_W_variant_A(gs, gb, 0.5, unit_interval)
    return weight_functions(wm, gs, gb)


class TestApplyWeights:
    def test_signal_side(self, box_wfs):
        assert np.allclose(apply_weights(box_wfs, [0.25]), [[1.0, 0.0]],
                           atol=1e-9)

    def test_background_side(self, box_wfs):
        assert np.allclose(apply_weights(box_wfs, [0.75]), [[-1.0, 2.0]],
                           atol=1e-9)

    def test_empty(self, box_wfs):
        out = apply_weights(box_wfs, [])
        assert out.shape == (0, 2)

    def test_rows_sum_to_one(self, box_wfs):
        rng = np.random.default_rng(8)
        out = apply_weights(box_wfs, rng.random(100))
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_weight_matrix_round_trip(box_model, unit_interval):
    gs, gb = box_model
    wm = compute_W_variant_A(gs, gb, 0.5, unit_interval)
    wm2 = WeightMatrix.from_dict(wm.to_dict())
    assert np.allclose(wm2.W, wm.W)
    assert wm2.variant == "A"
