# tests/numerics_test.py
import numpy as np
import pytest

from app.core.errors import DimensionMismatch, NoVariation, RankDeficient, Separation, TooFewRows, TooFewUnits
from app.services.numerics import (
    DesignMatrix,
    fit_logistic,
    fit_ols,
    sample_covariance,
    weighted_mean,
    weighted_variance,
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def design(rng):
    """Intercept plus three standard normal columns"""
    X = np.column_stack([np.ones(200), rng.normal(size=(200, 3))])
    return DesignMatrix(X, ("(Intercept)", "a", "b", "c"))


class TestDesignMatrix:
    def test_vector_becomes_column(self):
        matrix = DesignMatrix(np.arange(4.0))
        assert matrix.values.shape == (4, 1)
        assert matrix.column_labels == ("c0",)

    def test_label_count_must_match(self):
        with pytest.raises(DimensionMismatch):
            DesignMatrix(np.ones((3, 2)), ("only_one",))


class TestFitOls:
    def test_recovers_noiseless_coefficients(self, design):
        beta = np.array([1.5, -2.0, 0.25, 3.0])
        fit = fit_ols(design, design.values @ beta)
        np.testing.assert_allclose(fit.coefficients, beta, rtol=1e-8)
        assert fit.residual_variance == pytest.approx(0.0, abs=1e-20)
        assert fit.coefficient("b") == pytest.approx(0.25)

    def test_residual_variance_uses_degrees_of_freedom(self):
        design = DesignMatrix(np.ones((4, 1)), ("(Intercept)",))
        fit = fit_ols(design, [1.0, 2.0, 3.0, 4.0])
        assert fit.coefficients[0] == pytest.approx(2.5)
        # RSS = 5 over 3 degrees of freedom
        assert fit.residual_variance == pytest.approx(5.0 / 3.0)

    def test_zero_weights_drop_rows(self, design, rng):
        y = rng.normal(size=design.rows)
        weights = np.ones(design.rows)
        weights[:50] = 0.0
        weighted = fit_ols(design, y, weights)
        subset = fit_ols(DesignMatrix(design.values[50:], design.column_labels), y[50:])
        np.testing.assert_allclose(weighted.coefficients, subset.coefficients, rtol=1e-10)
        assert weighted.residual_variance == pytest.approx(subset.residual_variance)

    def test_collinear_columns_are_rank_deficient(self, design):
        values = np.column_stack([design.values, 2.0 * design.values[:, 1]])
        with pytest.raises(RankDeficient):
            fit_ols(DesignMatrix(values), np.zeros(design.rows))

    def test_response_length_checked(self, design):
        with pytest.raises(DimensionMismatch):
            fit_ols(design, np.zeros(design.rows - 1))

    def test_unknown_coefficient_label(self, design):
        fit = fit_ols(design, np.zeros(design.rows))
        with pytest.raises(KeyError):
            fit.coefficient("W")


class TestFitLogistic:
    def test_recovers_coefficients(self, rng):
        x = rng.normal(size=20000)
        w = (rng.random(20000) < 1.0 / (1.0 + np.exp(-(-0.5 + x)))).astype(int)
        design = DesignMatrix(np.column_stack([np.ones_like(x), x]), ("(Intercept)", "x1"))
        fit = fit_logistic(design, w)
        assert fit.converged
        np.testing.assert_allclose(fit.coefficients, [-0.5, 1.0], atol=0.1)

    def test_score_is_zero_at_solution(self, rng):
        x = rng.normal(size=500)
        w = (rng.random(500) < 0.4).astype(int)
        X = np.column_stack([np.ones_like(x), x])
        fit = fit_logistic(DesignMatrix(X), w)
        p = 1.0 / (1.0 + np.exp(-X @ fit.coefficients))
        np.testing.assert_allclose(X.T @ (w - p), 0.0, atol=1e-6)

    def test_separated_data_raises(self):
        x = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
        design = DesignMatrix(np.column_stack([np.ones_like(x), x]))
        with pytest.raises(Separation):
            fit_logistic(design, [0, 0, 0, 1, 1, 1])

    def test_constant_treatment_raises(self):
        with pytest.raises(NoVariation):
            fit_logistic(DesignMatrix(np.ones((5, 1))), [1, 1, 1, 1, 1])


class TestMoments:
    def test_sample_covariance_matches_numpy(self, rng):
        X = rng.normal(size=(50, 3))
        cov = sample_covariance(X)
        np.testing.assert_allclose(cov, np.cov(X, rowvar=False))
        np.testing.assert_array_equal(cov, cov.T)

    def test_sample_covariance_needs_two_rows(self):
        with pytest.raises(TooFewRows):
            sample_covariance(np.ones((1, 2)))

    def test_unit_weights_give_sample_variance(self, rng):
        x = rng.normal(size=(30, 2))
        np.testing.assert_allclose(weighted_variance(x, np.ones(30)), x.var(axis=0, ddof=1))
        np.testing.assert_allclose(weighted_variance(x), x.var(axis=0, ddof=1))

    def test_weighted_mean(self):
        x = np.array([1.0, 2.0, 3.0])
        assert float(weighted_mean(x, np.array([1.0, 1.0, 2.0]))) == pytest.approx(2.25)

    def test_zero_weights_rejected(self):
        with pytest.raises(TooFewUnits):
            weighted_mean(np.ones(3), np.zeros(3))


class TestWorkedExamples:
    def test_constant_fit(self):
        fit = fit_ols(DesignMatrix(np.ones((3, 1))), [3.0, 3.0, 3.0])
        assert fit.coefficients[0] == pytest.approx(3.0)
        assert fit.residual_variance == pytest.approx(0.0, abs=1e-24)

    def test_exact_line(self):
        fit = fit_ols(DesignMatrix(np.column_stack([np.ones(3), [0.0, 1.0, 2.0]])), [1.0, 3.0, 5.0])
        np.testing.assert_allclose(fit.coefficients, [1.0, 2.0], rtol=1e-12)

    def test_treatment_slope_is_mean_difference(self):
        design = DesignMatrix(np.column_stack([np.ones(4), [1.0, 1.0, 0.0, 0.0]]), ("(Intercept)", "W"))
        assert fit_ols(design, [5.0, 3.0, 1.0, 3.0]).coefficient("W") == pytest.approx(2.0)

    def test_intercept_only_logit(self):
        w = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
        fit = fit_logistic(DesignMatrix(np.ones((10, 1))), w)
        assert fit.coefficients[0] == pytest.approx(np.log(0.3 / 0.7), abs=1e-8)

    def test_covariance_examples(self):
        np.testing.assert_array_equal(sample_covariance(np.array([[1.0, 2.0], [1.0, 2.0]])), np.zeros((2, 2)))
        assert sample_covariance(np.array([0.0, 2.0]))[0, 0] == pytest.approx(2.0)


class TestProperties:
    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_partialled_out_slope(self, seed):
        # the slope on one column equals the slope of residualized y on that residualized column
        rng = np.random.default_rng(seed)
        others = np.column_stack([np.ones(150), rng.normal(size=(150, 2))])
        a = others @ np.array([0.5, 1.0, -1.0]) + rng.normal(size=150)
        y = 2.0 * a + others @ np.array([1.0, 0.3, 0.7]) + rng.normal(size=150)
        full = fit_ols(DesignMatrix(np.column_stack([others, a]), ("(Intercept)", "b", "c", "a")), y)

        def residual(v):
            fit = fit_ols(DesignMatrix(others), v)
            return v - others @ fit.coefficients

        partial = fit_ols(DesignMatrix(residual(a), ("a",)), residual(y))
        assert full.coefficient("a") == pytest.approx(partial.coefficient("a"), rel=1e-9)

    @pytest.mark.parametrize("shape", [(5, 3), (50, 4), (3, 6)])
    def test_covariance_is_symmetric_and_positive_semidefinite(self, rng, shape):
        cov = sample_covariance(rng.normal(size=shape) * np.arange(1, shape[1] + 1))
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= -1e-10
