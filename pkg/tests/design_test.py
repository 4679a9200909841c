# tests/design_test.py
import numpy as np
import pytest

from app.core.errors import DimensionMismatch, InvalidParameter
from app.services.design import Term, build_design, describe_terms, linear_terms, monomial_pool


class TestTerm:
    @pytest.mark.parametrize(
        "term, label",
        [
            (Term.linear(0), "x1"),
            (Term.square(1), "x2^2"),
            (Term.cube(0), "x1^3"),
            (Term.product(1, 0), "x1:x2"),
            (Term((0, 0, 1)), "x1^2:x2"),
            (Term.treatment_interaction(2), "W:x3"),
        ],
    )
    def test_labels(self, term, label):
        assert term.label == label

    def test_columns_are_sorted(self):
        assert Term((2, 0)).columns == (0, 2)
        assert Term((2, 0)) == Term.product(0, 2)

    def test_empty_term_rejected(self):
        with pytest.raises(InvalidParameter):
            Term(())

    def test_evaluate(self):
        X = np.array([[1.0, 2.0], [3.0, -1.0]])
        np.testing.assert_array_equal(Term.product(0, 1).evaluate(X), [2.0, -3.0])
        np.testing.assert_array_equal(Term.treatment_interaction(0).evaluate(X, np.array([0, 1])), [0.0, 3.0])

    def test_evaluate_checks_width(self):
        with pytest.raises(DimensionMismatch):
            Term.linear(3).evaluate(np.ones((2, 2)))


class TestBuildDesign:
    def test_column_order_and_labels(self):
        X = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        W = np.array([1, 0, 1])
        design = build_design(X, [Term.linear(0), Term.square(1)], W, include_treatment=True)
        assert design.column_labels == ("(Intercept)", "W", "x1", "x2^2")
        np.testing.assert_array_equal(design.values[:, 1], W)
        np.testing.assert_array_equal(design.values[:, 3], [4.0, 16.0, 36.0])

    def test_treatment_needs_vector(self):
        with pytest.raises(DimensionMismatch):
            build_design(np.ones((2, 1)), [], include_treatment=True)

    def test_no_columns(self):
        with pytest.raises(InvalidParameter):
            build_design(np.ones((2, 1)), [], intercept=False)


class TestMonomials:
    def test_two_covariates_have_nine_monomials(self):
        pool = monomial_pool(2)
        assert len(pool) == 9
        assert [t.label for t in pool[:5]] == ["x1", "x2", "x1^2", "x1:x2", "x2^2"]

    def test_describe_terms(self):
        assert describe_terms(linear_terms(range(2))) == "1 + x1 + x2"
        assert describe_terms([], intercept=False) == "0"
