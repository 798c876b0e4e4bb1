import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbmdual.model import (InvalidDensityError, RbmSpec, SPDError, SpecError, dual_reflection, fmt_num,
                           reversed_drift_candidates, skew_check, sym_sqrt, validate_assumption)

from conftest import SPEC_GEN, SPEC_SKEW


def test_skew_passes_validation():
    rep = validate_assumption(SPEC_SKEW)
    assert rep.passed
    assert all(line.startswith("PASS") for line in rep.lines())


def test_gen_passes_validation_with_expected_inverse():
    rep = validate_assumption(SPEC_GEN)
    assert rep.passed
    w = np.linalg.solve(SPEC_GEN.R_arr, SPEC_GEN.b_arr)
    np.testing.assert_allclose(w, np.array([-0.5, -1.3]) / 1.15, rtol=1e-14)


def test_positive_drift_fails_with_witness():
    spec = SPEC_SKEW.with_(b=(1.0, -1.0))
    rep = validate_assumption(spec)
    assert not rep.passed
    [bad] = rep.failed()
    assert "R^-1 b" in bad.name and "1" in bad.witness


def test_zero_drift_fails():
    assert not validate_assumption(SPEC_SKEW.with_(b=(0.0, 0.0))).passed


def test_not_diagonally_dominant():
    spec = RbmSpec((-1, -1), ((1, 1), (1, 1)), ((1, 0), (0, 1)))
    names = [c.name for c in validate_assumption(spec).failed()]
    assert "A strictly diagonally dominant" in names


def test_singular_R():
    spec = RbmSpec((-1, -1), ((1, 0), (0, 1)), ((1, 1), (1, 1)))
    names = [c.name for c in validate_assumption(spec).failed()]
    assert "R invertible" in names


def test_dual_row_sum_condition_checked():
    # R has positive row sums but R* = 2 diag(R) - R does not
    spec = RbmSpec((-1, -1), ((1, 0), (0, 1)), ((1, 1.5), (0, 1)))
    failed = validate_assumption(spec).failed()
    assert any("R*" in c.name and "row 0" in c.witness for c in failed)


@pytest.mark.parametrize("A, R, msg", [
    (((1, 0),), ((1, 0), (0, 1)), "A"),
    (((1, 0), (0, 1)), ((1, 0), (0,)), "R: row 1"),
    (((1, 0.3), (0.1, 1)), ((1, 0), (0, 1)), "not symmetric"),
])
def test_spec_shape_errors(A, R, msg):
    with pytest.raises(SpecError, match=msg):
        RbmSpec((-1, -1), A, R)


def test_skew_density():
    p = skew_check(SPEC_SKEW)
    np.testing.assert_allclose(p.eta, [2.0, 2.0])
    assert p.normalizer == pytest.approx(4.0)
    assert p(np.array([[0.5, 0.25]]))[0] == pytest.approx(4 * np.exp(-1.5))
    np.testing.assert_allclose(p.mean(), [0.5, 0.5])


def test_gen_has_no_product_density():
    assert skew_check(SPEC_GEN) is None


def test_nonpositive_eta_raises():
    with pytest.raises(InvalidDensityError):
        skew_check(SPEC_SKEW.with_(b=(1.0, -1.0)))


def test_density_integrates_to_one():
    p = skew_check(RbmSpec((-1.5, -0.5), ((1, 0), (0, 2)), ((1, 0), (0, 1))))
    g = np.linspace(0, 40, 4001)
    X, Y = np.meshgrid(g, g, indexing="ij")
    vals = p(np.stack([X.ravel(), Y.ravel()], axis=1)).reshape(X.shape)
    assert np.trapezoid(np.trapezoid(vals, g, axis=1), g) == pytest.approx(1.0, rel=1e-4)


def test_reversed_candidates_skew():
    c = reversed_drift_candidates(SPEC_SKEW)
    np.testing.assert_allclose(c["+"], [-1.0, -1.0])
    np.testing.assert_allclose(c["-"], [3.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4))
def test_dual_reflection_is_involution(vals):
    R = np.array(vals).reshape(2, 2)
    np.testing.assert_array_equal(dual_reflection(dual_reflection(R)), R)
    np.testing.assert_array_equal(dual_reflection(R), 2 * np.diag(np.diag(R)) - R)


def test_dual_reflection_tuple_form():
    assert dual_reflection(((1, 0.5), (-0.3, 1))) == ((1, -0.5), (0.3, 1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=9, max_size=9))
def test_sym_sqrt_squares_back(vals):
    B = np.array(vals).reshape(3, 3)
    A = B @ B.T + np.eye(3)
    S = sym_sqrt(A)
    np.testing.assert_allclose(S @ S, A, atol=1e-9 * np.abs(A).max())
    np.testing.assert_allclose(S, S.T)


def test_sym_sqrt_rejects_indefinite():
    with pytest.raises(SPDError):
        sym_sqrt([[1, 2], [2, 1]])


def test_fmt_num_round_trips():
    for v in (0.1, 1 / 3, 1e-300, 123456789.123456789):
        assert float(fmt_num(v)) == v
