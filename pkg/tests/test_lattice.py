import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rbmdual.lattice import (BoundaryConstants, ConstantsError, DomainError, LatticeParams, ScaleTooSmallError,
                             StateCapError, boundary_rates, build_chain, build_dual_chain, compile_chain,
                             dual_boundary_rates, dual_interior_rates, dump_rows, enumerate_sites,
                             interior_rates, min_scale, potential, table_drift, table_second_moment)
from rbmdual.model import RbmSpec, validate_assumption

from conftest import SPEC_1D, SPEC_GEN, SPEC_GEN_Q, SPEC_SKEW, SPEC_SKEW_Q

EXACT = BoundaryConstants(F(1), F(1, 2))


def _approx(table):
    return {k: pytest.approx(float(v)) for k, v in table.items()}


def test_interior_rates_gen():
    t = interior_rates(SPEC_GEN, 100)
    assert t == _approx({(1, 0): 40, (-1, 0): 50, (0, 1): 40, (0, -1): 50, (1, 1): 10, (-1, -1): 10})
    assert (1, -1) not in t and (-1, 1) not in t
    np.testing.assert_allclose(table_drift(t, 100), [-1, -1])


def test_interior_rates_skew_small_n():
    assert interior_rates(SPEC_SKEW, 4) == _approx({(1, 0): 2, (-1, 0): 4, (0, 1): 2, (0, -1): 4})


def test_face_rates_gen():
    t = boundary_rates(SPEC_GEN, 100, (0,))
    assert t == _approx({(1, 1): 20, (1, 0): 80, (0, 1): 100, (0, -1): 150})
    np.testing.assert_allclose(table_drift(t, 100), [10, -3])


def test_face_rates_skew():
    t = boundary_rates(SPEC_SKEW, 4, (0,))
    assert t == _approx({(1, 0): 4, (0, 1): 4, (0, -1): 4})
    np.testing.assert_allclose(table_drift(t, 4), [2, 0])


def test_corner_mean_gen():
    t = boundary_rates(SPEC_GEN_Q, 100, (0, 1), EXACT)
    assert table_drift(t, 100) == [15, 7]
    assert t == {(1, 1): 35, (1, 0): 115, (0, 1): 35}


def test_dual_face_rates_gen():
    t = dual_boundary_rates(SPEC_GEN_Q, 100, (0,), EXACT)
    assert t[(1, 0)] == F(250, 3) and t[(1, 1)] == F(50, 3)
    assert t[(1, 0)] + t[(1, 1)] == 100
    # matched c0: dual and primal face totals agree
    assert sum(t.values()) == sum(boundary_rates(SPEC_GEN_Q, 100, (0,), EXACT).values()) == 350


def test_skew_dual_is_transpose_with_same_boundary():
    dual, primal = dual_interior_rates(SPEC_SKEW, 16), interior_rates(SPEC_SKEW, 16)
    assert dual == {tuple(-x for x in v): r for v, r in primal.items()}
    np.testing.assert_allclose(table_drift(dual, 16), [1, 1])
    for I in [(0,), (1,), (0, 1)]:
        assert dual_boundary_rates(SPEC_SKEW, 16, I) == boundary_rates(SPEC_SKEW, 16, I)


def test_dual_face_tangential_mean_gen():
    # raising mass on e1 + e2 shifts the tangential mean off sqrt(n) r*_21 = 3
    t = dual_boundary_rates(SPEC_GEN_Q, 100, (0,), EXACT)
    assert table_drift(t, 100) == [10, F(8, 3)]


def test_min_scale():
    assert min_scale(SPEC_SKEW) == 1
    assert min_scale(SPEC_GEN) == 1
    assert min_scale(RbmSpec((3.0,), ((1.0,),), ((1.0,),))) == 36


def test_scale_too_small():
    spec = RbmSpec((3.0,), ((1.0,),), ((1.0,),))
    with pytest.raises(ScaleTooSmallError):
        build_chain(spec, LatticeParams(35, 4))
    build_chain(spec, LatticeParams(36, 4))


def test_constants_must_be_positive():
    with pytest.raises(ConstantsError):
        BoundaryConstants(c0=0.0)
    with pytest.raises(ConstantsError):
        BoundaryConstants(corner_share=1.0)


def test_lattice_params():
    p = LatticeParams.from_K(64, 4.0)
    assert (p.m, p.h, p.K, p.n_states(2)) == (32, 0.125, 4.0, 33 * 33)
    with pytest.raises(DomainError):
        LatticeParams.from_K(64, 0.3)


def test_enumeration_is_lexicographic():
    s = enumerate_sites(LatticeParams(4, 2), 2)
    assert [tuple(r) for r in s] == sorted(tuple(r) for r in s)
    assert len(s) == 9
    with pytest.raises(StateCapError) as e:
        enumerate_sites(LatticeParams(4, 2), 2, cap=8)
    assert e.value.required == 9


def test_site_outside_lattice():
    chain = build_chain(SPEC_SKEW, LatticeParams(4, 2))
    with pytest.raises(DomainError):
        chain.rates((3, 0))


def test_truncation_removes_outward_jumps():
    chain = build_chain(SPEC_GEN, LatticeParams(16, 3))
    for site in [(0, 0), (3, 3), (0, 3), (3, 1)]:
        for v in chain.rates(site):
            new = np.add(site, v)
            assert np.all((new >= 0) & (new <= 3))


@pytest.mark.parametrize("spec", [SPEC_SKEW_Q, SPEC_GEN_Q])
@pytest.mark.parametrize("n", [4, 16, 100])
def test_rate_identities_exact(spec, n):
    t = interior_rates(spec, n)
    assert table_drift(t, n) == list(spec.b)
    t0 = interior_rates(spec.with_(b=(F(0), F(0))), n)
    assert table_second_moment(t0, n) == [list(r) for r in spec.A]
    for I in [(0,), (1,), (0, 1)]:
        rbar = [sum(spec.R[i][l] for l in I) for i in range(2)]
        assert table_drift(boundary_rates(spec, n, I, EXACT), n) == [math.isqrt(n) * r for r in rbar]
        assert all(type(r) is F for r in boundary_rates(spec, n, I, EXACT).values())


def test_dual_interior_is_transpose():
    cp = compile_chain(build_chain(SPEC_GEN, LatticeParams(16, 8)))
    cd = compile_chain(build_dual_chain(cp.chain))
    for s, site in enumerate(cp.sites):
        if np.any(site <= 1) or np.any(site >= 7):
            continue
        for k in range(cd.rate.shape[1]):
            if cd.rate[s, k] == 0:
                continue
            y = cd.dest[s, k]
            back = [cp.rate[y, j] for j in range(cp.rate.shape[1]) if cp.dest[y, j] == s]
            assert back == [pytest.approx(cd.rate[s, k])]


def test_potential_vanishes_off_boundary_layer():
    cp = compile_chain(build_chain(SPEC_GEN, LatticeParams(16, 8)))
    V = potential(cp)
    inner = np.all((cp.sites >= 2) & (cp.sites <= 6), axis=1)
    np.testing.assert_allclose(V[inner], 0.0, atol=1e-12)
    assert np.abs(V[~inner]).max() > 0


def test_dump_rows_sorted():
    cp = compile_chain(build_chain(SPEC_GEN, LatticeParams(4, 2)))
    rows = list(dump_rows(cp))
    keys = [(s, v) for s, v, _ in rows]
    assert keys == sorted(keys)
    assert all(r > 0 for _, _, r in rows)


def test_one_dimensional_tables():
    t = interior_rates(SPEC_1D, 1)
    assert t == _approx({(1,): 0.5, (-1,): 1.5})
    assert boundary_rates(SPEC_1D, 4, (0,)) == _approx({(1,): 4})


@st.composite
def valid_specs(draw):
    """2-d specs with small rational entries satisfying the standing assumption."""
    q = st.integers(-9, 9).map(lambda k: F(k, 10))
    a11, a22 = draw(st.integers(1, 4)), draw(st.integers(1, 4))
    a12 = draw(q)
    r12, r21 = draw(q), draw(q)
    b = (F(draw(st.integers(-20, -1)), 10), F(draw(st.integers(-20, -1)), 10))
    spec = RbmSpec(b, ((F(a11), a12), (a12, F(a22))), ((F(1), r12), (r21, F(1))))
    assume(validate_assumption(spec).passed)
    return spec


@settings(max_examples=60, deadline=None)
@given(valid_specs(), st.sampled_from([4, 16, 25, 100]))
def test_rate_identities_random_specs(spec, n):
    assume(n >= min_scale(spec))
    assert table_drift(interior_rates(spec, n), n) == list(spec.b)
    t0 = interior_rates(spec.with_(b=(F(0), F(0))), n)
    assert table_second_moment(t0, n) == [list(r) for r in spec.A]
    rn = math.isqrt(n)
    for I in [(0,), (1,), (0, 1)]:
        t = boundary_rates(spec, n, I, EXACT)
        assert all(r >= 0 for r in t.values())
        assert table_drift(t, n) == [rn * sum(spec.R[i][l] for l in I) for i in range(2)]
        td = dual_boundary_rates(spec, n, I, EXACT)
        assert all(r >= 0 for r in td.values())
        if len(I) == 1:
            i = I[0]
            assert sum(r for v, r in td.items() if v[i] == 1) == n * spec.R[i][i]
            assert sum(td.values()) == sum(t.values())
