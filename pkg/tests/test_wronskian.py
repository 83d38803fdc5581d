import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qtmq import wronskian as W
from qtmq.errors import DegenerateError, PreconditionError, RegimeError
from conftest import baseline, special_solutions

coeff = st.complex_numbers(min_magnitude=0.1, max_magnitude=5, allow_nan=False, allow_infinity=False)


def fd_jacobian(f, x, h=1e-7):
    """Complex-step-free central differences; the maps are holomorphic."""
    cols = []
    for j in range(len(x)):
        dx = np.zeros_like(x)
        dx[j] = h
        cols.append((f(x + dx) - f(x - dx)) / (2 * h))
    return np.array(cols).T


@pytest.mark.parametrize("N", [2, 4, 6])
def test_reduced_jacobian_matches_finite_differences(N, rng):
    system = W.assemble_reduced_system(baseline(N))
    x = rng.standard_normal(system.size) + 1j * rng.standard_normal(system.size)
    J = system.jacobian(x)
    assert np.allclose(J, fd_jacobian(system, x), atol=1e-6 * max(1, np.abs(J).max()))
    Jall = system.jacobian(x, rows=N - 1)
    assert np.allclose(Jall, fd_jacobian(system.residual_rows, x), atol=1e-6 * max(1, np.abs(Jall).max()))


@pytest.mark.parametrize("N,sector", [(2, 0), (4, 1), (4, -1), (6, 2)])
def test_full_jacobian_matches_finite_differences(N, sector, rng):
    system = W.assemble_full_system(baseline(N), sector)
    x = rng.standard_normal(system.size) + 1j * rng.standard_normal(system.size)
    J = system.jacobian(x)
    assert np.allclose(J, fd_jacobian(system, x), atol=1e-6 * max(1, np.abs(J).max()))


def test_reduced_rows_are_mirror_symmetric(rng):
    system = W.assemble_reduced_system(baseline(8))
    x = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    G = system.residual_rows(x)
    assert np.allclose(G, G[::-1], atol=1e-10 * np.abs(G).max())


def test_reduced_matches_full_on_reciprocal_pairs(rng):
    p = baseline(6)
    red, full = W.assemble_reduced_system(p), W.assemble_full_system(p, 0)
    x = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    ep = red.full(x)
    em = ep[::-1] / ep[-1]
    F = full(np.concatenate([ep[1:], em[1:]]))
    # reduced rows are the full rows multiplied through by e_n
    assert np.allclose(red.residual_rows(x), ep[-1] * F[:-1], atol=1e-10 * max(1, np.abs(F).max()))


def test_zero_field_rejected():
    with pytest.raises(RegimeError):
        W.assemble_reduced_system(baseline(4, h=0.0))


def test_sector_range():
    with pytest.raises(PreconditionError):
        W.assemble_full_system(baseline(4), 3)


def test_expected_degrees():
    p = baseline(6)
    assert W.expected_degree(p, 1, "plus") == 2 and W.expected_degree(p, 1, "minus") == 4


def test_binomial_rhs_n2():
    rhs = W.binomial_rhs(baseline(2))
    assert len(rhs) == 3


@settings(max_examples=60, deadline=None)
@given(st.lists(coeff, min_size=1, max_size=7))
def test_roots_roundtrip(xs):
    x = np.array(xs)
    poly = W.QPolynomial(W.coeffs_from_roots(x))
    r = W.roots(poly)
    assert np.allclose(W.coeffs_from_roots(r), poly.coeffs, atol=1e-7 * np.abs(poly.coeffs).max())
    z = 0.37 - 0.21j
    assert np.isclose(poly(z), np.prod(1 - x * z), rtol=1e-9, atol=1e-12)


def test_roots_degenerate():
    with pytest.raises(DegenerateError):
        W.roots(W.QPolynomial([1.0, 2.0, 1e-20]))


@settings(max_examples=40, deadline=None)
@given(st.lists(coeff, min_size=1, max_size=6))
def test_reciprocal_involution(xs):
    poly = W.QPolynomial(W.coeffs_from_roots(np.array(xs)))
    back = poly.reciprocal().reciprocal()
    assert np.allclose(back.coeffs, poly.coeffs, rtol=1e-10)
    z = 1.3 + 0.2j
    rec = poly.reciprocal()
    assert np.isclose(rec(z), (-z) ** poly.degree * poly(1 / z) / poly.coeffs[-1])


def test_qpolynomial_requires_unit_constant():
    with pytest.raises(PreconditionError):
        W.QPolynomial([2.0, 1.0])


def _sol(vec, res=1e-14):
    p = baseline(2)
    ep = np.array([1.0, vec])
    return W.WronskianSolution(W.QPolynomial(ep), W.QPolynomial(ep[::-1] / ep[-1]), res, {}, {})


def test_dedup_merges_near_copies_and_keeps_best():
    a, b, c = _sol(2.0, 1e-12), _sol(2.0 + 1e-9, 1e-15), _sol(-3.0)
    out = W.dedup([a, c, b])
    assert len(out) == 2
    assert any(s.residual_full == 1e-15 for s in out)


def test_dedup_order_is_input_independent():
    sols = [_sol(v) for v in (2.0, -3.0, 0.5j, 1 + 1j)]
    keys = lambda out: [complex(s.e_plus.coeffs[1]) for s in out]  # noqa: E731
    assert keys(W.dedup(sols)) == keys(W.dedup(sols[::-1]))


@pytest.mark.parametrize("N", [2, 4, 6])
def test_solution_count_small(N):
    sols = special_solutions(N)
    assert len(sols) == 2 ** (N // 2)
    for s in sols:
        assert s.residual_full < 1e-10
        assert s.flags["reciprocal"]


def test_solutions_closed_under_conjugation_map():
    # the set is invariant under (Q+, Q-) -> (conj Q-, conj Q+), whose fixed points carry the cce flag
    sols = special_solutions(6)
    vecs = [s.vector() for s in sols]
    for s in sols:
        image = np.conj(np.concatenate([s.e_minus.coeffs[1:], s.e_plus.coeffs[1:]]))
        assert min(np.linalg.norm(image - v) for v in vecs) < 1e-6 * np.linalg.norm(image)


def test_solver_is_deterministic_and_job_independent():
    system = W.assemble_reduced_system(baseline(4))
    cfg = W.SolverConfig(n_starts=300, seed=7)
    a = W.solve_multistart(system, cfg, chunk=100)
    b = W.solve_multistart(system, cfg, jobs=2, chunk=100)
    assert [s.vector().tolist() for s in a] == [s.vector().tolist() for s in b]
    assert a.failures == b.failures


def test_full_sector_system_solves():
    system = W.assemble_full_system(baseline(4), 1)
    sols = W.solve_multistart(system, W.SolverConfig(n_starts=512, seed=1))
    assert len(sols) >= 1
    for s in sols:
        assert s.sector == 1
        assert s.e_plus.degree == 1 and s.e_minus.degree == 3
        assert s.residual_full < 1e-10


def test_start_scale_is_positive():
    s = W.assemble_reduced_system(baseline(8)).start_scale()
    assert np.all(s > 0) and len(s) == 4
    assert math.isclose(s[1], 6.0 * abs(baseline(8).w * baseline(8).q) ** 0, rel_tol=1e-12)
