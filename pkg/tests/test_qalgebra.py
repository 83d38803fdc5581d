import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qtmq import qalgebra as QA
from qtmq.errors import (DividedPowerOverflow, InvalidCutoff, PoleError, PreconditionError,
                          SingularError)
from qtmq.params import ModelParams, dense_limit, q_factorial, q_number

P = ModelParams(N=4, gamma=0.7, beta=1.0, h=0.0)
SWAP = np.eye(4)[[0, 2, 1, 3]]

finite_z = st.complex_numbers(min_magnitude=0.2, max_magnitude=3.0, allow_nan=False, allow_infinity=False)


def _r12(z, p=P):
    return np.kron(QA.r_matrix(z, p).entries, QA.EYE2)


def _r23(z, p=P):
    return np.kron(QA.EYE2, QA.r_matrix(z, p).entries)


def _r13(z, p=P):
    P23 = np.kron(QA.EYE2, SWAP)
    return P23 @ _r12(z, p) @ P23


@settings(max_examples=40, deadline=None)
@given(finite_z, finite_z, st.floats(0.1, 3.0))
def test_yang_baxter(z1, z2, gamma):
    p = P.replace(gamma=gamma)
    try:
        lhs = _r12(z1 / z2, p) @ _r13(z1, p) @ _r23(z2, p)
        rhs = _r23(z2, p) @ _r13(z1, p) @ _r12(z1 / z2, p)
    except PoleError:
        return
    scale = max(1.0, np.abs(lhs).max())
    assert np.abs(lhs - rhs).max() < 1e-9 * scale


def test_r_matrix_regular_point_is_permutation():
    assert np.allclose(QA.r_matrix(1.0, P).entries, SWAP)


def test_r_matrix_pole():
    with pytest.raises(PoleError):
        QA.r_matrix(P.q ** -2, P)


@settings(max_examples=30, deadline=None)
@given(finite_z)
def test_r_dual_is_partial_transpose_of_inverse(z):
    try:
        dual = QA.r_dual(z, P).entries
    except (PoleError, SingularError):
        return
    inv = QA.partial_transpose(dual, 1)
    r = QA.r_matrix(z, P).entries
    assert np.allclose(inv @ r, np.eye(4), atol=1e-8 * max(1, np.abs(inv).max()))


def test_r_dual_rejects_zero():
    with pytest.raises(PreconditionError):
        QA.r_dual(0, P)


@pytest.mark.parametrize("d", [2, 3, 4])
def test_spin_rep_relations(d):
    e, f, qh = QA.spin_rep(d, P)
    q = P.q
    assert np.allclose(qh @ e @ np.linalg.inv(qh), q ** 2 * e)
    assert np.allclose(e @ f - f @ e, (qh - np.linalg.inv(qh)) / (q - 1 / q))


def test_l_ops_spin_half_proportional_to_r():
    # the d = 2 intertwiner is the six-vertex R-matrix up to a scalar and a diagonal gauge
    L, _ = QA.l_ops(0.8, 2, P)
    m = L.entries
    assert np.count_nonzero(np.abs(m) > 1e-12) == 6


@pytest.mark.parametrize("i", ["1", "0"])
def test_loop_generator_relations(i):
    g = QA.loop_generators(P)
    E, F, K = g["E" + i], g["F" + i], g["K" + i]
    q = P.q
    Kinv = np.linalg.inv(K)
    assert np.abs(K @ E @ Kinv - q ** 2 * E).max() < 1e-12
    assert np.abs(E @ F - F @ E - (K - Kinv) / (q - 1 / q)).max() < 1e-12


def test_mixed_generators_commute():
    g = QA.loop_generators(P)
    assert np.abs(g["E1"] @ g["F0"] - g["F0"] @ g["E1"]).max() < 1e-12


def test_rho_plus_cutoff():
    with pytest.raises(InvalidCutoff):
        QA.rho_plus(1, 0.5, P)


def test_q_l_ops_root_of_unity_truncation():
    p = ModelParams.root_of_unity(N=2, ell=3)
    rep = QA.rho_plus(p.ellprime, 0.5, p)
    assert rep["e0"].shape == (p.ellprime, p.ellprime)
    L, Ls = QA.q_l_ops(0.9, 0.5, p.ellprime, p)
    assert L.d_aux == p.ellprime and Ls.d_aux == p.ellprime


def test_divided_power_validation():
    p = ModelParams.root_of_unity(N=2, ell=3)
    with pytest.raises(PreconditionError):
        QA.divided_power("E1", p.ellprime, P, [1e-2])
    with pytest.raises(PreconditionError):
        QA.divided_power("E1", p.ellprime, p, [1e-3, 1e-2])
    with pytest.raises(DividedPowerOverflow):
        QA.divided_power("E1", p.ellprime, p.replace(N=6), [1e-2], overflow=1e-3)


@given(st.integers(0, 12), st.floats(0.05, 3.0))
def test_q_number_limits(k, gamma):
    q = np.exp(1j * gamma)
    assert np.isclose(q_number(k, q), np.sin(k * gamma) / np.sin(gamma), atol=1e-9)


def test_q_factorial_classical_limit():
    assert np.isclose(q_factorial(5, np.exp(1e-6j)), math.factorial(5), rtol=1e-9)


def test_root_of_unity_validation():
    with pytest.raises(PreconditionError):
        ModelParams(N=4, gamma=0.5, ell=3)
    with pytest.raises(PreconditionError):
        ModelParams(N=3, gamma=0.5)
    assert ModelParams.root_of_unity(4, 3).ellprime == 3


def test_dense_limit_env(monkeypatch):
    monkeypatch.setenv("QTM_DENSE_LIMIT", "7")
    assert dense_limit() == 7
    monkeypatch.delenv("QTM_DENSE_LIMIT")
    assert dense_limit() == 12
