import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qtmq import thermo as TH
from qtmq import transfer as T
from qtmq.errors import FitUnstable, PreconditionError, SizeError
from qtmq.params import ModelParams
from conftest import baseline


def test_hamiltonian_conserves_magnetisation():
    p = baseline(2)
    H = TH.build_hxxz(6, p)
    Sz = np.diag(T.sz_values(6))
    assert np.abs(H @ Sz - Sz @ H).max() < 1e-12
    assert np.allclose(H, H.conj().T)


def test_hamiltonian_two_site_spectrum():
    # open two-site bond: 1/2 (sx sx + sy sy) + Delta/2 (sz sz - 1); eigenvalues 0, 0, -Delta +- 1
    p = ModelParams(N=2, gamma=0.7, h=0.0)
    vals = np.sort(np.linalg.eigvalsh(TH.build_hxxz(2, p, periodic=False)))
    d = p.delta
    assert np.allclose(vals, np.sort([0, 0, -d + 1, -d - 1]))


def test_hamiltonian_size_guard():
    with pytest.raises(SizeError):
        TH.build_hxxz(13, baseline(2))


def test_hamiltonian_from_transfer_matrix():
    p = ModelParams(N=2, gamma=0.6, h=0.0)
    H = TH.hamiltonian_from_t(p, 4)
    assert np.linalg.norm(H - TH.build_hxxz(4, p)) < 1e-5 * np.linalg.norm(TH.build_hxxz(4, p))


def test_hamiltonian_from_t_needs_zero_field():
    with pytest.raises(PreconditionError):
        TH.hamiltonian_from_t(baseline(2), 4)


def test_density_trotter_error_decreases():
    p = ModelParams(N=2, gamma=0.6, beta=0.8, h=0.0)
    errs = [TH.density_trotter_error(p, 4, N) for N in (4, 8, 16)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.02


def test_free_energy_against_exact_diagonalisation():
    # f from the QTM vs -ln Z / L for periodic chains; finite-size corrections fall quickly at beta = 1
    f_qtm = TH.free_energy(baseline(2), [4, 6, 8, 10, 12]).f_extrapolated
    assert math.isclose(f_qtm, -1.4470900181470259, rel_tol=0, abs_tol=1e-9)
    f_ed = [-math.log(TH.partition_function_direct(baseline(2), L)) / L for L in (6, 8)]
    assert abs(f_ed[1] - f_qtm) < abs(f_ed[0] - f_qtm) < 5e-3
    assert abs(f_ed[1] - f_qtm) < 1e-3


def test_high_temperature_expansion():
    # beta f = -ln 2 + beta k1 - beta^2 k2 / 2 + O(beta^3), with k1, k2 the infinite-temperature
    # cumulants of H per site (size independent for nearest-neighbour terms once L >= 3)
    p = ModelParams(N=2, gamma=math.pi / 5, beta=1e-2, h=0.4)
    L = 6
    H = TH.build_hxxz(L, p)
    k1 = np.trace(H).real / 2 ** L / L
    k2 = (np.trace(H @ H).real / 2 ** L - (np.trace(H).real / 2 ** L) ** 2) / L
    assert math.isclose(k1, -p.delta / 2, rel_tol=1e-12)
    f = TH.free_energy(p, [4, 6, 8]).f_extrapolated
    series = -math.log(2) + p.beta * k1 - p.beta ** 2 * k2 / 2
    assert abs(p.beta * f - series) < 10 * p.beta ** 3


def test_free_energy_needs_three_points():
    with pytest.raises(FitUnstable):
        TH.free_energy(baseline(2), [4, 6])


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1))
def test_trotter_extrapolate_exact_on_polynomials(a, b, c):
    N = np.array([4, 6, 8, 10])
    vals = a + b / N ** 2 + c / N ** 4
    limit, resid, loo = TH.trotter_extrapolate(N, vals, order=2)
    assert abs(limit - a) < 1e-9 and resid < 1e-9
    assert np.allclose(loo, a, atol=1e-8)


def test_power_iteration_matches_dense():
    p = baseline(8)
    op = T.build_qtm(1.0, p)
    lam, v, log = TH.power_iteration(op, tol=1e-12)
    dense = TH.largest_lambda(p, method="dense")
    assert abs(lam - dense) < 1e-10 * abs(dense)
    assert log.converged and log.iterations == len(log.history) + 1
    assert np.linalg.norm(op.apply(v) - lam * v) < 1e-5


def test_largest_lambda_in_sector_zero():
    rec = T.eig(T.build_qtm(1.0, baseline(4)), keep_vectors=False)
    assert rec.sectors[0] == 0
    assert abs(rec.eigenvalues[0] - 4.393667572235748) < 1e-10


def test_finite_l_check_small_beta():
    p = ModelParams(N=2, gamma=math.pi / 5, beta=0.5, h=0.4)
    out = TH.finite_l_check(p, 2, [4, 6, 8, 10, 12])
    assert out["relative_error"] < 1e-5
    assert out["per_N_error"][0] > out["per_N_error"][-1]
    poly = TH.finite_l_check(p, 2, [4, 6, 8, 10, 12], method="polynomial")
    assert poly["relative_error"] < 1e-4


@given(st.floats(-2, 2), st.floats(0.5, 3), st.floats(-2, 2))
def test_rational_extrapolate_exact_on_pole_sequences(a, c, b):
    # a + b/(N + c) in x = 1/N is (a + (a c + b) x)/(1 + c x), recovered exactly
    N = np.array([4, 6, 8, 10, 12])
    vals = a + b / (N + c)
    assert abs(TH.rational_extrapolate(N, vals) - a) < 1e-8


def test_csv_layout():
    point = TH.free_energy(baseline(2), [4, 6, 8])
    buf = io.StringIO()
    TH.write_csv(point, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "N,Re(lambda),Im(lambda),ln_lambda,f_extrapolated,fit_residual"
    assert len(lines) == 4
    row = lines[1].split(",")
    assert int(row[0]) == 4 and math.isclose(float(row[3]), math.log(float(row[1])), rel_tol=1e-12)
