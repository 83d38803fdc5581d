"""Thermodynamics from the quantum transfer matrix.

Largest eigenvalue (dense or power iteration), free energy with Trotter
extrapolation, and finite-L cross-checks against the XXZ Hamiltonian.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg

from . import transfer as T
from .errors import ConvergenceError, FitUnstable, PowerIterationStall, PreconditionError, SizeError
from .params import ModelParams, dense_limit
from .qalgebra import EYE2, SIGMA_MINUS, SIGMA_PLUS, SIGMA_Z, r_matrix

log = logging.getLogger(__name__)


def _site_op(op: np.ndarray, k: int, L: int) -> np.ndarray:
    return np.kron(np.kron(np.eye(2 ** k), op), np.eye(2 ** (L - k - 1)))


def build_hxxz(L: int, params: ModelParams, periodic: bool = True) -> np.ndarray:
    """``1/2 sum (sx sx + sy sy + Delta (sz sz - 1)) - h/2 sum sz`` on L sites."""
    if L > 12:
        raise SizeError("dense Hamiltonian limited to L <= 12")
    if L < 2:
        raise PreconditionError("need at least two sites")
    delta = params.delta
    dim = 2 ** L
    H = np.zeros((dim, dim), dtype=complex)
    bonds = [(k, k + 1) for k in range(L - 1)] + ([(L - 1, 0)] if periodic else [])
    for i, j in bonds:
        # sx sx + sy sy = 2 (s+ s- + s- s+)
        H += _site_op(SIGMA_PLUS, i, L) @ _site_op(SIGMA_MINUS, j, L)
        H += _site_op(SIGMA_MINUS, i, L) @ _site_op(SIGMA_PLUS, j, L)
        H += 0.5 * delta * (_site_op(SIGMA_Z, i, L) @ _site_op(SIGMA_Z, j, L) - np.eye(dim))
    for k in range(L):
        H -= 0.5 * params.h * _site_op(SIGMA_Z, k, L)
    return H


def classical_t6v(z: complex, L: int, params: ModelParams) -> np.ndarray:
    """Row-to-row transfer matrix ``Tr_0 R_{0L}(z) ... R_{01}(z)``."""
    if L > 10:
        raise SizeError("dense classical transfer matrix limited to L <= 10")
    site = r_matrix(z, params).tensor()
    return T.chain_dense([site] * L, np.ones(2, dtype=complex))


def hamiltonian_from_t(params: ModelParams, L: int, steps=(1e-3, 5e-4), tol: float = 1e-5) -> np.ndarray:
    """``(q - 1/q) t(1)^{-1} dt/dz`` at ``z = 1`` by extrapolated central differences."""
    if params.h != 0:
        raise PreconditionError("the Hamiltonian-from-t relation is stated at zero field")
    t1_inv = np.linalg.inv(classical_t6v(1.0, L, params))

    def central(hs):
        return (classical_t6v(1 + hs, L, params) - classical_t6v(1 - hs, L, params)) / (2 * hs)

    h1, h2 = steps
    d1, d2 = central(h1), central(h2)
    ratio = (h1 / h2) ** 2
    rich = (ratio * d2 - d1) / (ratio - 1)
    spread = np.linalg.norm(rich - d2) / max(np.linalg.norm(rich), 1e-300)
    if spread > tol:
        raise ConvergenceError(f"derivative extrapolation disagrees by {spread:.2e}")
    q = params.q
    return (q - 1 / q) * t1_inv @ rich


def density_trotter_error(params: ModelParams, L: int, N: int) -> float:
    """``||(t(1)^{-1} t(exp(-beta'/N)))^N - exp(-beta H)|| / ||exp(-beta H)||``."""
    q = params.q
    bprime = params.beta * (q - 1 / q)
    step = np.linalg.solve(classical_t6v(1.0, L, params), classical_t6v(np.exp(-bprime / N), L, params))
    approx = np.linalg.matrix_power(step, N)
    exact = scipy.linalg.expm(-params.beta * build_hxxz(L, params.replace(h=0.0)))
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


# ---------------------------------------------------------------------------
# largest eigenvalue


@dataclasses.dataclass
class PowerLog:
    iterations: int
    history: List[float]
    converged: bool


def power_iteration(op: T.ManyBodyOperator, tol: float = 1e-10, max_iter: int = 5000, seed: int = 0,
                    sector: Optional[int] = 0):
    """Dominant eigenvalue by power iteration with Rayleigh-quotient ratio test.

    The start vector is supported on ``sector`` (``None`` for the full
    space).  Returns ``(eigenvalue, vector, PowerLog)``.
    """
    rng = np.random.default_rng(seed)
    dim = 2 ** op.N
    v = np.zeros(dim, dtype=complex)
    idx = np.arange(dim) if sector is None else T.sector_indices(op.N, sector)
    v[idx] = rng.standard_normal(len(idx)) + 1j * rng.standard_normal(len(idx))
    v /= np.linalg.norm(v)
    lam_prev, history = None, []
    for it in range(1, max_iter + 1):
        u = op.apply(v)
        lam = np.vdot(v, u)
        nrm = np.linalg.norm(u)
        if nrm == 0:
            raise PowerIterationStall("iteration collapsed to the zero vector")
        v = u / nrm
        if lam_prev is not None:
            change = abs(lam - lam_prev) / abs(lam)
            history.append(float(change))
            if change < tol:
                resid = np.linalg.norm(op.apply(v) - lam * v) / abs(lam)
                if resid < 1e3 * math.sqrt(tol):
                    log.info("power iteration converged after %d steps (residual %.2e)", it, resid)
                    return complex(lam), v, PowerLog(it, history, True)
        lam_prev = lam
    raise PowerIterationStall(f"no convergence in {max_iter} steps (last change {history[-1]:.2e}); "
                              "dominant eigenvalue may be degenerate in modulus")


def largest_lambda(params: ModelParams, z: complex = 1.0, method: str = "auto", tol: float = 1e-10,
                   seed: int = 0) -> complex:
    """Largest-modulus eigenvalue of ``tau(z)``.

    ``method`` is ``"dense"``, ``"power"`` or ``"auto"`` (dense up to the
    dense limit).  The dominant state lies in the ``S_A = 0`` sector, which
    the dense path checks and the power path uses as starting support.
    """
    op = T.build_qtm(z, params)
    if method == "auto":
        method = "dense" if params.N <= dense_limit() else "power"
    if method == "dense":
        rec = T.eig(op, keep_vectors=False)
        if rec.sectors[0] != 0:
            log.warning("dominant eigenvalue found in sector %s", rec.sectors[0])
        return complex(rec.eigenvalues[0])
    if method == "power":
        lam, _, plog = power_iteration(op, tol=tol, seed=seed)
        return lam
    raise PreconditionError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# free energy


@dataclasses.dataclass
class ThermoPoint:
    beta: float
    h: float
    gamma: float
    N_list: List[int]
    lambda_N: List[complex]
    f_extrapolated: float
    fit_diagnostics: Dict

    @property
    def ln_lambda(self) -> np.ndarray:
        return np.log(np.asarray(self.lambda_N))


def trotter_extrapolate(N_list: Sequence[int], values: Sequence[complex], order: int = 2, power: int = 2):
    """Fit ``values`` as a polynomial of degree ``order`` in ``1/N^power`` and return the constant.

    Returns ``(limit, rms fit residual, leave-one-out limits)``.
    """
    x = 1.0 / np.asarray(N_list, dtype=float) ** power
    y = np.asarray(values, dtype=complex)
    deg = min(order, len(x) - 1)
    coef = np.polyfit(x, y, deg)
    resid = float(np.sqrt(np.mean(np.abs(np.polyval(coef, x) - y) ** 2)))
    loo = []
    if len(x) > deg + 1:
        for i in range(len(x)):
            m = np.arange(len(x)) != i
            loo.append(np.polyfit(x[m], y[m], deg)[-1])
    return coef[-1], resid, np.array(loo)


def free_energy(params: ModelParams, N_list: Sequence[int], order: int = 2, loo_tol: float = 1e-4,
                method: str = "auto") -> ThermoPoint:
    """``f = -(1/beta) lim_N ln Lambda_N`` with a fit in ``1/N^2``."""
    N_list = sorted(int(N) for N in N_list)
    if len(N_list) < 3 or any(N % 2 for N in N_list):
        raise FitUnstable("free energy needs at least three even Trotter numbers")
    lams = [largest_lambda(params.replace(N=N), 1.0, method=method) for N in N_list]
    for N, lam in zip(N_list, lams):
        if abs(lam.imag) > 1e-10 * abs(lam) or lam.real <= 0:
            log.warning("Lambda_%d = %s is not real-positive", N, lam)
    limit, resid, loo = trotter_extrapolate(N_list, np.log(lams), order)
    shift = float(np.max(np.abs(loo - limit))) if len(loo) else None
    diag = {"order": min(order, len(N_list) - 1), "variable": "1/N^2", "fit_residual": resid,
            "loo_shift": shift, "imag_ln_lambda": float(limit.imag)}
    if shift is not None and shift > loo_tol:
        raise FitUnstable(f"leave-one-out shift {shift:.2e} exceeds {loo_tol:g}")
    return ThermoPoint(params.beta, params.h, params.gamma, N_list, lams, float(-limit.real / params.beta), diag)


def partition_function_direct(params: ModelParams, L: int) -> float:
    vals = np.linalg.eigvalsh(build_hxxz(L, params))
    return float(np.sum(np.exp(-params.beta * vals)))


def partition_function_qtm(params: ModelParams, L: int) -> complex:
    """``Tr tau(1; w)^L`` at the Trotter number of ``params`` (sector by sector)."""
    op = T.build_qtm(1.0, params)
    total = 0j
    for s in T.sectors(params.N):
        B = op.sector_block(s)
        total += np.trace(np.linalg.matrix_power(B, L))
    return complex(total)


def partition_function_classical(params: ModelParams, L: int) -> complex:
    """``Tr (t(1)^{-1} t(exp(-beta'/N)))^N`` for the row transfer matrix at zero field.

    A different Trotter product from ``Tr tau^L``: both tend to ``Tr exp(-beta H)``
    as N grows, but they coincide at finite N only for L = 2.
    """
    if params.h != 0:
        raise PreconditionError("classical Trotter product is built at zero field")
    q, N = params.q, params.N
    step = np.linalg.solve(classical_t6v(1.0, L, params), classical_t6v(np.exp(-params.beta * (q - 1 / q) / N), L, params))
    return complex(np.trace(np.linalg.matrix_power(step, N)))


def rational_extrapolate(N_list: Sequence[int], values: Sequence[complex], power: int = 1) -> complex:
    """Value at ``1/N^power = 0`` of the near-diagonal rational interpolant through all points.

    Numerator degree ``ceil((n-1)/2)``, denominator degree ``floor((n-1)/2)``
    (the Bulirsch-Stoer table's last entry).  Suited to Trotter sequences whose
    expansion has a singularity close to the sampled range.
    """
    x = 1.0 / np.asarray(N_list, dtype=float) ** power
    y = np.asarray(values, dtype=complex)
    k = (len(x) - 1) // 2
    m = len(x) - 1 - k
    A = np.hstack([x[:, None] ** np.arange(m + 1), -(y[:, None] * x[:, None] ** np.arange(1, k + 1))])
    # A lower-degree exact fit leaves the system rank deficient; every solution then
    # shares the constant term, so the minimum-norm solution is still the limit.
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    if np.linalg.norm(A @ coef - y) > 1e-8 * max(1.0, float(np.linalg.norm(y))):
        raise FitUnstable("no rational interpolant passes through these points")
    return complex(coef[0])


def finite_l_check(params: ModelParams, L: int, N_list: Sequence[int], method: str = "rational",
                   power: int = 1) -> Dict:
    """Trotter-extrapolated ``Tr tau^L`` against the direct partition function.

    The trace carries a first-order Trotter error at L = 2 (second order for
    L >= 3), with large higher coefficients at beta ~ 1, so the default is
    rational extrapolation in ``1/N``; ``method="polynomial"`` interpolates
    with a polynomial through all points instead.
    """
    values = [partition_function_qtm(params.replace(N=N), L) for N in N_list]
    if method == "rational":
        limit = rational_extrapolate(N_list, values, power)
    elif method == "polynomial":
        limit = trotter_extrapolate(N_list, values, len(N_list) - 1, power)[0]
    else:
        raise PreconditionError(f"unknown method {method!r}")
    direct = partition_function_direct(params, L)
    errors = [abs(v - direct) / direct for v in values]
    return {"direct": direct, "extrapolated": limit, "relative_error": float(abs(limit - direct) / direct),
            "per_N_error": errors, "N_list": list(N_list), "variable": f"1/N^{power}", "method": method}


THERMO_COLUMNS = ("N", "Re(lambda)", "Im(lambda)", "ln_lambda", "f_extrapolated", "fit_residual")


def thermo_rows(point: ThermoPoint) -> List[List]:
    rows = []
    for N, lam in zip(point.N_list, point.lambda_N):
        rows.append([N, lam.real, lam.imag, float(np.log(lam).real), point.f_extrapolated,
                     point.fit_diagnostics["fit_residual"]])
    return rows


def write_csv(point: ThermoPoint, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(THERMO_COLUMNS)
    for row in thermo_rows(point):
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
