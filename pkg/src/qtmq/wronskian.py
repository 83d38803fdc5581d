"""Quadratic Wronskian systems for the Q-polynomial coefficients.

Unknowns are the elementary symmetric polynomials ``e_k`` of the Bethe
roots, with ``Q(z) = sum_k e_k (-z)^k`` and ``e_0 = 1``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DegenerateError, NoConvergence, PreconditionError, RegimeError
from .params import CRITICAL, ModelParams

log = logging.getLogger(__name__)

PLUS = "plus"
MINUS = "minus"


@dataclasses.dataclass(frozen=True)
class QPolynomial:
    """Eigenvalue polynomial ``Q^{+-}(z)`` in the ``(-z)^k`` convention."""

    coeffs: np.ndarray
    sector: int = 0
    kind: str = PLUS

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex).ravel()
        if c.size == 0 or c[0] != 1:
            raise PreconditionError("Q-polynomial must have e_0 = 1")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        powers = (-z[..., None]) ** np.arange(self.degree + 1)
        return powers @ self.coeffs

    def scaled(self, factor: complex) -> np.ndarray:
        return factor * self.coeffs

    def reciprocal(self) -> "QPolynomial":
        """``z^n Q(1/z) / e_n`` in the same convention."""
        c = self.coeffs
        if abs(c[-1]) == 0:
            raise DegenerateError("reciprocal of a polynomial with e_n = 0")
        kind = MINUS if self.kind == PLUS else PLUS
        r = c[::-1] / c[-1]
        r[0] = 1.0
        return QPolynomial(r, self.sector, kind)


def expected_degree(params: ModelParams, sector: int, kind: str) -> int:
    return params.n - sector if kind == PLUS else params.n + sector


def binomial_rhs(params: ModelParams) -> np.ndarray:
    """Coefficients of ``(-z)^m``, m = 0..N, of the quantum determinant."""
    n, wq = params.n, params.w * params.q
    out = np.zeros(params.N + 1, dtype=complex)
    for k in range(n + 1):
        for l in range(n + 1):
            out[k + l] += math.comb(n, k) * math.comb(n, l) * wq ** (k - l)
    return out


def _check_field(params: ModelParams):
    if params.t == 1:
        raise RegimeError("the Wronskian system needs a nonzero field (t != 1)")


def wronskian_weight(params: ModelParams, sector: int, k, l):
    """``(x q^{l-k} - x^-1 q^{k-l}) / (x - 1/x)`` with ``x = t q^{-S_A}``."""
    x = params.t * params.q ** (-sector)
    d = np.asarray(k) - np.asarray(l)
    return (x * params.q ** (-d) - params.q ** d / x) / (x - 1 / x)


class FullWronskianSystem:
    """``N`` quadratic equations in ``e^+_1..e^+_{n+}, e^-_1..e^-_{n-}``.

    ``F_m`` is the coefficient of ``(-z)^m`` (m = 1..N) of the Wronskian
    identity, right-hand side minus the binomial coefficients.
    """

    def __init__(self, params: ModelParams, sector: int = 0):
        _check_field(params)
        if abs(sector) > params.n:
            raise PreconditionError(f"sector {sector} outside [-n, n]")
        self.params = params
        self.sector = sector
        self.n_plus = params.n - sector
        self.n_minus = params.n + sector
        self.size = self.n_plus + self.n_minus
        self.rhs = binomial_rhs(params)
        N = params.N
        self.terms = []          # (m, k, l, weight)
        for m in range(1, N + 1):
            for k in range(max(0, m - self.n_minus), min(self.n_plus, m) + 1):
                l = m - k
                self.terms.append((m, k, l, wronskian_weight(params, sector, k, l)))
        # equations whose product terms reach beyond the binomial support
        self.unsupported_rows = [m for m in range(1, N + 1) if m > 2 * params.n]

    def split(self, x):
        x = np.asarray(x)
        one = np.ones(x.shape[:-1] + (1,), dtype=complex)
        ep = np.concatenate([one, x[..., :self.n_plus]], axis=-1)
        em = np.concatenate([one, x[..., self.n_plus:]], axis=-1)
        return ep, em

    def join(self, e_plus, e_minus):
        return np.concatenate([np.asarray(e_plus)[..., 1:], np.asarray(e_minus)[..., 1:]], axis=-1)

    def __call__(self, x):
        ep, em = self.split(x)
        F = np.zeros(ep.shape[:-1] + (self.params.N,), dtype=complex)
        for m, k, l, a in self.terms:
            F[..., m - 1] += a * ep[..., k] * em[..., l]
        return F - self.rhs[1:]

    def jacobian(self, x):
        ep, em = self.split(x)
        J = np.zeros(ep.shape[:-1] + (self.params.N, self.size), dtype=complex)
        for m, k, l, a in self.terms:
            if k >= 1:
                J[..., m - 1, k - 1] += a * em[..., l]
            if l >= 1:
                J[..., m - 1, self.n_plus + l - 1] += a * ep[..., k]
        return J

    def scale(self) -> float:
        return 1.0 + float(np.abs(self.rhs).max())

    def start_scale(self) -> np.ndarray:
        n, wq = self.params.n, abs(self.params.w * self.params.q)
        sp = [math.comb(n, k) * wq ** abs(k - n / 2) for k in range(1, self.n_plus + 1)]
        sm = [math.comb(n, k) * wq ** abs(k - n / 2) for k in range(1, self.n_minus + 1)]
        return np.array(sp + sm, dtype=float)


class ReducedWronskianSystem:
    """The ``S_A = 0`` system with ``Q^-`` the reciprocal of ``Q^+``.

    ``G_m`` for m = 1..N-1 in the unknowns ``e_1..e_n``.  ``G_m`` and
    ``G_{N-m}`` coincide identically, so Newton steps use rows 1..n.
    """

    sector = 0

    def __init__(self, params: ModelParams):
        _check_field(params)
        self.params = params
        n, N = params.n, params.N
        self.size = n
        self.rhs = binomial_rhs(params)
        self.terms = []
        for m in range(1, N):
            for k in range(max(0, m - n), min(n, m) + 1):
                l = m - k
                self.terms.append((m, k, l, self._weight(k, l)))

    def _weight(self, k, l):
        p = self.params
        w_tq = wronskian_weight(p, 0, k, l)
        if p.regime == CRITICAL:
            bh = p.beta * p.h / 2
            w_sinh = np.sinh(bh - 1j * p.gamma * (k - l)) / np.sinh(bh)
            if abs(w_sinh - w_tq) > 1e-12 * max(1.0, abs(w_tq)):
                raise AssertionError("sinh form and t,q-power form of the weight disagree")
        return w_tq

    def full(self, x):
        x = np.asarray(x)
        one = np.ones(x.shape[:-1] + (1,), dtype=complex)
        return np.concatenate([one, x], axis=-1)

    def residual_rows(self, x):
        """All ``N-1`` equations ``G_1..G_{N-1}``."""
        e = self.full(x)
        n = self.params.n
        G = np.zeros(e.shape[:-1] + (self.params.N - 1,), dtype=complex)
        for m, k, l, a in self.terms:
            G[..., m - 1] += a * e[..., k] * e[..., n - l]
        G -= e[..., n, None] * self.rhs[1:-1]
        return G

    def __call__(self, x):
        return self.residual_rows(x)[..., :self.params.n]

    def jacobian(self, x, rows: Optional[int] = None):
        e = self.full(x)
        n = self.params.n
        rows = n if rows is None else rows
        J = np.zeros(e.shape[:-1] + (rows, n), dtype=complex)
        for m, k, l, a in self.terms:
            if m > rows:
                continue
            if k >= 1:
                J[..., m - 1, k - 1] += a * e[..., n - l]
            if n - l >= 1:
                J[..., m - 1, n - l - 1] += a * e[..., k]
        J[..., :, n - 1] -= self.rhs[1:rows + 1]
        return J

    def scale(self) -> float:
        return 1.0 + float(np.abs(self.rhs).max())

    def start_scale(self) -> np.ndarray:
        n, wq = self.params.n, abs(self.params.w * self.params.q)
        return np.array([math.comb(n, k) * wq ** abs(k - n / 2) for k in range(1, n + 1)])


def assemble_full_system(params: ModelParams, sector: int = 0) -> FullWronskianSystem:
    return FullWronskianSystem(params, sector)


def assemble_reduced_system(params: ModelParams) -> ReducedWronskianSystem:
    return ReducedWronskianSystem(params)


# ---------------------------------------------------------------------------
# solutions


@dataclasses.dataclass
class WronskianSolution:
    e_plus: QPolynomial
    e_minus: QPolynomial
    residual_full: float
    flags: Dict[str, bool]
    provenance: Dict = dataclasses.field(default_factory=dict)
    matched_lambda: Optional[complex] = None

    @property
    def sector(self) -> int:
        return self.e_plus.sector

    def vector(self) -> np.ndarray:
        return np.concatenate([self.e_plus.coeffs[1:], self.e_minus.coeffs[1:]])


def solution_flags(e_plus: np.ndarray, e_minus: np.ndarray, params: ModelParams, tol: float = 1e-8) -> Dict[str, bool]:
    ep, em = np.asarray(e_plus), np.asarray(e_minus)
    flags = {"reciprocal": False, "conjugate": False, "cce": False}
    if len(ep) == len(em):
        scale = max(1.0, np.abs(ep).max(), np.abs(em).max())
        if abs(em[-1]) > 0 and abs(ep[-1]) > 0:
            flags["reciprocal"] = bool(
                np.abs(ep - em[::-1] / em[-1]).max() < tol * scale
                and np.abs(em - ep[::-1] / ep[-1]).max() < tol * scale)
        flags["conjugate"] = bool(np.abs(ep - em.conj()).max() < tol * scale)
        if params.regime == CRITICAL and abs(ep[-1]) > 0:
            flags["cce"] = bool(np.abs(ep.conj() - ep[::-1] / ep[-1]).max() < tol * scale)
    return flags


def full_residual(params: ModelParams, e_plus: np.ndarray, e_minus: np.ndarray, sector: int = 0) -> float:
    system = FullWronskianSystem(params, sector)
    F = system(system.join(e_plus, e_minus))
    return float(np.abs(F).max() / system.scale())


def make_solution(params: ModelParams, e_plus, e_minus, sector: int = 0, provenance=None) -> WronskianSolution:
    ep = QPolynomial(e_plus, sector, PLUS)
    em = QPolynomial(e_minus, sector, MINUS)
    return WronskianSolution(ep, em, full_residual(params, ep.coeffs, em.coeffs, sector),
                             solution_flags(ep.coeffs, em.coeffs, params), dict(provenance or {}))


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    n_starts: int = 256
    seed: int = 0
    tol: float = 1e-10
    max_iter: int = 80
    max_halvings: int = 30
    dedup_tol: float = 1e-6
    # each start is the binomial profile times a log-uniform magnitude in
    # [10**-spread, 10**spread]; some solutions sit far from the profile
    magnitude_spread: float = 2.0
    # add images under (Q+, Q-) -> (conj Q-, conj Q+) of every solution found (critical regime only)
    symmetry_closure: bool = True


def _newton_batch(system, X, cfg: SolverConfig):
    """Damped Newton on a batch of starts; returns final points and residuals."""
    scale = system.scale()
    F = system(X)
    merit = np.linalg.norm(F, axis=-1) ** 2
    for _ in range(cfg.max_iter):
        active = np.sqrt(merit) / scale > cfg.tol * 1e-3
        if not active.any():
            break
        J = system.jacobian(X[active])
        Fa = F[active]
        try:
            step = np.linalg.solve(J, Fa[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(j, f, rcond=None)[0] for j, f in zip(J, Fa)])
        bad = ~np.all(np.isfinite(step), axis=-1)
        step[bad] = 0
        lam = np.ones(len(step))
        Xa, ma = X[active], merit[active]
        newX, newF, newm = Xa.copy(), Fa.copy(), ma.copy()
        pending = np.ones(len(step), dtype=bool)
        for _ in range(cfg.max_halvings):
            if not pending.any():
                break
            trial = Xa[pending] - lam[pending, None] * step[pending]
            Ft = system(trial)
            mt = np.linalg.norm(Ft, axis=-1) ** 2
            ok = np.isfinite(mt) & (mt < ma[pending])
            idx = np.flatnonzero(pending)
            newX[idx[ok]], newF[idx[ok]], newm[idx[ok]] = trial[ok], Ft[ok], mt[ok]
            pending[idx[ok]] = False
            lam[pending] *= 0.5
        X[active], F[active], merit[active] = newX, newF, newm
        if not (np.isfinite(merit).all()):
            merit[~np.isfinite(merit)] = np.inf
    return X, np.sqrt(merit) / scale


class SolutionSet(list):
    """List of solutions with solver bookkeeping attached."""

    def __init__(self, items=(), n_starts=0, failures=0, degree_drops=0):
        super().__init__(items)
        self.n_starts = n_starts
        self.failures = failures
        self.degree_drops = degree_drops


def reduced_candidate(system: ReducedWronskianSystem, x: np.ndarray, provenance=None) -> WronskianSolution:
    """Solution object for a converged reduced-system point.

    Raises :class:`DegenerateError` when ``|e_n| < 1e-8`` (the reciprocal
    polynomial does not exist; fewer than n Bethe roots).
    """
    if abs(x[-1]) < 1e-8:
        raise DegenerateError(f"|e_n| = {abs(x[-1]):.2e} < 1e-8: degree-drop candidate")
    ep = system.full(x)
    em = ep[::-1] / ep[-1]
    em[0] = 1.0
    return make_solution(system.params, ep, em, 0, provenance)


def draw_starts(system, config: SolverConfig) -> np.ndarray:
    """All starting points for a run, fixed by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    shape = (config.n_starts, system.size)
    X0 = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * system.start_scale() / math.sqrt(2)
    X0 *= 10.0 ** rng.uniform(-config.magnitude_spread, config.magnitude_spread, (config.n_starts, 1))
    return X0


def _run_batch(system, X0: np.ndarray, offset: int, config: SolverConfig, tags=None):
    X, res = _newton_batch(system, X0.copy(), config)
    found, failures, drops = [], 0, 0
    for i, x in enumerate(X):
        prov = {"seed": config.seed, "start": offset + i} if tags is None else dict(tags[i])
        if isinstance(system, ReducedWronskianSystem):
            allrows = np.abs(system.residual_rows(x)).max() / system.scale()
            if not (np.isfinite(allrows) and allrows < config.tol):
                failures += 1
                continue
            try:
                sol = reduced_candidate(system, x, prov)
            except DegenerateError as exc:
                log.warning("start %d: %s", offset + i, exc)
                drops += 1
                continue
        else:
            if not (np.isfinite(res[i]) and res[i] < config.tol):
                failures += 1
                continue
            ep, em = system.split(x)
            sol = make_solution(system.params, ep, em, system.sector, prov)
        if sol.residual_full < config.tol:
            found.append(sol)
        else:
            failures += 1
    return dedup(found, config.dedup_tol), failures, drops


def solve_multistart(system, config: SolverConfig = SolverConfig(), jobs: int = 1,
                     chunk: int = 2048) -> SolutionSet:
    """Multistart Newton from seeded complex Gaussian starts.

    Starts are drawn up front, so the result does not depend on ``jobs``.
    Returns deduplicated solutions in lexicographic coefficient order.
    Raises :class:`NoConvergence` (carrying the partial list) if no start
    converged.
    """
    X0 = draw_starts(system, config)
    batches = [(X0[i:i + chunk], i) for i in range(0, config.n_starts, chunk)]
    if jobs > 1 and len(batches) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_batch, [system] * len(batches), [b[0] for b in batches],
                                    [b[1] for b in batches], [config] * len(batches)))
    else:
        results = [_run_batch(system, xb, off, config) for xb, off in batches]
    found = [s for r in results for s in r[0]]
    failures = sum(r[1] for r in results)
    drops = sum(r[2] for r in results)
    sols = dedup(found, config.dedup_tol)
    if sols and config.symmetry_closure:
        sols = dedup(sols + conjugate_images(system, sols, config), config.dedup_tol)
    if not sols:
        raise NoConvergence("no start converged", [], failures)
    if failures:
        log.info("%d of %d starts did not converge", failures, config.n_starts)
    return SolutionSet(sols, config.n_starts, failures, drops)


def conjugate_images(system, solutions: Sequence[WronskianSolution], config: SolverConfig) -> List[WronskianSolution]:
    """Newton-polished images of reduced-system solutions under ``e+ -> conj(e-)``.

    For real gamma, beta and h the map sends solutions to solutions; its
    fixed points are the ``cce`` solutions.  Images with large coefficients
    are rarely reached from random starts, so adding them completes the set.
    """
    if not isinstance(system, ReducedWronskianSystem) or system.params.regime != CRITICAL:
        return []
    pending = [s for s in solutions if not s.flags["cce"]]
    if not pending:
        return []
    X0 = np.array([np.conj(s.e_minus.coeffs[1:]) for s in pending])
    tags = [{"seed": config.seed, "image_of": s.provenance.get("start")} for s in pending]
    images, _, _ = _run_batch(system, X0, 0, config, tags)
    return images


def dedup(solutions: Sequence[WronskianSolution], rel_tol: float = 1e-6) -> List[WronskianSolution]:
    """Cluster by relative coefficient distance; keep the smallest residual per cluster."""
    reps: List[WronskianSolution] = []
    for sol in sorted(solutions, key=lambda s: s.residual_full):
        v = sol.vector()
        for r in reps:
            u = r.vector()
            if len(u) == len(v) and np.linalg.norm(u - v) <= rel_tol * max(np.linalg.norm(u), np.linalg.norm(v), 1.0):
                break
        else:
            reps.append(sol)
    # deterministic order: coefficient-lexicographic (residuals differ by rounding only)
    return sorted(reps, key=lambda s: tuple(np.round(np.c_[s.vector().real, s.vector().imag].ravel(), 8)))


def roots(qpoly: QPolynomial, rel_tol: float = 1e-12) -> np.ndarray:
    """Bethe roots ``x_k`` with ``Q(z) = prod_k (1 - x_k z)``.

    Eigenvalues of the companion matrix of the monic reversal
    ``y^deg Q(1/y)`` (leading coefficient ``e_0 = 1``).
    """
    c = qpoly.coeffs
    deg = qpoly.degree
    if deg == 0:
        return np.zeros(0, dtype=complex)
    if abs(c[-1]) < rel_tol * np.abs(c).max():
        raise DegenerateError(f"e_{deg} = {c[-1]:.3g} underflows: degree drops below {deg}")
    # y^deg + a_1 y^{deg-1} + ... + a_deg with a_j = (-1)^j e_j
    a = c[1:] * (-1.0) ** np.arange(1, deg + 1)
    C = np.zeros((deg, deg), dtype=complex)
    C[0, :] = -a
    C[np.arange(1, deg), np.arange(deg - 1)] = 1.0
    return np.linalg.eigvals(C)


def coeffs_from_roots(x: np.ndarray) -> np.ndarray:
    """``e_k`` (elementary symmetric polynomials) of the roots ``x``."""
    e = np.array([1.0 + 0j])
    for r in np.asarray(x, dtype=complex):
        e = np.concatenate([e, [0]]) + np.concatenate([[0], e * r])
    return e
