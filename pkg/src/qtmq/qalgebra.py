"""Local building blocks: R-matrices, L-operators and quantum-group generators.

Conventions used throughout the package:

* single-site basis ``(up, down)`` with ``up`` = index 0, so
  ``sigma^+ = |0><1|`` and ``sigma^z = diag(1, -1)``;
* the quantum space is ``site 1 (x) site 2 (x) ... (x) site N`` with site 1
  the most significant bit of the basis index;
* a :class:`LocalOperator` acts on ``aux (x) site`` in that factor order.
"""
from __future__ import annotations

import dataclasses
from typing import Callable, Dict, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidCutoff, DividedPowerOverflow, PoleError, PreconditionError, SingularError, SizeError
from .params import ModelParams, q_factorial

SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)
SIGMA_Z = np.diag([1.0, -1.0]).astype(complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
EYE2 = np.eye(2, dtype=complex)

POLE_TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class LocalOperator:
    """Dense operator on ``aux (x) site`` (``d_aux*d_site`` square)."""

    entries: np.ndarray
    d_aux: int
    d_site: int = 2

    def __post_init__(self):
        m = np.array(self.entries, dtype=complex)
        size = self.d_aux * self.d_site
        if m.shape != (size, size):
            raise PreconditionError(f"entries of shape {m.shape} do not match dims ({self.d_aux}, {self.d_site})")
        if not np.all(np.isfinite(m)):
            raise PreconditionError("LocalOperator entries must be finite")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    def tensor(self) -> np.ndarray:
        """Four-index view ``[aux_out, site_out, aux_in, site_in]``."""
        return self.entries.reshape(self.d_aux, self.d_site, self.d_aux, self.d_site)

    def site_block(self, i: int, j: int) -> np.ndarray:
        """Auxiliary-space operator multiplying ``|i><j|`` in the site factor."""
        return self.tensor()[:, i, :, j]

    @classmethod
    def from_site_blocks(cls, blocks) -> "LocalOperator":
        """Assemble from a 2x2 nested list of auxiliary-space matrices."""
        d = np.asarray(blocks[0][0]).shape[0]
        t = np.zeros((d, 2, d, 2), dtype=complex)
        for i in range(2):
            for j in range(2):
                t[:, i, :, j] = blocks[i][j]
        return cls(t.reshape(2 * d, 2 * d), d)


def partial_transpose(m: np.ndarray, factor: int, dims=(2, 2)) -> np.ndarray:
    """Transpose a two-factor operator in factor 0 or 1."""
    t = np.asarray(m).reshape(dims[0], dims[1], dims[0], dims[1])
    t = t.transpose(2, 1, 0, 3) if factor == 0 else t.transpose(0, 3, 2, 1)
    return t.reshape(dims[0] * dims[1], dims[0] * dims[1])


def swap_factors(m: np.ndarray) -> np.ndarray:
    """``P m P`` for the flip ``P`` of two qubits."""
    return np.asarray(m).reshape(2, 2, 2, 2).transpose(1, 0, 3, 2).reshape(4, 4)


def boltzmann_weights(z: complex, params: ModelParams) -> Tuple[complex, complex, complex, complex]:
    q = params.q
    den = 1 - z * q ** 2
    if abs(den) < POLE_TOL:
        raise PoleError(f"R-matrix pole: z={z} is within {POLE_TOL} of q^-2")
    b = (1 - z) * q / den
    c = (1 - q ** 2) / den
    return 1.0 + 0j, b, c, c * z


def r_matrix(z: complex, params: ModelParams) -> LocalOperator:
    """Six-vertex R-matrix with weights ``a=1, b, c, c'=cz``."""
    a, b, c, cp = boltzmann_weights(z, params)
    m = np.zeros((4, 4), dtype=complex)
    m[0, 0] = m[3, 3] = a
    m[1, 1] = m[2, 2] = b
    m[1, 2] = c
    m[2, 1] = cp
    return LocalOperator(m, 2)


def r_dual(z: complex, params: ModelParams) -> LocalOperator:
    """``(R(z)^-1)^{1 (x) t}``, checked against ``[R_21(1/z)]^{1 (x) t}``."""
    if z == 0:
        raise PreconditionError("r_dual requires z != 0")
    r = r_matrix(z, params).entries
    try:
        inv = np.linalg.inv(r)
    except np.linalg.LinAlgError as exc:
        raise SingularError(f"R({z}) is not invertible") from exc
    if not np.all(np.isfinite(inv)) or np.linalg.cond(r) > 1e14:
        raise SingularError(f"R({z}) is not invertible")
    via_inverse = partial_transpose(inv, 1)
    via_flip = partial_transpose(swap_factors(r_matrix(1 / z, params).entries), 1)
    scale = max(1.0, np.abs(via_inverse).max())
    if np.abs(via_inverse - via_flip).max() > 1e-10 * scale:
        raise SingularError("R(z)^-1 and R_21(1/z) disagree; near-singular parameter")
    return LocalOperator(via_inverse, 2)


def spin_rep(d: int, params: ModelParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matrices ``(e, f, q^h)`` of the d-dimensional (spin (d-1)/2) module."""
    if d < 1:
        raise PreconditionError("dimension must be >= 1")
    q = params.q
    e = np.zeros((d, d), dtype=complex)
    f = np.zeros((d, d), dtype=complex)
    for k in range(1, d):
        e[k - 1, k] = (q ** (d - k) - q ** (k - d)) / (q - 1 / q)
    for k in range(d - 1):
        f[k + 1, k] = (q ** (k + 1) - q ** (-k - 1)) / (q - 1 / q)
    qh = np.diag(params.qpow(d - 2 * np.arange(d) - 1)).astype(complex)
    return e, f, qh


def _spin_qh_power(d: int, x: float, shift: float, params: ModelParams) -> np.ndarray:
    """``q^{x*(h + shift)}`` in the spin module (h eigenvalues d-2k-1)."""
    return np.diag(params.qpow(x * (d - 2 * np.arange(d) - 1 + shift)))


def l_ops(z: complex, d: int, params: ModelParams) -> Tuple[LocalOperator, LocalOperator]:
    """Conventional ``L(z)`` and dual ``L*(z)`` with a spin-(d-1)/2 auxiliary space.

    Both are polynomial (degree one) in ``z``.
    """
    e, f, _ = spin_rep(d, params)
    q = params.q
    p_half = _spin_qh_power(d, 0.5, 1, params)        # q^{(h+1)/2}
    m_half = _spin_qh_power(d, -0.5, 1, params)       # q^{-(h+1)/2}
    p_half_m = _spin_qh_power(d, 0.5, -1, params)     # q^{(h-1)/2}
    m_half_m = _spin_qh_power(d, -0.5, -1, params)    # q^{-(h-1)/2}
    L = LocalOperator.from_site_blocks([
        [z * p_half - m_half, z * (q - 1 / q) * p_half @ f],
        [(q - 1 / q) * e @ m_half, z * m_half_m - p_half_m],
    ])
    L_star = LocalOperator.from_site_blocks([
        [z * m_half - p_half, (1 / q - q) * e @ m_half],
        [z * (1 / q - q) * p_half @ f, z * p_half_m - m_half_m],
    ])
    return L, L_star


def rho_plus(aux_dim: int, s: complex, params: ModelParams) -> Dict[str, np.ndarray]:
    """Truncated ``rho^+`` module at ``r = 1`` (without the spectral factor in e0).

    Returns the matrices of ``e0/z``, ``e1`` and the diagonal of ``q^{h1}``.
    """
    if aux_dim < 2:
        raise InvalidCutoff(f"auxiliary dimension must be >= 2, got {aux_dim}")
    q = params.q
    k = np.arange(aux_dim)
    e0 = np.zeros((aux_dim, aux_dim), dtype=complex)
    e0[k[1:], k[:-1]] = 1.0
    e1 = np.zeros((aux_dim, aux_dim), dtype=complex)
    kk = k[1:]
    e1[kk - 1, kk] = (s + 1 - q ** (2 * kk) - s * q ** (-2.0 * kk)) / (q - 1 / q) ** 2
    return {"e0": e0, "e1": e1, "qh1": q ** (-2.0 * k - 1)}


def q_l_ops(z: complex, s: complex, aux_dim: int, params: ModelParams) -> Tuple[LocalOperator, LocalOperator]:
    """Q-operator intertwiners for ``rho^+ (x) pi`` and ``rho^+ (x) pi*`` at r=1.

    At a root of unity pass ``aux_dim = params.ellprime``; the truncation
    ``e0|l'-1> = 0`` is then exact.  Entries are polynomial in z and carry
    unit normalisation.
    """
    rep = rho_plus(aux_dim, s, params)
    q = params.q
    k = np.arange(aux_dim)
    qk = np.diag(q ** k.astype(float))
    qmk = np.diag(q ** (-k.astype(float)))
    qk1 = np.diag(q ** (k + 1.0))
    qmk1 = np.diag(q ** (-k - 1.0))
    e0, e1 = rep["e0"], rep["e1"]
    # q^{(h1+1)/2}|k> = q^-k, q^{(h1-1)/2}|k> = q^{-k-1}
    L = LocalOperator.from_site_blocks([
        [z * s * qmk - qk, (q - 1 / q) * z * qmk @ e0],
        [(q - 1 / q) * e1 @ qk, z * qk1 - qmk1],
    ])
    L_star = LocalOperator.from_site_blocks([
        [z * qk - qmk, (1 / q - q) * e1 @ qk],
        [(1 / q - q) * z * qmk @ e0, z * s * qmk1 - qk1],
    ])
    return L, L_star


# ---------------------------------------------------------------------------
# Quantum-group generators on the alternating module pi*_w (x) pi_{1/w} (x) ...


def _local_generators(site: int, params: ModelParams) -> Dict[str, np.ndarray]:
    q, w = params.q, params.w
    qz = np.diag([q, 1 / q])
    if site % 2 == 0:
        return {"e1": SIGMA_PLUS, "f1": SIGMA_MINUS, "k1": qz,
                "e0": SIGMA_MINUS / w, "f0": w * SIGMA_PLUS, "k0": np.linalg.inv(qz)}
    return {"e1": -q * SIGMA_MINUS, "f1": -SIGMA_PLUS / q, "k1": np.linalg.inv(qz),
            "e0": -w * q * SIGMA_PLUS, "f0": -SIGMA_MINUS / (w * q), "k0": qz}


def _kron_all(ops: Sequence[np.ndarray]) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out


def loop_generators(params: ModelParams, max_n: int = 12) -> Dict[str, np.ndarray]:
    """Chevalley-Serre generators ``E1, F1, E0, F0, K1 = q^{H1}, K0`` in quantum space.

    Built from the coproduct ``D(e) = e (x) 1 + q^h (x) e``,
    ``D(f) = f (x) q^-h + 1 (x) f``.
    """
    N = params.N
    if N > max_n:
        raise SizeError(f"dense generators limited to N <= {max_n}")
    local = [_local_generators(k, params) for k in range(1, N + 1)]
    out = {}
    for i in ("1", "0"):
        E = np.zeros((2 ** N, 2 ** N), dtype=complex)
        F = np.zeros_like(E)
        for k in range(N):
            left = [local[j]["k" + i] for j in range(k)]
            E += _kron_all(left + [local[k]["e" + i]] + [EYE2] * (N - k - 1))
            right = [np.linalg.inv(local[j]["k" + i]) for j in range(k + 1, N)]
            F += _kron_all([EYE2] * k + [local[k]["f" + i]] + right)
        out["E" + i] = E
        out["F" + i] = F
        out["K" + i] = _kron_all([local[j]["k" + i] for j in range(N)])
    return out


def divided_power(generator: Union[str, Callable[[ModelParams], np.ndarray]],
                  ellprime: int, params: ModelParams, eps_list: Sequence[float],
                  overflow: float = 1e12) -> list:
    """``X(q')^l' / [l']_{q'}!`` for ``q' = q*exp(i*eps)``, one matrix per eps.

    The caller extrapolates the returned sequence to ``eps -> 0``.
    """
    eps = np.asarray(eps_list, dtype=float)
    if params.ell is None:
        raise PreconditionError("divided powers need a root of unity (ell set)")
    if eps.size == 0 or np.any(eps < 1e-7) or np.any(np.diff(eps) >= 0):
        raise PreconditionError("eps_list must be strictly decreasing and >= 1e-7")
    if isinstance(generator, str):
        name = generator
        generator = lambda p: loop_generators(p)[name]  # noqa: E731
    out = []
    for e in eps:
        shifted = params.replace(gamma=params.gamma + e, ell=None)
        X = generator(shifted)
        power = np.linalg.matrix_power(X, ellprime)
        dp = power / q_factorial(ellprime, shifted.q)
        if np.abs(dp).max() > overflow:
            raise DividedPowerOverflow(f"divided power norm exceeds {overflow:g}; wrong ellprime?")
        out.append(dp)
    return out
