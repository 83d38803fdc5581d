"""Many-body operators on (C^2)^N: QTM, fused hierarchy, Q-operators.

Every operator here is a trace over an auxiliary space of a product of local
operators ``T_N ... T_1`` (site 1 acts first).  :class:`ManyBodyOperator`
keeps the local chain so it can be applied matrix-free, and builds the dense
matrix lazily by an independent Kronecker accumulation.
"""
from __future__ import annotations

import dataclasses
import functools
import struct
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, PreconditionError, RegimeError, SizeError
from .params import ModelParams, dense_limit
from .qalgebra import SIGMA_X, boltzmann_weights, l_ops, q_l_ops, r_matrix

ROOT_OF_UNITY = "root-of-unity"
GENERIC = "generic-truncated"


# ---------------------------------------------------------------------------
# alternating spin and sectors


@functools.lru_cache(maxsize=None)
def _sa_values(N: int) -> np.ndarray:
    idx = np.arange(2 ** N)
    sa = np.zeros(2 ** N)
    for k in range(1, N + 1):
        bit = (idx >> (N - k)) & 1          # 0 = up
        sa += 0.5 * (-1) ** k * (1 - 2 * bit)
    sa = np.rint(sa).astype(int)
    sa.setflags(write=False)
    return sa


def sa_values(N: int) -> np.ndarray:
    """Eigenvalue of ``S_A`` on every basis state."""
    return _sa_values(N)


def sz_values(N: int) -> np.ndarray:
    idx = np.arange(2 ** N)
    sz = np.zeros(2 ** N)
    for k in range(1, N + 1):
        sz += 0.5 * (1 - 2 * ((idx >> (N - k)) & 1))
    return sz


def sector_indices(N: int, sector: int) -> np.ndarray:
    return np.flatnonzero(sa_values(N) == sector)


def sectors(N: int) -> List[int]:
    return list(range(-N // 2, N // 2 + 1))


def spin_reversal(N: int) -> np.ndarray:
    """Permutation matrix of ``prod_j sigma^x_j``."""
    R = np.ones((1, 1))
    for _ in range(N):
        R = np.kron(R, SIGMA_X.real)
    return R


# ---------------------------------------------------------------------------
# chains of local operators


def chain_dense(sites: Sequence[np.ndarray], twist: np.ndarray) -> np.ndarray:
    """Dense ``Tr_aux twist T_N ... T_1`` via Kronecker accumulation."""
    D = len(twist)
    A = np.eye(D, dtype=complex).reshape(D, D, 1, 1)
    for T in sites:
        # A[a_k, a_0, I, J] -> sum_a T[a', s', a, s] A[a, a_0, I, J]
        A = np.einsum("xyIJ,asxt->ayIsJt", A, T, optimize=True)
        dim = A.shape[2] * 2
        A = A.reshape(D, D, dim, dim)
    return np.einsum("a,aaIJ->IJ", twist, A)


def chain_apply(sites: Sequence[np.ndarray], twist: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-free ``Tr_aux twist T_N ... T_1`` applied to ``v`` (vector or columns)."""
    N = len(sites)
    v = np.asarray(v, dtype=complex)
    vec = v.ndim == 1
    cols = v.reshape(2 ** N, -1)
    m = cols.shape[1]
    D = len(twist)
    psi = np.zeros((D, D) + (2,) * N + (m,), dtype=complex)
    base = cols.reshape((2,) * N + (m,))
    for a in range(D):
        psi[a, a] = base
    for k, T in enumerate(sites):
        axis = 2 + k
        psi = np.tensordot(T, psi, axes=([2, 3], [0, axis]))
        psi = np.moveaxis(psi, 1, axis)
    out = np.einsum("a,aa...->...", twist, psi)
    out = out.reshape(2 ** N, m)
    return out[:, 0] if vec else out


@dataclasses.dataclass(frozen=True)
class ManyBodyOperator:
    """Operator on the 2^N quantum space, dense and/or matrix-free.

    ``sites``/``twist`` describe the auxiliary-space chain when the operator
    was built from local operators; ``matrix`` holds an explicit matrix for
    operators assembled otherwise.
    """

    N: int
    sites: Optional[Tuple[np.ndarray, ...]] = None
    twist: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None
    sector_diagonal: bool = False
    meta: Dict = dataclasses.field(default_factory=dict)

    @functools.cached_property
    def dense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        if self.N > dense_limit():
            raise SizeError(f"N={self.N} exceeds dense limit {dense_limit()}; use apply()")
        m = chain_dense(self.sites, self.twist)
        m.setflags(write=False)
        return m

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.shape[0] != 2 ** self.N:
            raise PreconditionError(f"vector dimension {v.shape[0]} != 2^{self.N}")
        if self.sites is None:
            return self.matrix @ v
        return chain_apply(self.sites, self.twist, v)

    def sector_block(self, sector: int, chunk: int = 1024) -> np.ndarray:
        """Restriction to the ``S_A = sector`` subspace."""
        idx = sector_indices(self.N, sector)
        if self.matrix is not None or "dense" in self.__dict__:
            return self.dense[np.ix_(idx, idx)]
        out = np.empty((len(idx), len(idx)), dtype=complex)
        for start in range(0, len(idx), chunk):
            cols = idx[start:start + chunk]
            basis = np.zeros((2 ** self.N, len(cols)), dtype=complex)
            basis[cols, np.arange(len(cols))] = 1.0
            out[:, start:start + chunk] = self.apply(basis)[idx]
        return out

    def sector_labels(self) -> Dict[int, np.ndarray]:
        return {s: sector_indices(self.N, s) for s in sectors(self.N)}


def alternating_spin(N: int) -> ManyBodyOperator:
    if N % 2:
        raise PreconditionError("N must be even")
    return ManyBodyOperator(N, matrix=np.diag(sa_values(N).astype(complex)), sector_diagonal=True)


def sector_decompose(op: ManyBodyOperator) -> Dict[int, np.ndarray]:
    """Blocks of ``op`` labelled by ``S_A`` eigenvalue (empty sectors skipped)."""
    return {s: op.sector_block(s) for s in sectors(op.N) if len(sector_indices(op.N, s))}


# ---------------------------------------------------------------------------
# concrete transfer matrices


def _check_size(params: ModelParams, limit: Optional[int] = 16):
    if limit is not None and params.N > limit:
        raise SizeError(f"N={params.N} exceeds the supported limit {limit}")


def qtm_sites(z: complex, params: ModelParams, w: Optional[complex] = None) -> List[np.ndarray]:
    """Local tensors of the QTM, site 1 first."""
    w = params.w if w is None else w
    even = r_matrix(z * w, params).tensor()
    rr = r_matrix(w / z, params).entries.reshape(2, 2, 2, 2)   # [site', aux', site, aux]
    # R_{k0}^{t (x) 1}: transpose in the site factor, then reorder to [aux', site', aux, site]
    odd = rr.transpose(1, 2, 3, 0)
    return [odd if k % 2 else even for k in range(1, params.N + 1)]


def build_qtm(z: complex, params: ModelParams, w: Optional[complex] = None) -> ManyBodyOperator:
    """The quantum transfer matrix ``tau(z; w)`` with twist ``diag(t, 1/t)``."""
    _check_size(params)
    sites = tuple(qtm_sites(z, params, w))
    twist = np.array([params.t, 1 / params.t], dtype=complex)
    return ManyBodyOperator(params.N, sites, twist, sector_diagonal=True,
                            meta={"kind": "qtm", "z": z, "w": params.w if w is None else w})


def apply_qtm(z: complex, params: ModelParams, v: np.ndarray) -> np.ndarray:
    return build_qtm(z, params).apply(v)


def build_fused(z: complex, d: int, params: ModelParams) -> ManyBodyOperator:
    """Higher-spin transfer matrix ``tau^{(d-1)}(z)`` (spin (d-1)/2 auxiliary)."""
    if d < 1:
        raise PreconditionError("d must be >= 1")
    _check_size(params)
    w = params.w
    L, _ = l_ops(z * w, d, params)
    _, Ls = l_ops(z / w, d, params)
    sites = tuple(Ls.tensor() if k % 2 else L.tensor() for k in range(1, params.N + 1))
    twist = params.t ** (d - 2.0 * np.arange(d) - 1).astype(complex)
    return ManyBodyOperator(params.N, sites, twist, sector_diagonal=True,
                            meta={"kind": "fused", "d": d, "z": z, "argument_convention": "L*(z/w)"})


def quantum_det(z: complex, params: ModelParams) -> complex:
    """``tau^{(0)}(z) = (zwq-1)^n (z/(wq)-1)^n``."""
    q, w, n = params.q, params.w, params.n
    val = (z * w * q - 1) ** n * (z / (w * q) - 1) ** n
    alt = (z * w - 1 / q) ** n * (z / w - q) ** n
    assert abs(val - alt) <= 1e-12 * max(1.0, abs(val)) * (1 + n), "quantum determinant forms disagree"
    return val


def q_operator_norm(params: ModelParams, sector: int, aux_dim: Optional[int] = None) -> complex:
    """Closed form of ``Q(0; s)`` in a sector (independent of s)."""
    x = params.t * params.q ** (-sector)      # q^{alpha - S_A}
    if aux_dim is None:
        return 1 / (x - 1 / x)
    # finite trace sum_k x^{-2k-1}; equals (1 - x^{-2 aux_dim}) / (x - 1/x) and stays regular at x = 1
    return complex(np.sum(x ** (-2.0 * np.arange(aux_dim) - 1)))


def _q_sites(z, s, aux_dim, params):
    w = params.w
    L, _ = q_l_ops(z * w, s, aux_dim, params)
    _, Ls = q_l_ops(z / w, s, aux_dim, params)
    return tuple(Ls.tensor() if k % 2 else L.tensor() for k in range(1, params.N + 1))


def _q_twist(aux_dim, params):
    k = np.arange(aux_dim)
    return (params.t ** (-2.0 * k - 1)).astype(complex)


def build_q_operator(z: complex, s: complex, params: ModelParams, mode: str = ROOT_OF_UNITY,
                     cutoff: int = 24, tail_tol: float = 1e-12, max_cutoff: int = 2048) -> ManyBodyOperator:
    """Q-operator ``Q(z; s)`` at ``r = 1``.

    ``mode="root-of-unity"`` uses the exact l'-dimensional auxiliary space.
    ``mode="generic-truncated"`` truncates the infinite module, doubling the
    cutoff from ``cutoff`` until the change drops below ``tail_tol``.
    """
    _check_size(params)
    if mode == ROOT_OF_UNITY:
        if params.ell is None:
            raise PreconditionError("root-of-unity mode requires ell")
        K = params.ellprime
        op = ManyBodyOperator(params.N, _q_sites(z, s, K, params), _q_twist(K, params), sector_diagonal=True,
                              meta={"kind": "Q", "mode": mode, "aux_dim": K, "normalisation": 1.0})
        return op
    if mode != GENERIC:
        raise PreconditionError(f"unknown mode {mode!r}")
    if params.t == 1:
        raise RegimeError("generic-q Q-operator is singular at zero field (t = 1)")
    damping = max(abs(params.q ** sa / params.t) for sa in sectors(params.N))
    if damping >= 1:
        raise RegimeError(f"trace does not converge: |q^S_A / t| = {damping:.3g} >= 1")
    rng = np.random.default_rng(0)
    probe = rng.standard_normal(2 ** params.N) + 1j * rng.standard_normal(2 ** params.N)
    K = max(cutoff, 4)
    prev = chain_apply(_q_sites(z, s, K, params), _q_twist(K, params), probe)
    while True:
        K2 = 2 * K
        if K2 > max_cutoff:
            raise ConvergenceError(f"truncated trace not converged at cutoff {K}")
        cur = chain_apply(_q_sites(z, s, K2, params), _q_twist(K2, params), probe)
        if np.linalg.norm(cur - prev) <= tail_tol * max(np.linalg.norm(cur), 1e-300):
            K = K2
            break
        K, prev = K2, cur
    return ManyBodyOperator(params.N, _q_sites(z, s, K, params), _q_twist(K, params), sector_diagonal=True,
                            meta={"kind": "Q", "mode": mode, "aux_dim": K, "normalisation": 1.0})


# ---------------------------------------------------------------------------
# spin reversal and transposition


def spin_reversal_residuals(z: complex, params: ModelParams) -> Tuple[float, float]:
    """Relative residuals of the spin-reversal and transposition identities."""
    N, n, q, w = params.N, params.n, params.q, params.w
    R = spin_reversal(N)
    wsz = np.diag(w ** sz_values(N))
    tau = build_qtm(z, params).dense
    tau_rev = build_qtm(z, params.replace(h=-params.h)).dense
    inv = wsz @ R
    lhs = inv @ tau @ inv
    res1 = np.linalg.norm(lhs - tau_rev) / np.linalg.norm(tau_rev)

    _, b1, _, _ = boltzmann_weights(z * w / q ** 2, params)
    _, b2, _, _ = boltzmann_weights(w / (q ** 2 * z), params)
    den = b1 ** n * b2 ** n
    if abs(den) < 1e-10:
        raise ZeroDivisionError("b-factor vanishes in the transposition identity")
    left = build_qtm(1 / z, params.replace(h=-params.h), w=1 / w).dense
    # holds as an operator identity only up to the similarity q^{-S^z}
    sim = q ** (-sz_values(N))
    right = (sim[:, None] * build_qtm(z, params, w=w / q ** 2).dense.T / sim[None, :]) / den
    res2 = np.linalg.norm(left - right) / np.linalg.norm(left)
    return float(res1), float(res2)


# ---------------------------------------------------------------------------
# eigensolving


@dataclasses.dataclass
class SpectrumRecord:
    eigenvalues: np.ndarray
    sectors: np.ndarray
    residuals: np.ndarray
    vectors: Optional[np.ndarray] = None
    meta: Dict = dataclasses.field(default_factory=dict)

    def __len__(self):
        return len(self.eigenvalues)

    def in_sector(self, sector: int) -> "SpectrumRecord":
        m = self.sectors == sector
        vecs = None if self.vectors is None else self.vectors[:, m]
        return SpectrumRecord(self.eigenvalues[m], self.sectors[m], self.residuals[m], vecs, dict(self.meta))


def _order(vals: np.ndarray) -> np.ndarray:
    # modulus descending, ties (to 1e-12 relative) by argument ascending
    mod = np.round(np.abs(vals) / max(np.abs(vals).max(initial=0), 1e-300), 12)
    return np.lexsort((np.angle(vals), -mod))


def eig(op, sector: Optional[int] = None, keep_vectors: bool = True) -> SpectrumRecord:
    """All eigenpairs, residual-verified, sorted by modulus (descending).

    Sector-diagonal operators are diagonalised block by block; the returned
    vectors are embedded in the full 2^N space.
    """
    if isinstance(op, np.ndarray):
        op = ManyBodyOperator(int(np.log2(op.shape[0])), matrix=op)
    N = op.N
    if op.sector_diagonal or sector is not None:
        wanted = [sector] if sector is not None else sectors(N)
        vals, secs, res, vecs = [], [], [], []
        for s in wanted:
            idx = sector_indices(N, s)
            if not len(idx):
                continue
            block = op.sector_block(s)
            lam, V = scipy.linalg.eig(block)
            V = V / np.linalg.norm(V, axis=0)
            r = np.linalg.norm(block @ V - V * lam, axis=0)
            vals.append(lam)
            secs.append(np.full(len(lam), s))
            res.append(r)
            if keep_vectors:
                full = np.zeros((2 ** N, len(lam)), dtype=complex)
                full[idx] = V
                vecs.append(full)
        vals, secs, res = map(np.concatenate, (vals, secs, res))
        vecs = np.concatenate(vecs, axis=1) if keep_vectors else None
    else:
        M = op.dense
        vals, V = scipy.linalg.eig(M)
        V = V / np.linalg.norm(V, axis=0)
        res = np.linalg.norm(M @ V - V * vals, axis=0)
        sa = sa_values(N)
        secs = np.array([_vector_sector(V[:, j], sa) for j in range(len(vals))])
        vecs = V if keep_vectors else None
    order = _order(vals)
    return SpectrumRecord(vals[order], secs[order], res[order],
                          None if vecs is None else vecs[:, order], {"N": N, **op.meta})


def _vector_sector(v, sa):
    weights = np.abs(v) ** 2
    labels = np.unique(sa[weights > 1e-12 * weights.max()])
    return int(labels[0]) if len(labels) == 1 else 10 ** 6


# ---------------------------------------------------------------------------
# binary dump


def dump_dense(op: ManyBodyOperator, path, z: complex, params: ModelParams) -> None:
    """Write ``magic 'QTM1' | N:int32 | z:2*f64 | digest:16 bytes | row-major complex``."""
    m = np.ascontiguousarray(op.dense, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(b"QTM1")
        fh.write(struct.pack("<i", op.N))
        fh.write(struct.pack("<dd", complex(z).real, complex(z).imag))
        fh.write(params.digest().encode("ascii")[:16].ljust(16, b"\0"))
        fh.write(m.tobytes())


def load_dense(path) -> Tuple[np.ndarray, Dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != b"QTM1":
            raise PreconditionError("not a QTM1 dump")
        (N,) = struct.unpack("<i", fh.read(4))
        zr, zi = struct.unpack("<dd", fh.read(16))
        digest = fh.read(16).rstrip(b"\0").decode("ascii")
        data = np.frombuffer(fh.read(), dtype="<c16").reshape(2 ** N, 2 ** N)
    return data.copy(), {"N": N, "z": complex(zr, zi), "params_digest": digest}
