"""Model parameters of the XXZ quantum transfer matrix."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from typing import Optional

import numpy as np

from .errors import PreconditionError

CRITICAL = "critical"
REAL_Q = "real-q"

DEFAULT_DENSE_LIMIT = 12


def dense_limit() -> int:
    """Largest Trotter number for which dense operators are built."""
    return int(os.environ.get("QTM_DENSE_LIMIT", DEFAULT_DENSE_LIMIT))


def ellprime_of(ell: int) -> int:
    return ell if ell % 2 else ell // 2


@dataclasses.dataclass(frozen=True)
class ModelParams:
    """Trotter number, anisotropy, temperature and field.

    In the critical regime ``q = exp(i*gamma)``; in the real-q regime
    ``q = exp(gamma)`` with ``gamma != 0``.  The field enters only through
    the twist ``t = exp(beta*h/2)``.
    """

    N: int
    gamma: float
    beta: float = 1.0
    h: float = 0.0
    regime: str = CRITICAL
    ell: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.N, (int, np.integer)) or self.N < 2 or self.N % 2:
            raise PreconditionError(f"Trotter number must be even and >= 2, got N={self.N}")
        if self.regime not in (CRITICAL, REAL_Q):
            raise PreconditionError(f"unknown regime {self.regime!r}")
        if not self.beta > 0:
            raise PreconditionError(f"beta must be positive, got {self.beta}")
        if self.regime == REAL_Q and self.gamma == 0:
            raise PreconditionError("real-q regime requires q != 1 (gamma != 0)")
        if self.regime == CRITICAL and abs(np.sin(self.gamma)) < 1e-14:
            raise PreconditionError("q = +-1 is excluded (q - 1/q vanishes)")
        if self.ell is not None:
            if self.regime != CRITICAL or self.ell < 3:
                raise PreconditionError("ell requires the critical regime and ell >= 3")
            if abs(self.q ** self.ell - 1) > 1e-10:
                raise PreconditionError(f"q^ell != 1 for gamma={self.gamma}, ell={self.ell}")
            for k in range(1, self.ell):
                if abs(self.q ** k - 1) < 1e-10:
                    raise PreconditionError(f"q is not a primitive root of order {self.ell}")

    @classmethod
    def root_of_unity(cls, N: int, ell: int, beta: float = 1.0, h: float = 0.0, k: int = 1):
        """Parameters with ``q = exp(2*pi*i*k/ell)``."""
        return cls(N=N, gamma=2 * math.pi * k / ell, beta=beta, h=h, ell=ell)

    @property
    def n(self) -> int:
        return self.N // 2

    @property
    def log_q(self) -> complex:
        return 1j * self.gamma if self.regime == CRITICAL else complex(self.gamma)

    @property
    def q(self) -> complex:
        return np.exp(self.log_q)

    def qpow(self, x) -> complex:
        """``q**x`` for real (possibly half-integer) exponent ``x``."""
        return np.exp(np.asarray(x) * self.log_q)

    @property
    def delta(self) -> float:
        return float(np.real((self.q + 1 / self.q) / 2))

    @property
    def w(self) -> complex:
        q = self.q
        return np.exp(-self.beta * (q - 1 / q) / self.N)

    @property
    def t(self) -> float:
        return math.exp(self.beta * self.h / 2)

    @property
    def ellprime(self) -> Optional[int]:
        return None if self.ell is None else ellprime_of(self.ell)

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def q_number(x, q: complex) -> complex:
    """The q-integer ``[x]_q = (q^x - q^-x)/(q - q^-1)``."""
    return (q ** x - q ** (-x)) / (q - 1 / q)


def q_factorial(k: int, q: complex) -> complex:
    out = 1.0 + 0j
    for j in range(1, k + 1):
        out *= q_number(j, q)
    return out
