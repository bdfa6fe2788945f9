"""Truncated single-mode bosonic algebra.

Basis ordering for two modes is ``|n1, n2> -> n1 * d + n2``. All
Hamiltonians use hbar = 1; rates multiply the gate time to give the
dimensionless products ``j_dt`` and ``u_dt``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import lgamma

import numpy as np


class DegenerateStateError(ValueError):
    """Requested state vanishes identically (e.g. odd cat with beta = 0)."""


@dataclass(frozen=True)
class FockSpace:
    """Single bosonic mode truncated at ``n_max`` photons."""

    n_max: int

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1 (dimension >= 2), got {self.n_max}")

    @property
    def d(self) -> int:
        return self.n_max + 1

    @property
    def numbers(self) -> np.ndarray:
        return np.arange(self.d, dtype=float)


@dataclass(frozen=True)
class TwoModeGate:
    """Two-mode unitary as a (out1, out2, in1, in2) tensor."""

    tensor: np.ndarray
    j_dt: float
    u_dt: float

    @property
    def matrix(self) -> np.ndarray:
        d = self.tensor.shape[0]
        return self.tensor.reshape(d * d, d * d)


def annihilation(space: FockSpace) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, space.d)), k=1).astype(complex)


def creation(space: FockSpace) -> np.ndarray:
    return annihilation(space).conj().T


def number(space: FockSpace) -> np.ndarray:
    return np.diag(space.numbers).astype(complex)


def coherent_vector(alpha: complex, space: FockSpace, renormalize: bool = True) -> np.ndarray:
    """Fock amplitudes of |alpha>, renormalized after truncation by default."""
    n = np.arange(space.d)
    log_fact = np.array([lgamma(k + 1) for k in n])
    if alpha == 0:
        vec = np.zeros(space.d, dtype=complex)
        vec[0] = 1.0
        return vec
    # alpha^n / sqrt(n!) evaluated in log space to stay finite for large n_max
    mag = np.exp(n * np.log(abs(alpha)) - 0.5 * log_fact - 0.5 * abs(alpha) ** 2)
    vec = mag * np.exp(1j * n * np.angle(alpha))
    if renormalize:
        vec = vec / np.linalg.norm(vec)
    return vec


def cat_vector(beta: complex, parity: str, space: FockSpace) -> np.ndarray:
    """N(|beta> + |-beta>) for ``parity='even'``, N(|beta> - |-beta>) for ``'odd'``."""
    if parity not in ("even", "odd"):
        raise ValueError(f"parity must be 'even' or 'odd', got {parity!r}")
    if parity == "odd" and beta == 0:
        raise DegenerateStateError("odd cat state with beta = 0 vanishes")
    sign = 1.0 if parity == "even" else -1.0
    plus = coherent_vector(beta, space, renormalize=False)
    minus = coherent_vector(-beta, space, renormalize=False)
    vec = plus + sign * minus
    norm = np.linalg.norm(vec)
    if norm < 1e-300:
        raise DegenerateStateError("cat state has zero norm after truncation")
    return vec / norm


@lru_cache(maxsize=None)
def _two_mode_generators(n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """(hopping, kerr) parts: H = J * hopping + U * kerr."""
    space = FockSpace(n_max)
    a = annihilation(space)
    ident = np.eye(space.d)
    a1 = np.kron(a, ident)
    a2 = np.kron(ident, a)
    hop = -(a1.conj().T @ a2 + a2.conj().T @ a1)
    n = space.numbers
    kerr_1 = 0.5 * n * (n - 1)
    kerr = np.diag(np.add.outer(kerr_1, kerr_1).ravel()).astype(complex)
    hop.setflags(write=False)
    kerr.setflags(write=False)
    return hop, kerr


def two_mode_generators(space: FockSpace) -> tuple[np.ndarray, np.ndarray]:
    return _two_mode_generators(space.n_max)


def two_mode_hamiltonian(j: float, u: float, space: FockSpace) -> np.ndarray:
    """-J (a1^+ a2 + a2^+ a1) + (U/2)(a1^+2 a1^2 + a2^+2 a2^2)."""
    hop, kerr = two_mode_generators(space)
    return j * hop + u * kerr


def hermitian_expm(h: np.ndarray, t: float = 1.0) -> np.ndarray:
    """exp(-i t h) for Hermitian ``h`` via its eigendecomposition."""
    w, q = np.linalg.eigh(h)
    return (q * np.exp(-1j * t * w)) @ q.conj().T


def gate_unitary(j_dt: float, u_dt: float, space: FockSpace) -> TwoModeGate:
    d = space.d
    v = hermitian_expm(two_mode_hamiltonian(j_dt, u_dt, space))
    return TwoModeGate(tensor=v.reshape(d, d, d, d), j_dt=float(j_dt), u_dt=float(u_dt))


def edge_gate(u_dt: float, space: FockSpace) -> np.ndarray:
    n = space.numbers
    return np.diag(np.exp(-1j * u_dt * n * (n - 1) / 2))
