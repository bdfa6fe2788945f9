"""Independent dense references for the MPS, gradient and loss code.

Nothing here imports the MPS or autodiff modules. Gates are built from
the two-mode Hamiltonian with ``scipy.linalg.expm`` and embedded with
Kronecker products on the full state vector.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg


def ladder(d: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, d)), k=1).astype(complex)


def coherent(alpha: complex, d: int) -> np.ndarray:
    v = np.array([alpha**n / math.sqrt(math.factorial(n)) for n in range(d)], dtype=complex)
    return v / np.linalg.norm(v)


def hamiltonian(j: float, u: float, d: int) -> np.ndarray:
    a = ladder(d)
    eye = np.eye(d)
    a1, a2 = np.kron(a, eye), np.kron(eye, a)
    hop = -(a1.conj().T @ a2 + a2.conj().T @ a1)
    kerr = 0.5 * (a1.conj().T @ a1.conj().T @ a1 @ a1 + a2.conj().T @ a2.conj().T @ a2 @ a2)
    return j * hop + u * kerr


def two_mode_unitary(j_dt: float, u_dt: float, d: int) -> np.ndarray:
    return scipy.linalg.expm(-1j * hamiltonian(j_dt, u_dt, d))


def single_mode_kerr(u_dt: float, d: int) -> np.ndarray:
    n = np.arange(d)
    return np.diag(np.exp(-0.5j * u_dt * n * (n - 1)))


def embed(op: np.ndarray, site: int, width: int, n_modes: int, d: int) -> np.ndarray:
    """Operator on ``width`` adjacent modes starting at ``site``, as a full matrix."""
    left = np.eye(d**site)
    right = np.eye(d ** (n_modes - site - width))
    return np.kron(np.kron(left, op), right)


def product_state(alphas, d: int) -> np.ndarray:
    psi = np.ones(1, dtype=complex)
    for a in alphas:
        psi = np.kron(psi, coherent(a, d))
    return psi


def layer_sites(layer: int, n_modes: int, offset: int = 0) -> list:
    return list(range((layer + offset) % 2, n_modes - 1, 2))


def run_circuit(alphas, j_dt: np.ndarray, u_dt: float, d: int, offset: int = 0) -> np.ndarray:
    """Dense brick circuit: couplers of each layer, then Kerr on uncoupled edge modes."""
    n_modes = len(alphas)
    psi = product_state(alphas, d)
    for layer in range(j_dt.shape[1]):
        sites = layer_sites(layer, n_modes, offset)
        covered = set()
        for l in sites:
            psi = embed(two_mode_unitary(j_dt[l, layer], u_dt, d), l, 2, n_modes, d) @ psi
            covered.update((l, l + 1))
        if u_dt:
            for l in range(n_modes):
                if l not in covered:
                    psi = embed(single_mode_kerr(u_dt, d), l, 1, n_modes, d) @ psi
    return psi


def reduced_density(psi: np.ndarray, site: int, n_modes: int, d: int) -> np.ndarray:
    t = psi.reshape((d,) * n_modes)
    t = np.moveaxis(t, site, 0).reshape(d, -1)
    return t @ t.conj().T


def mean_occupation(psi: np.ndarray, site: int, n_modes: int, d: int) -> float:
    rho = reduced_density(psi, site, n_modes, d)
    return float(np.real(np.trace(rho @ np.diag(np.arange(d)))))


def central_difference(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = step
        grad[idx] = (fn(x + e) - fn(x - e)) / (2 * step)
    return grad


def damped_mean_photons(alpha: complex, exposure: float) -> float:
    """Amplitude damping maps a coherent state to one with alpha * exp(-exposure / 2)."""
    return abs(alpha) ** 2 * math.exp(-exposure)


def coherent_rotation(alphas, j_dt: np.ndarray, offset: int = 0) -> np.ndarray:
    """Output coherent amplitudes of a linear brick circuit (single-particle picture)."""
    n_modes = len(alphas)
    amp = np.asarray(alphas, dtype=complex)
    for layer in range(j_dt.shape[1]):
        for l in layer_sites(layer, n_modes, offset):
            c, s = math.cos(j_dt[l, layer]), math.sin(j_dt[l, layer])
            a, b = amp[l], amp[l + 1]
            amp[l], amp[l + 1] = c * a + 1j * s * b, 1j * s * a + c * b
    return amp
