"""Figures of merit and closed-form sensing baselines.

Functions that enter an optimization loss accept and return torch tensors
so that gradients flow back to the couplings; they also accept numpy input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
import torch

from qpic import autodiff, circuit, mps
from qpic.autodiff import CDTYPE, RDTYPE


class FomError(ValueError):
    pass


class VacuumOutputError(FomError):
    """The output mode carries (numerically) no photons."""


DEFAULT_WEIGHTS = {
    "cat": {"lambda_rho": 1 - 5e-3, "lambda_s": 5e-3},
    "single_photon": {"lambda_rho": 0.1, "lambda_g": 0.9},
    "sensing": {"lambda_ps": 1.0, "lambda_s": 1e-3},
}


@dataclass
class FomConfig:
    target_rho: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    weights: dict = field(default_factory=dict)
    readout_mode: int = 0
    theta_step: float = 1e-3


def vacuum_mask(d: int, vacuum_factor: float = 9.0) -> np.ndarray:
    """Uniform mask with the (0, 0) entry lowered by ``vacuum_factor``, mean 1."""
    mask = np.ones((d, d))
    mask[0, 0] = 1.0 / vacuum_factor
    return mask / mask.mean()


def _herm(x) -> torch.Tensor:
    return autodiff.as_tensor(x)


def weighted_trace_distance(rho, target, mask=None) -> torch.Tensor:
    """Half the sum of |eigenvalues| of ``mask * (rho - target)``."""
    rho, target = _herm(rho), _herm(target)
    diff = rho - target
    if mask is not None:
        diff = autodiff.as_tensor(mask) * diff
    if not torch.allclose(diff.detach(), diff.detach().mH, atol=1e-10):
        raise FomError("masked density-matrix difference is not Hermitian")
    diff = 0.5 * (diff + diff.mH)
    return 0.5 * torch.linalg.eigvalsh(diff).abs().sum()


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def entropy_penalty(state: mps.BatchedMps, batch: Optional[int] = None) -> torch.Tensor:
    """sqrt(sum over bonds of S^2), entropies averaged over trajectories first.

    ``batch`` restricts the average to one batch entry.
    """
    per_batch, mean = mps.bipartite_entropies(state)
    if batch is not None:
        mean = per_batch[batch]
    return _safe_sqrt((mean**2).sum())


def _psd_sqrt(m: torch.Tensor) -> torch.Tensor:
    w, v = torch.linalg.eigh(0.5 * (m + m.mH))
    return (v * torch.sqrt(torch.clamp(w, min=0)).to(m.dtype)) @ v.mH


def uhlmann_fidelity(rho, target) -> torch.Tensor:
    """(tr sqrt(sqrt(rho) target sqrt(rho)))^2, with the pure-target shortcut."""
    rho, target = _herm(rho), _herm(target)
    purity = torch.trace(target @ target).real
    if abs(float(purity) - 1.0) < 1e-10:
        w, v = torch.linalg.eigh(target.detach())
        t = v[:, -1]
        return (t.conj() @ rho @ t).real
    s = _psd_sqrt(rho)
    inner = s @ target @ s
    w = torch.linalg.eigvalsh(0.5 * (inner + inner.mH))
    return torch.sqrt(torch.clamp(w, min=0)).sum() ** 2


def conditioned_density(rho):
    """Drop vacuum row and column and renormalize; returns (rho_cond, p_signal)."""
    rho = _herm(rho)
    p_signal = 1.0 - rho[0, 0].real
    if float(p_signal.detach()) <= 1e-12:
        raise VacuumOutputError("output is entirely vacuum; nothing to condition on")
    keep = torch.ones(rho.shape[0], dtype=RDTYPE)
    keep[0] = 0.0
    proj = keep.to(CDTYPE)
    cond = proj[:, None] * rho * proj[None, :] / p_signal.to(CDTYPE)
    return cond, p_signal


def g2_from_density(rho) -> torch.Tensor:
    """<a+a+aa> / <a+a>^2 from a (trajectory-averaged) density matrix."""
    rho = _herm(rho)
    n = torch.arange(rho.shape[0], dtype=RDTYPE)
    pops = torch.diagonal(rho).real
    mean = (pops * n).sum()
    if float(mean.detach()) < 1e-10:
        raise VacuumOutputError(f"<n> = {float(mean.detach()):.3e} is too small for g2")
    return (pops * n * (n - 1)).sum() / mean**2


def g2_zero(state: mps.BatchedMps, mode: int) -> torch.Tensor:
    """Normal-ordered g2(0) of ``mode``; numerator and denominator averaged over trajectories."""
    return g2_from_density(mps.reduced_density_matrix(state, mode))


def classical_fisher(p0, p_plus, p_minus, theta_step: float, floor: float = 1e-12):
    """sum_n (dP_n/dtheta)^2 / P_n with a central difference; P_n below ``floor`` skipped."""
    p0 = torch.as_tensor(p0, dtype=RDTYPE) if not isinstance(p0, torch.Tensor) else p0
    p_plus = torch.as_tensor(p_plus, dtype=RDTYPE) if not isinstance(p_plus, torch.Tensor) else p_plus
    p_minus = torch.as_tensor(p_minus, dtype=RDTYPE) if not isinstance(p_minus, torch.Tensor) else p_minus
    deriv = (p_plus - p_minus) / (2 * theta_step)
    keep = p0.detach() >= floor
    safe_p0 = torch.where(keep, p0, torch.ones_like(p0))
    return torch.where(keep, deriv**2 / safe_p0, torch.zeros_like(p0)).sum()


def gaussian_fi(mean_fn: Callable[[float], float], var: float, theta_step: float = 1e-3):
    """(d mean / d theta)^2 / var at theta = 0 by central difference."""
    if var <= 0:
        raise FomError("variance must be positive")
    slope = (mean_fn(theta_step) - mean_fn(-theta_step)) / (2 * theta_step)
    return slope**2 / var


@dataclass
class ReadoutStatistics:
    """Photon statistics of the readout mode at theta = 0 and +-theta_step."""

    probabilities: torch.Tensor  # (3, d): rows theta = 0, +step, -step
    theta_step: float
    state: mps.BatchedMps

    def fisher(self, floor: float = 1e-12) -> torch.Tensor:
        p = self.probabilities
        return classical_fisher(p[0], p[1], p[2], self.theta_step, floor)

    def gaussian(self) -> torch.Tensor:
        p = self.probabilities
        n = torch.arange(p.shape[1], dtype=RDTYPE)
        mean = p @ n
        var = p[0] @ n**2 - mean[0] ** 2
        slope = (mean[1] - mean[2]) / (2 * self.theta_step)
        return slope**2 / var


def readout_statistics(
    spec: circuit.CircuitSpec,
    alphas,
    perturbed_mode: int = 0,
    readout_mode: Optional[int] = None,
    theta_step: float = 1e-3,
    n_max: int = 5,
    chi_max: int = mps.DEFAULT_CHI_MAX,
    s_min: float = mps.DEFAULT_S_MIN,
    j_dt: Optional[torch.Tensor] = None,
) -> ReadoutStatistics:
    """Contract the circuit once with the three phase settings stacked as a batch."""
    if spec.gamma > 0:
        raise FomError("Fisher readout is defined for loss-free circuits")
    if theta_step <= 0:
        raise FomError("theta_step must be positive")
    readout_mode = spec.n_modes - 1 if readout_mode is None else readout_mode
    alphas = np.asarray(alphas, dtype=complex)
    batch_alphas = np.tile(alphas, (3, 1))
    for row, theta in enumerate((0.0, theta_step, -theta_step)):
        batch_alphas[row, perturbed_mode] = alphas[perturbed_mode] * np.exp(1j * theta)
    state = mps.init_product_coherent(batch_alphas, n_max, chi_max=chi_max, s_min=s_min)
    circuit.contract_circuit(state, spec, j_dt=j_dt)
    rhos = mps.site_density_matrices(state, readout_mode)
    probs = torch.diagonal(rhos, dim1=-2, dim2=-1).real
    return ReadoutStatistics(probabilities=probs, theta_step=theta_step, state=state)


def fisher_information_readout(
    spec: circuit.CircuitSpec,
    alphas,
    perturbed_mode: int = 0,
    readout_mode: Optional[int] = None,
    theta_step: float = 1e-3,
    n_max: int = 5,
    **kwargs,
) -> float:
    stats = readout_statistics(spec, alphas, perturbed_mode, readout_mode, theta_step, n_max, **kwargs)
    return float(stats.fisher())


def qfi_coherent(alpha) -> float:
    return 4.0 * abs(alpha) ** 2


def homodyne_pfi(c: float, phi: float, alpha_s, alpha_lo) -> float:
    """Poissonian FI of one beam-splitter output at theta = 0.

    Returns ``inf`` when the output is dark but the numerator is not, and
    ``nan`` when both vanish.
    """
    if not 0.0 <= c <= 1.0:
        raise FomError("mixing coefficient c must lie in [0, 1]")
    s2, lo2 = abs(alpha_s) ** 2, abs(alpha_lo) ** 2
    c2 = c * c
    num = 4.0 * math.sin(phi) ** 2 * c2 * (1 - c2) * s2 * lo2
    den = c2 * s2 + (1 - c2) * lo2 + 2.0 * math.cos(phi) * c * math.sqrt(1 - c2) * abs(alpha_s) * abs(alpha_lo)
    tol = 1e-12 * max(s2 + lo2, 1e-300)
    if abs(den) < tol:
        return math.inf if num > tol else math.nan
    return num / den


def total_fom(kind: str, parts: Mapping[str, torch.Tensor], weights: Optional[Mapping[str, float]] = None):
    """Weighted loss for ``kind`` in {cat, single_photon, sensing}.

    ``parts`` holds ``rho`` / ``s`` / ``g`` / ``fi`` as required by the kind.
    """
    if kind not in DEFAULT_WEIGHTS:
        raise FomError(f"unknown FOM kind {kind!r}")
    w = dict(DEFAULT_WEIGHTS[kind])
    if weights:
        w.update(weights)
    if kind == "cat" and weights and "lambda_s" in weights and "lambda_rho" not in weights:
        w["lambda_rho"] = 1.0 - w["lambda_s"]
    required = {"cat": ("rho", "s"), "single_photon": ("rho", "g"), "sensing": ("fi", "s")}[kind]
    missing = [k for k in required if k not in parts]
    if missing:
        raise FomError(f"{kind} FOM needs parts {missing}")
    if any(v < 0 for v in w.values()):
        raise FomError("FOM weights must be non-negative")
    if kind == "cat":
        return w["lambda_rho"] * parts["rho"] + w["lambda_s"] * parts["s"]
    if kind == "single_photon":
        return w["lambda_rho"] * parts["rho"] + w["lambda_g"] * parts["g"]
    return -w["lambda_ps"] * parts["fi"] + w["lambda_s"] * parts["s"]
