"""Batched matrix-product states in right-canonical form.

Site tensors have shape ``(batch, left_bond, physical, right_bond)``. The
Schmidt values of bond ``l`` (between sites ``l`` and ``l + 1``) are stored
per batch in ``singular_values[l]``; together with right-canonical site
tensors they make every single-site quantity a local contraction.

Operations mutate the state they receive and return it for chaining.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from qpic import autodiff
from qpic.autodiff import CDTYPE, RDTYPE
from qpic.fock import FockSpace, TwoModeGate, coherent_vector


class TruncationWarning(UserWarning):
    """Discarded Schmidt weight exceeded the configured budget."""


class ZeroNormError(ArithmeticError):
    """A trajectory was annihilated (e.g. a jump applied to the vacuum)."""


class DenseCapError(ValueError):
    """Dense conversion requested for a Hilbert space above the cap."""


DEFAULT_CHI_MAX = 500
DEFAULT_S_MIN = 1e-6
DENSE_CAP = 4096


@dataclass
class BatchedMps:
    tensors: list
    singular_values: list
    n_max: int
    chi_max: int = DEFAULT_CHI_MAX
    s_min: float = DEFAULT_S_MIN
    canonical: bool = True
    norm_log: np.ndarray = field(default=None)
    discarded: np.ndarray = field(default=None)
    truncation_budget: float = 1e-6

    def __post_init__(self):
        if self.norm_log is None:
            self.norm_log = np.zeros(self.batch_size)
        if self.discarded is None:
            self.discarded = np.zeros(self.batch_size)

    @property
    def n_modes(self) -> int:
        return len(self.tensors)

    @property
    def batch_size(self) -> int:
        return self.tensors[0].shape[0]

    @property
    def d(self) -> int:
        return self.n_max + 1

    @property
    def space(self) -> FockSpace:
        return FockSpace(self.n_max)

    def bond_dimensions(self) -> list[int]:
        return [t.shape[-1] for t in self.tensors[:-1]]

    def max_bond_dimension(self) -> int:
        dims = self.bond_dimensions()
        return max(dims) if dims else 1

    def left_schmidt(self, site: int) -> torch.Tensor:
        """Schmidt values on the bond to the left of ``site``, shape (batch, chi)."""
        if site == 0:
            return torch.ones(self.batch_size, 1, dtype=RDTYPE)
        return self.singular_values[site - 1]

    def copy(self) -> "BatchedMps":
        return BatchedMps(
            tensors=list(self.tensors),
            singular_values=list(self.singular_values),
            n_max=self.n_max,
            chi_max=self.chi_max,
            s_min=self.s_min,
            canonical=self.canonical,
            norm_log=self.norm_log.copy(),
            discarded=self.discarded.copy(),
            truncation_budget=self.truncation_budget,
        )


def init_product_coherent(
    alphas,
    n_max: int,
    chi_max: int = DEFAULT_CHI_MAX,
    batch_count: int = 1,
    s_min: float = DEFAULT_S_MIN,
) -> BatchedMps:
    """Product of truncated coherent states.

    ``alphas`` is either one amplitude per mode (shared by every batch) or a
    ``(batch, n_modes)`` array giving each batch its own input.
    """
    alphas = np.asarray(alphas, dtype=complex)
    if alphas.ndim == 1:
        if batch_count < 1:
            raise ValueError("batch_count must be >= 1")
        alphas = np.broadcast_to(alphas, (batch_count, alphas.size))
    n_batch, n_modes = alphas.shape
    if n_modes < 1:
        raise ValueError("need at least one mode")
    space = FockSpace(n_max)
    tensors = []
    for l in range(n_modes):
        vecs = np.stack([coherent_vector(a, space) for a in alphas[:, l]])
        tensors.append(torch.from_numpy(vecs.reshape(n_batch, 1, space.d, 1)).to(CDTYPE))
    svals = [torch.ones(n_batch, 1, dtype=RDTYPE) for _ in range(n_modes - 1)]
    return BatchedMps(tensors=tensors, singular_values=svals, n_max=n_max, chi_max=chi_max, s_min=s_min)


def _gate_as_tensor(gate, d: int) -> torch.Tensor:
    if isinstance(gate, TwoModeGate):
        gate = gate.tensor
    gate = autodiff.as_tensor(gate)
    return gate.reshape(d, d, d, d)


def _record_discarded(state: BatchedMps, weight: torch.Tensor, where: str) -> None:
    w = weight.detach().numpy()
    state.discarded = state.discarded + w
    if np.any(w > state.truncation_budget):
        warnings.warn(
            f"{where}: discarded weight {w.max():.3e} exceeds budget {state.truncation_budget:.1e}",
            TruncationWarning,
            stacklevel=3,
        )


def apply_two_mode_gate(state: BatchedMps, gate, site: int) -> BatchedMps:
    """Apply a coupler on sites (site, site + 1) and split back with SVD."""
    if not state.canonical:
        raise ValueError("apply_two_mode_gate needs a right-canonical state")
    if not 0 <= site < state.n_modes - 1:
        raise IndexError(f"two-mode gate site {site} out of range for {state.n_modes} modes")
    d = state.d
    v = _gate_as_tensor(gate, d)
    b1, b2 = state.tensors[site], state.tensors[site + 1]
    n_batch, chi_l = b1.shape[0], b1.shape[1]
    chi_r = b2.shape[-1]
    pair = torch.einsum("bimk,bknr->bimnr", b1, b2)
    pair = torch.einsum("pqmn,bimnr->bipqr", v, pair)
    s_left = state.left_schmidt(site).to(CDTYPE)
    theta = (s_left[:, :, None, None, None] * pair).reshape(n_batch, chi_l * d, d * chi_r)
    _, s, vh, discarded = autodiff.svd_truncated(theta, state.chi_max, state.s_min, normalize=False)
    k = s.shape[-1]
    kept_norm = torch.linalg.vector_norm(s, dim=-1)
    right = vh.reshape(n_batch, k, d, chi_r)
    # B_left = (V B B) Vh^dagger avoids dividing by the left Schmidt values
    left = torch.einsum("bipqr,bkqr->bipk", pair, right.conj())
    left = left / kept_norm.to(CDTYPE)[:, None, None, None]
    state.tensors[site] = left
    state.tensors[site + 1] = right
    state.singular_values[site] = s / kept_norm[:, None]
    _record_discarded(state, discarded, f"gate on sites ({site}, {site + 1})")
    return state


def _is_unitary(op: torch.Tensor) -> bool:
    op = op.detach()
    eye = torch.eye(op.shape[-1], dtype=op.dtype)
    return bool(torch.allclose(op.mH @ op, eye.expand_as(op), atol=1e-12))


def _contract_site(op: torch.Tensor, tensor: torch.Tensor) -> torch.Tensor:
    if op.dim() == 2:
        return torch.einsum("ij,bkjm->bkim", op, tensor)
    return torch.einsum("bij,bkjm->bkim", op, tensor)


def _check_norm(norm: torch.Tensor) -> None:
    bad = (norm.detach() <= 1e-150).nonzero().flatten().tolist()
    if bad:
        raise ZeroNormError(f"trajectory batches {bad} have zero norm")


def recanonicalize(
    state: BatchedMps,
    on_center: Optional[Callable[[int, torch.Tensor], torch.Tensor]] = None,
    renormalize: bool = True,
) -> BatchedMps:
    """Restore right-canonical form and recompute every bond spectrum.

    A left-to-right sweep moves the orthogonality center through the chain;
    ``on_center(site, center)`` may replace the center tensor on the way
    (this is how loss gates are applied with a local norm). A right-to-left
    truncated-SVD sweep then rebuilds right-canonical tensors and Schmidt
    values. With ``renormalize`` each batch is scaled back to unit norm and
    the log of the removed factor is accumulated in ``norm_log``.

    The left sweep uses SVD rather than QR because individual trajectories
    may be rank deficient on a bond shared across the batch.
    """
    n_modes = state.n_modes
    tensors = list(state.tensors)
    center = tensors[0]
    n_batch = center.shape[0]
    for l in range(n_modes):
        if on_center is not None:
            center = on_center(l, center)
        if l == n_modes - 1:
            break
        _, chi_l, d, chi_r = center.shape
        u, s, vh = autodiff.svd(center.reshape(n_batch, chi_l * d, chi_r))
        tensors[l] = u.reshape(n_batch, chi_l, d, u.shape[-1])
        rest = s.to(CDTYPE).unsqueeze(-1) * vh
        center = torch.einsum("bij,bjdk->bidk", rest, tensors[l + 1])
    norm = torch.linalg.vector_norm(center.reshape(n_batch, -1), dim=1)
    _check_norm(norm)
    if renormalize:
        state.norm_log = state.norm_log + np.log(norm.detach().numpy())
        center = center / norm.to(CDTYPE)[:, None, None, None]
    svals = list(state.singular_values)
    for l in range(n_modes - 1, 0, -1):
        _, chi_l, d, chi_r = center.shape
        u, s, vh, discarded = autodiff.svd_truncated(
            center.reshape(n_batch, chi_l, d * chi_r), state.chi_max, state.s_min, normalize=False
        )
        k = s.shape[-1]
        kept_norm = torch.linalg.vector_norm(s, dim=-1)
        s_norm = s / kept_norm[:, None]
        tensors[l] = vh.reshape(n_batch, k, d, chi_r)
        svals[l - 1] = s_norm
        us = u * s_norm.to(CDTYPE).unsqueeze(-2)
        if not renormalize:
            us = us * kept_norm.to(CDTYPE)[:, None, None]
        center = torch.einsum("bidj,bjk->bidk", tensors[l - 1], us)
        _record_discarded(state, discarded, f"recanonicalization at bond {l - 1}")
    tensors[0] = center
    state.tensors = tensors
    state.singular_values = svals
    state.canonical = True
    return state


def apply_single_mode(state: BatchedMps, op, site: int, renormalize: bool = True) -> BatchedMps:
    """Contract a single-mode operator (shared or per-batch) on ``site``.

    Unitary operators keep the canonical form; anything else triggers a
    recanonicalization sweep.
    """
    if not state.canonical:
        raise ValueError("apply_single_mode needs a right-canonical state")
    op = autodiff.as_tensor(op)
    if _is_unitary(op):
        state.tensors[site] = _contract_site(op, state.tensors[site])
        return state

    def act(l, center):
        return _contract_site(op, center) if l == site else center

    return recanonicalize(state, on_center=act, renormalize=renormalize)


def site_density_matrices(state: BatchedMps, site: int) -> torch.Tensor:
    """Per-batch reduced density matrices of ``site``, shape (batch, d, d)."""
    if not state.canonical:
        raise ValueError("local quantities need a right-canonical state")
    s2 = state.left_schmidt(site).to(CDTYPE) ** 2
    b = state.tensors[site]
    return torch.einsum("bi,bijk,bimk->bjm", s2, b, b.conj())


def reduced_density_matrix(state: BatchedMps, site: int) -> torch.Tensor:
    """Trajectory-averaged reduced density matrix of one mode."""
    return site_density_matrices(state, site).mean(dim=0)


def local_expectation(state: BatchedMps, op, site: int):
    """Per-batch real expectation values of a Hermitian operator and their mean."""
    rho = site_density_matrices(state, site)
    op = autodiff.as_tensor(op)
    values = torch.einsum("bjm,mj->b", rho, op).real
    return values, values.mean()


def _entropy_terms(s: torch.Tensor) -> torch.Tensor:
    p = s * s
    safe = torch.where(p > 0, p, torch.ones_like(p))
    return -(torch.where(p > 0, p * torch.log(safe), torch.zeros_like(p))).sum(dim=-1)


def bipartite_entropies(state: BatchedMps):
    """Von Neumann entropy of every internal bond.

    Returns ``(per_batch, mean)`` with shapes ``(batch, n_modes - 1)`` and
    ``(n_modes - 1,)``.
    """
    if state.n_modes == 1:
        zero = torch.zeros(state.batch_size, 0, dtype=RDTYPE)
        return zero, zero.mean(dim=0)
    per_batch = torch.stack([_entropy_terms(s) for s in state.singular_values], dim=1)
    return per_batch, per_batch.mean(dim=0)


def to_dense(state: BatchedMps, batch: int = 0, cap: int = DENSE_CAP) -> np.ndarray:
    """Full state vector of one batch, ordered with mode 0 most significant."""
    size = state.d ** state.n_modes
    if size > cap:
        raise DenseCapError(f"dense dimension {size} exceeds cap {cap}")
    with torch.no_grad():
        psi = state.tensors[0][batch]
        for t in state.tensors[1:]:
            psi = torch.einsum("...k,kdr->...dr", psi, t[batch])
        return psi.reshape(-1).numpy().copy()


def save_snapshot(state: BatchedMps, path) -> None:
    """Write a self-describing ``.npz`` container."""
    meta = {
        "format": "qpic-mps",
        "version": 1,
        "n_modes": state.n_modes,
        "batch_size": state.batch_size,
        "n_max": state.n_max,
        "chi_max": state.chi_max,
        "s_min": state.s_min,
        "canonical": state.canonical,
        "truncation_budget": state.truncation_budget,
        "shapes": [list(t.shape) for t in state.tensors],
    }
    arrays = {f"site_{i}": t.detach().numpy() for i, t in enumerate(state.tensors)}
    arrays.update({f"svals_{i}": s.detach().numpy() for i, s in enumerate(state.singular_values)})
    np.savez(path, meta=json.dumps(meta), norm_log=state.norm_log, discarded=state.discarded, **arrays)


def load_snapshot(path) -> BatchedMps:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != "qpic-mps":
            raise ValueError(f"{path} is not an MPS snapshot")
        n = meta["n_modes"]
        tensors = [torch.from_numpy(data[f"site_{i}"].copy()) for i in range(n)]
        svals = [torch.from_numpy(data[f"svals_{i}"].copy()) for i in range(n - 1)]
        return BatchedMps(
            tensors=tensors,
            singular_values=svals,
            n_max=meta["n_max"],
            chi_max=meta["chi_max"],
            s_min=meta["s_min"],
            canonical=meta["canonical"],
            norm_log=data["norm_log"].copy(),
            discarded=data["discarded"].copy(),
            truncation_budget=meta["truncation_budget"],
        )
