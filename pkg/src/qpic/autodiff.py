"""Differentiable dense-tensor kernel.

Tensors are ``torch.Tensor`` objects and the tape is torch's define-by-run
autograd graph, rebuilt on every evaluation. The pieces that need care in a
tensor-network circuit are supplied here as custom autograd functions:

* :func:`svd_truncated` -- SVD whose backward pass regularizes nearly
  degenerate singular values and keeps the cross terms between retained and
  discarded directions, so truncation is reflected in the gradient.
* :func:`gate_tensor` -- exp(-i (j_dt * hop + u_dt * kerr)) with an exact
  derivative in ``j_dt`` from the Daleckii-Krein (Loewner) formula.
* :func:`qr_decompose` -- QR with a fixed phase convention.

:func:`finite_difference_gradient` has the same call shape as
:func:`value_and_grad` and serves as an oracle for the analytic path.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from qpic.fock import FockSpace, two_mode_generators

CDTYPE = torch.complex128
RDTYPE = torch.float64

# Lorentzian broadening of 1/(s_i^2 - s_j^2); small enough that finite-difference
# Fisher readouts (which amplify absolute errors by 1/theta^2) stay accurate
SVD_EPS = 1e-24


def as_tensor(x, dtype=CDTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def contract(a: torch.Tensor, b: torch.Tensor, index_pairs: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Sum over each (axis of ``a``, axis of ``b``) pair, like ``tensordot``."""
    axes_a = [p[0] for p in index_pairs]
    axes_b = [p[1] for p in index_pairs]
    for i, j in zip(axes_a, axes_b):
        if a.shape[i] != b.shape[j]:
            raise ValueError(
                f"cannot contract axis {i} (dim {a.shape[i]}) with axis {j} (dim {b.shape[j]})"
            )
    return torch.tensordot(a, b, dims=(axes_a, axes_b))


def _safe_reciprocal(s: torch.Tensor) -> torch.Tensor:
    return torch.where(s > 0, 1.0 / torch.where(s > 0, s, torch.ones_like(s)), torch.zeros_like(s))


class _RegularizedSVD(torch.autograd.Function):
    """Thin SVD A = U diag(S) Vh, batched over leading axes."""

    @staticmethod
    def forward(ctx, a, eps):
        u, s, vh = torch.linalg.svd(a, full_matrices=False)
        ctx.save_for_backward(u, s, vh)
        ctx.eps = eps
        return u, s, vh

    @staticmethod
    def backward(ctx, gu, gs, gvh):
        u, s, vh = ctx.saved_tensors
        eps = ctx.eps
        m, n = u.shape[-2], vh.shape[-1]
        k = s.shape[-1]
        uh = u.mH
        v = vh.mH
        if gu is None:
            gu = torch.zeros_like(u)
        if gvh is None:
            gvh = torch.zeros_like(vh)
        gv = gvh.mH

        uhgu = uh @ gu
        vhgv = vh @ gv
        skew_u = uhgu - uhgu.mH
        skew_v = vhgv - vhgv.mH

        s2 = s * s
        # delta[i, j] = s_j^2 - s_i^2; Lorentzian-broadened inverse, zero on the diagonal
        delta = s2.unsqueeze(-2) - s2.unsqueeze(-1)
        nonzero = delta != 0
        f = torch.where(nonzero, delta / torch.where(nonzero, delta * delta + eps, torch.ones_like(delta)), torch.zeros_like(delta))
        s_c = s.to(u.dtype)
        inner = (skew_u * s_c.unsqueeze(-2) + s_c.unsqueeze(-1) * skew_v) * f.to(u.dtype)
        diag = torch.zeros_like(s_c)
        if gs is not None:
            diag = diag + gs.to(u.dtype)
        inv_s = _safe_reciprocal(s)
        if u.is_complex():
            # gauge term: imaginary diagonal of U^H gU
            diag = diag + torch.diagonal(skew_u, dim1=-2, dim2=-1) * (0.5 * inv_s).to(u.dtype)
        inner = inner + torch.diag_embed(diag)
        ga = u @ inner @ vh
        inv_s_c = inv_s.to(u.dtype)
        if m > k:
            gu_sinv = gu * inv_s_c.unsqueeze(-2)
            ga = ga + (gu_sinv - u @ (uh @ gu_sinv)) @ vh
        if n > k:
            gv_sinv = gv * inv_s_c.unsqueeze(-2)
            ga = ga + u @ (gv_sinv - v @ (vh @ gv_sinv)).mH
        return ga, None


def svd(a: torch.Tensor, eps: float = SVD_EPS):
    """Thin SVD with the regularized backward pass."""
    if not torch.isfinite(a).all():
        raise FloatingPointError("non-finite entries in matrix passed to svd")
    return _RegularizedSVD.apply(a, eps)


def truncation_rank(s: torch.Tensor, chi_max: int, s_min: float) -> int:
    """Shared rank for a batch of descending spectra ``s[..., k]``."""
    s = s.detach()
    s_max = s[..., :1]
    keep = (s >= s_min * s_max) & (s > 0)
    count = int(keep.sum(dim=-1).max().item()) if keep.numel() else 0
    return max(1, min(chi_max, count))


def svd_truncated(
    theta: torch.Tensor,
    chi_max: int,
    s_min: float,
    normalize: bool = True,
    eps: float = SVD_EPS,
):
    """Truncated SVD of a (batched) matrix.

    Keeps ``k = min(chi_max, #{s_i >= s_min * s_max})`` values (the largest
    count over the batch, so every batch shares one bond dimension).

    Returns ``(U, S, Vh, discarded_weight)``; ``discarded_weight`` is the
    per-batch sum of discarded ``s_i**2``, measured before any
    renormalization. With ``normalize`` the retained
    spectrum is rescaled to unit 2-norm.
    """
    u, s, vh = svd(theta, eps)
    k = truncation_rank(s, chi_max, s_min)
    discarded = (s.detach()[..., k:] ** 2).sum(dim=-1)
    u, s, vh = u[..., :k], s[..., :k], vh[..., :k, :]
    if normalize:
        norm = torch.linalg.vector_norm(s, dim=-1, keepdim=True)
        s = s / norm
    return u, s, vh, discarded


def qr_decompose(a: torch.Tensor):
    """Reduced QR with real non-negative diagonal of R (phases absorbed in Q)."""
    q, r = torch.linalg.qr(a, mode="reduced")
    diag = torch.diagonal(r, dim1=-2, dim2=-1)
    mag = diag.abs()
    phase = torch.where(mag > 0, diag / torch.where(mag > 0, mag, torch.ones_like(mag)), torch.ones_like(diag))
    q = q * phase.unsqueeze(-2)
    r = r * phase.conj().unsqueeze(-1)
    return q, r


def _loewner(w: np.ndarray, t: float) -> np.ndarray:
    """(exp(-i t w_i) - exp(-i t w_j)) / (w_i - w_j), with the diagonal limit.

    Written as -i t exp(-i t mean) sinc(t * half_gap) so coincident eigenvalues
    need no special casing.
    """
    mean = 0.5 * (w[:, None] + w[None, :])
    half_gap = 0.5 * (w[:, None] - w[None, :])
    return -1j * t * np.exp(-1j * t * mean) * np.sinc(t * half_gap / np.pi)


class _GateExp(torch.autograd.Function):
    @staticmethod
    def forward(ctx, j_dt, u_dt, n_max):
        hop, kerr = two_mode_generators(FockSpace(n_max))
        h = float(j_dt.detach()) * hop + float(u_dt) * kerr
        w, q = np.linalg.eigh(h)
        v = (q * np.exp(-1j * w)) @ q.conj().T
        ctx.q = q
        ctx.w = w
        ctx.hop = hop
        return torch.from_numpy(v)

    @staticmethod
    def backward(ctx, gv):
        q, w = ctx.q, ctx.w
        dv = q @ (_loewner(w, 1.0) * (q.conj().T @ ctx.hop @ q)) @ q.conj().T
        grad = np.real(np.sum(gv.resolve_conj().numpy().conj() * dv))
        return torch.tensor(grad, dtype=RDTYPE), None, None


def gate_tensor(j_dt, u_dt: float, space: FockSpace) -> torch.Tensor:
    """Differentiable (d, d, d, d) coupler tensor, ``j_dt`` may carry grad."""
    if not isinstance(j_dt, torch.Tensor):
        j_dt = torch.tensor(float(j_dt), dtype=RDTYPE)
    v = _GateExp.apply(j_dt.to(RDTYPE), float(u_dt), space.n_max)
    d = space.d
    return v.reshape(d, d, d, d)


def param_gate_derivative(j: float, u: float, dt: float, space: FockSpace) -> np.ndarray:
    """d/dJ exp(-i dt H(J, U)) as a (d^2, d^2) matrix."""
    hop, kerr = two_mode_generators(space)
    w, q = np.linalg.eigh(j * hop + u * kerr)
    return q @ (_loewner(w, dt) * (q.conj().T @ hop @ q)) @ q.conj().T


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    """Reverse sweep from a real scalar ``loss`` to each named leaf parameter."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.is_complex():
        raise ValueError("loss must be real")
    names = list(params)
    leaves = [params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    out = {}
    for name, leaf, g in zip(names, leaves, grads):
        out[name] = np.zeros(tuple(leaf.shape)) if g is None else g.detach().numpy().copy()
    return out


def value_and_grad(fn: Callable[[torch.Tensor], torch.Tensor], x: np.ndarray):
    """Loss and gradient of ``fn`` at real vector ``x`` via the autograd tape."""
    xt = torch.tensor(np.asarray(x, dtype=float), dtype=RDTYPE, requires_grad=True)
    loss = fn(xt)
    grad = backward(loss, {"x": xt})["x"]
    return float(loss.detach()), grad


def finite_difference_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor], x: np.ndarray, step: float = 1e-5
):
    """Central-difference counterpart of :func:`value_and_grad`."""
    x = np.asarray(x, dtype=float)
    with torch.no_grad():
        f0 = float(fn(torch.tensor(x, dtype=RDTYPE)))
        grad = np.zeros_like(x)
        for i in range(x.size):
            xp = x.copy()
            xm = x.copy()
            xp.flat[i] += step
            xm.flat[i] -= step
            grad.flat[i] = (float(fn(torch.tensor(xp, dtype=RDTYPE))) - float(fn(torch.tensor(xm, dtype=RDTYPE)))) / (2 * step)
    return f0, grad


GRADIENT_ENGINES = {"autodiff": value_and_grad, "finite-difference": finite_difference_gradient}
