"""Quantum-jump sampling of photon loss.

Each call to :func:`loss_layer` visits the modes left to right with the
orthogonality center on the visited site, so the occupation entering the
click probability is a local quantity. Random draws are keyed by
``(seed, batch, layer, mode)``; a trajectory therefore sees the same numbers
regardless of batch size, sharding or evaluation order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from math import comb
from typing import Optional

import numpy as np
import torch

from qpic import mps
from qpic.autodiff import CDTYPE
from qpic.fock import annihilation


class StepSizeWarning(UserWarning):
    """Loss probability per step is large enough for first-order error to matter."""


SCHEMES = ("first-order", "kraus")


@dataclass(frozen=True)
class LossEvent:
    batch: int
    layer: int
    mode: int
    jumped: bool
    click_probability: float
    photons_lost: int = 0


def uniform_draw(seed: int, batch: int, layer: int, mode: int) -> float:
    """Uniform number in [0, 1) determined only by the four keys."""
    words = np.random.SeedSequence([seed, batch, layer, mode]).generate_state(2, np.uint32)
    bits = (int(words[0]) << 21) ^ (int(words[1]) >> 11)
    return (bits & ((1 << 53) - 1)) / float(1 << 53)


def trajectory_average(values):
    """Sample mean and standard error (sample stddev / sqrt(N))."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("need at least one trajectory")
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def loss_layer(
    state: mps.BatchedMps,
    gamma_dt: float,
    layer: int = 0,
    seed: int = 0,
    replay: Optional[np.ndarray] = None,
    scheme: str = "kraus",
):
    """Apply one jump/no-jump gate to every mode of every trajectory.

    ``scheme="first-order"`` clicks with probability ``gamma_dt * n`` and
    applies either ``a`` or ``exp(-gamma_dt n / 2)``. ``scheme="kraus"``
    samples the number of lost photons ``k`` from the exact amplitude-damping
    channel over the step and applies ``exp(-gamma_dt n / 2) a^k``; it has no
    step-size bias.

    ``replay`` is an optional integer ``(batch, n_modes)`` array of photons
    lost (0/1 for the first-order scheme) to reuse instead of sampling.
    Outcomes never carry gradient; the damping and the per-trajectory
    renormalization do.

    Returns ``(state, events)`` with one :class:`LossEvent` per (batch, mode).
    """
    if gamma_dt < 0:
        raise ValueError("loss rate must be non-negative")
    n_batch, n_modes = state.batch_size, state.n_modes
    if gamma_dt == 0:
        events = [LossEvent(b, layer, l, False, 0.0) for b in range(n_batch) for l in range(n_modes)]
        return state, events
    if scheme not in SCHEMES:
        raise ValueError(f"unknown loss scheme {scheme!r}; expected one of {SCHEMES}")
    if scheme == "first-order" and gamma_dt * state.n_max > 0.1:
        warnings.warn(
            f"gamma*dt*n_max = {gamma_dt * state.n_max:.3g} > 0.1; click probability is first order in dt",
            StepSizeWarning,
            stacklevel=2,
        )
    space = state.space
    a = annihilation(space)
    numbers = space.numbers
    damp = np.diag(np.exp(-0.5 * gamma_dt * numbers))
    # photons lost k -> operator (exp(-gamma_dt n/2) a^k for kraus, a for first order)
    if scheme == "kraus":
        ops_by_k = [damp @ np.linalg.matrix_power(a, k) for k in range(space.d)]
        q = -np.expm1(-gamma_dt)
        n_int = np.arange(space.d)
        # thinning[n, k] = C(n, k) q^k (1 - q)^(n - k)
        thinning = np.array([[comb(n, k) * q**k * (1 - q) ** (n - k) for k in n_int] for n in n_int])
    else:
        ops_by_k = [damp, a]
    ops_by_k = torch.from_numpy(np.stack(ops_by_k)).to(CDTYPE)
    events = []

    def act(l, center):
        weights = (center.detach().abs() ** 2).sum(dim=(1, 3)).numpy()
        weights = weights / weights.sum(axis=1, keepdims=True)
        occupation = weights @ numbers
        if scheme == "kraus":
            k_probs = weights @ thinning
            prob = 1.0 - k_probs[:, 0]
        else:
            prob = np.clip(gamma_dt * occupation, 0.0, 1.0)
        if replay is not None:
            lost = np.asarray(replay[:, l], dtype=int)
        else:
            draws = np.array([uniform_draw(seed, b, layer, l) for b in range(n_batch)])
            if scheme == "kraus":
                cdf = np.cumsum(k_probs, axis=1)
                lost = np.minimum((draws[:, None] >= cdf).sum(axis=1), space.d - 1)
            else:
                lost = (draws < prob).astype(int)
        # a vacuum mode has click probability zero; never annihilate it
        lost = np.where(occupation > 1e-14, lost, 0)
        ops = ops_by_k[torch.from_numpy(lost)]
        center = torch.einsum("bij,bkjm->bkim", ops, center)
        norm = torch.linalg.vector_norm(center.reshape(n_batch, -1), dim=1)
        mps._check_norm(norm)
        state.norm_log = state.norm_log + np.log(norm.detach().numpy())
        events.extend(
            LossEvent(b, layer, l, bool(lost[b] > 0), float(prob[b]), int(lost[b])) for b in range(n_batch)
        )
        return center / norm.to(CDTYPE)[:, None, None, None]

    mps.recanonicalize(state, on_center=act)
    events.sort(key=lambda e: (e.batch, e.mode))
    return state, events


def write_jump_csv(path, photons_lost: np.ndarray, probability: np.ndarray) -> None:
    """One row per (batch, layer, mode); ``jumped`` holds the photons lost."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch", "layer", "mode", "jumped", "probability"])
        for b, d, l in np.ndindex(*photons_lost.shape):
            writer.writerow([b, d, l, int(photons_lost[b, d, l]), repr(float(probability[b, d, l]))])
