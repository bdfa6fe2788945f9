"""Brick-pattern coupler circuits and their contraction.

Couplings are stored as dimensionless products ``j_dt[l, d] = J_{l,d} dt_d``
on a ``(n_modes - 1, depth)`` grid; slots outside the brick pattern are
ignored. Rates are recovered by dividing by ``dt``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import torch

from qpic import autodiff, mps, noise
from qpic.autodiff import RDTYPE
from qpic.fock import FockSpace, edge_gate


class CircuitConfigError(ValueError):
    pass


@dataclass
class CircuitSpec:
    n_modes: int
    depth: int
    j_dt: np.ndarray
    u: float = 0.0
    dt: np.ndarray = None
    gamma: float = 0.0
    first_offset: int = 0
    loss_scheme: str = "kraus"

    def __post_init__(self):
        if self.n_modes < 2 or self.depth < 1:
            raise CircuitConfigError(f"need n_modes >= 2 and depth >= 1, got {self.n_modes}, {self.depth}")
        if self.first_offset not in (0, 1):
            raise CircuitConfigError("first_offset must be 0 or 1")
        if self.dt is None:
            self.dt = np.full(self.depth, 1.0 / self.depth)
        self.dt = np.asarray(self.dt, dtype=float).reshape(self.depth)
        if np.any(self.dt <= 0):
            raise CircuitConfigError("layer times must be positive")
        self.j_dt = np.asarray(self.j_dt, dtype=float)
        if self.j_dt.shape != (self.n_modes - 1, self.depth):
            raise CircuitConfigError(
                f"j_dt must have shape {(self.n_modes - 1, self.depth)}, got {self.j_dt.shape}"
            )
        if self.gamma < 0:
            raise CircuitConfigError("gamma must be non-negative")

    @property
    def couplings(self) -> np.ndarray:
        """Coupling rates J[l, d]."""
        return self.j_dt / self.dt[None, :]

    @property
    def u_dt(self) -> np.ndarray:
        return self.u * self.dt

    @property
    def gamma_dt(self) -> np.ndarray:
        return self.gamma * self.dt

    @property
    def t_circ(self) -> float:
        return float(self.dt.sum())

    def layer_sites(self, layer: int) -> list[int]:
        """Left sites of the couplers in ``layer``, ascending."""
        start = (layer + self.first_offset) % 2
        return list(range(start, self.n_modes - 1, 2))

    def edge_sites(self, layer: int) -> list[int]:
        covered = set()
        for l in self.layer_sites(layer):
            covered.update((l, l + 1))
        return [l for l in range(self.n_modes) if l not in covered]

    def slot_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_modes - 1, self.depth), dtype=bool)
        for d in range(self.depth):
            mask[self.layer_sites(d), d] = True
        return mask

    def with_j_dt(self, j_dt) -> "CircuitSpec":
        return dataclasses.replace(self, j_dt=np.asarray(j_dt, float), dt=self.dt.copy())


def build_circuit(
    n_modes: int,
    depth: int,
    j_dt_init: float = 0.01,
    u_t_circ: float = 0.0,
    gamma_t_circ: float = 0.0,
    t_circ: float = 1.0,
    first_offset: int = 0,
    dt=None,
    loss_scheme: str = "kraus",
) -> CircuitSpec:
    """Uniform brick circuit with every active slot at ``j_dt_init``."""
    if n_modes < 2 or depth < 1:
        raise CircuitConfigError(f"need n_modes >= 2 and depth >= 1, got {n_modes}, {depth}")
    dt = np.full(depth, t_circ / depth) if dt is None else np.asarray(dt, float)
    total = float(dt.sum())
    spec = CircuitSpec(
        n_modes=n_modes,
        depth=depth,
        j_dt=np.zeros((n_modes - 1, depth)),
        u=u_t_circ / total,
        dt=dt,
        gamma=gamma_t_circ / total,
        first_offset=first_offset,
        loss_scheme=loss_scheme,
    )
    spec.j_dt = np.where(spec.slot_mask(), j_dt_init, 0.0)
    return spec


@dataclass
class ContractionReport:
    output_state: mps.BatchedMps
    max_bond_dimension: int
    total_discarded_weight: np.ndarray
    jump_record: np.ndarray  # photons lost per (batch, layer, mode)
    click_probabilities: np.ndarray = field(default=None)


def contract_circuit(
    state: mps.BatchedMps,
    spec: CircuitSpec,
    rng_seed: int = 0,
    j_dt: Optional[torch.Tensor] = None,
    jump_record: Optional[np.ndarray] = None,
    gate_order: Optional[list] = None,
) -> ContractionReport:
    """Run every layer of ``spec`` on ``state`` (mutated in place).

    ``j_dt`` may be a tensor carrying gradient; otherwise the circuit's stored values
    are used. ``jump_record`` replays earlier loss outcomes instead of
    sampling. ``gate_order`` optionally overrides the right-to-left order of
    couplers within a layer (used to check that same-layer gates commute).
    """
    if state.n_modes != spec.n_modes:
        raise CircuitConfigError(f"state has {state.n_modes} modes, circuit {spec.n_modes}")
    space = FockSpace(state.n_max)
    if j_dt is None:
        j_dt = torch.as_tensor(spec.j_dt, dtype=RDTYPE)
    n_batch = state.batch_size
    lost = np.zeros((n_batch, spec.depth, spec.n_modes), dtype=np.int64)
    probs = np.zeros((n_batch, spec.depth, spec.n_modes))
    max_chi = state.max_bond_dimension()
    start_discarded = state.discarded.copy()
    for d in range(spec.depth):
        u_dt = float(spec.u_dt[d])
        sites = spec.layer_sites(d)
        order = list(reversed(sites)) if gate_order is None else [s for s in gate_order if s in sites]
        for l in order:
            gate = autodiff.gate_tensor(j_dt[l, d], u_dt, space)
            mps.apply_two_mode_gate(state, gate, l)
            max_chi = max(max_chi, state.max_bond_dimension())
        if u_dt != 0.0:
            edge = edge_gate(u_dt, space)
            for l in spec.edge_sites(d):
                mps.apply_single_mode(state, edge, l)
        gamma_dt = float(spec.gamma_dt[d])
        if gamma_dt > 0:
            replay = None if jump_record is None else jump_record[:, d, :]
            state, events = noise.loss_layer(
                state, gamma_dt, layer=d, seed=rng_seed, replay=replay, scheme=spec.loss_scheme
            )
            for e in events:
                lost[e.batch, d, e.mode] = e.photons_lost
                probs[e.batch, d, e.mode] = e.click_probability
            max_chi = max(max_chi, state.max_bond_dimension())
    return ContractionReport(
        output_state=state,
        max_bond_dimension=max_chi,
        total_discarded_weight=state.discarded - start_discarded,
        jump_record=lost,
        click_probabilities=probs,
    )


def layer_coupling_matrix(spec: CircuitSpec, layer: int, j_dt=None) -> np.ndarray:
    j_dt = spec.j_dt if j_dt is None else np.asarray(j_dt)
    k = np.zeros((spec.n_modes, spec.n_modes))
    for l in spec.layer_sites(layer):
        k[l, l + 1] = k[l + 1, l] = j_dt[l, layer]
    return k


def mode_rotation_matrix(spec: CircuitSpec) -> np.ndarray:
    """Linear-optics transfer matrix: output amplitudes = M @ input amplitudes."""
    m = np.eye(spec.n_modes, dtype=complex)
    for d in range(spec.depth):
        m = scipy.linalg.expm(1j * layer_coupling_matrix(spec, d)) @ m
    return m
