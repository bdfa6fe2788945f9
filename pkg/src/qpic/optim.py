"""Adam optimization of coupler settings and the coupling-noise robustness study."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from qpic import autodiff, circuit, fom, mps
from qpic.autodiff import RDTYPE
from qpic.fock import FockSpace, cat_vector

log = logging.getLogger(__name__)

KINDS = ("cat", "single_photon", "sensing")
J_DT_MAX = np.pi


class NumericalAbort(ArithmeticError):
    """Non-finite loss or gradient during optimization.

    ``params`` and ``iteration`` are filled in by :func:`run_optimization`
    with the last finite parameters, for checkpointing.
    """

    params = None
    iteration = None


@dataclass
class TaskConfig:
    kind: str = "cat"
    n_modes: int = 3
    depth: int = 25
    n_max: int = 5
    u_t_circ: float = 6.25
    gamma_t_circ: float = 0.0
    alpha: complex = 1.0
    j_init: float = 0.01
    lr: float = 0.1
    n_iter: int = 300
    seed: int = 0
    n_traj: int = 1
    weights: dict = field(default_factory=dict)
    vacuum_factor: float = 9.0
    beta: float = 1.0
    target_mode: Optional[int] = None
    perturbed_mode: int = 0
    theta_step: float = 1e-3
    chi_max: int = mps.DEFAULT_CHI_MAX
    s_min: float = mps.DEFAULT_S_MIN
    first_offset: int = 0
    loss_scheme: str = "kraus"
    average_last: int = 20
    gradient_engine: str = "autodiff"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.gradient_engine not in autodiff.GRADIENT_ENGINES:
            raise ValueError(f"gradient_engine must be one of {sorted(autodiff.GRADIENT_ENGINES)}")

    @property
    def readout_mode(self) -> int:
        if self.target_mode is not None:
            return self.target_mode
        if self.kind == "sensing":
            return self.n_modes - 1
        return self.n_modes // 2

    @property
    def noisy(self) -> bool:
        return self.gamma_t_circ > 0

    def circuit_spec(self) -> circuit.CircuitSpec:
        return circuit.build_circuit(
            self.n_modes,
            self.depth,
            j_dt_init=self.j_init,
            u_t_circ=self.u_t_circ,
            gamma_t_circ=self.gamma_t_circ,
            first_offset=self.first_offset,
            loss_scheme=self.loss_scheme,
        )

    def target_density(self) -> np.ndarray:
        space = FockSpace(self.n_max)
        if self.kind == "cat":
            v = cat_vector(self.beta, "odd", space)
            return np.outer(v, v.conj())
        target = np.zeros((space.d, space.d), dtype=complex)
        target[1, 1] = 1.0
        return target


@dataclass
class OptimState:
    params: np.ndarray
    mask: np.ndarray
    m: np.ndarray
    v: np.ndarray
    iteration: int = 0
    fom_history: list = field(default_factory=list)
    best_params: Optional[np.ndarray] = None
    best_fom: float = np.inf

    @classmethod
    def start(cls, params: np.ndarray, mask: Optional[np.ndarray] = None) -> "OptimState":
        params = np.asarray(params, dtype=float).copy()
        mask = np.ones_like(params, dtype=bool) if mask is None else mask
        return cls(params=params, mask=mask, m=np.zeros_like(params), v=np.zeros_like(params))


def adam_step(
    state: OptimState,
    grads: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    bounds: tuple = (0.0, J_DT_MAX),
) -> OptimState:
    """One Adam update followed by projection onto ``bounds``; mutates ``state``."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != state.params.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {state.params.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.argwhere(~np.isfinite(grads)).tolist()
        raise NumericalAbort(f"non-finite gradient at slots {bad} (iteration {state.iteration})")
    grads = np.where(state.mask, grads, 0.0)
    t = state.iteration + 1
    state.m = beta1 * state.m + (1 - beta1) * grads
    state.v = beta2 * state.v + (1 - beta2) * grads**2
    m_hat = state.m / (1 - beta1**t)
    v_hat = state.v / (1 - beta2**t)
    step = lr * m_hat / (np.sqrt(v_hat) + eps)
    state.params = np.clip(state.params - np.where(state.mask, step, 0.0), *bounds)
    state.iteration = t
    return state


@dataclass
class Evaluation:
    loss: torch.Tensor
    parts: dict
    max_chi: int
    metrics: dict


def _input_state(task: TaskConfig, batch: int) -> mps.BatchedMps:
    alphas = np.full(task.n_modes, task.alpha, dtype=complex)
    return mps.init_product_coherent(alphas, task.n_max, task.chi_max, batch, task.s_min)


def evaluate(task: TaskConfig, spec: circuit.CircuitSpec, j_dt: torch.Tensor, seed: int = 0, jump_record=None):
    """Contract the task's circuit and assemble its loss on the autograd tape."""
    weights = task.weights
    if task.kind == "sensing":
        alphas = np.full(task.n_modes, task.alpha, dtype=complex)
        stats = fom.readout_statistics(
            spec, alphas, task.perturbed_mode, task.readout_mode, task.theta_step,
            task.n_max, chi_max=task.chi_max, s_min=task.s_min, j_dt=j_dt,
        )
        fi = stats.fisher()
        s = fom.entropy_penalty(stats.state, batch=0)
        loss = fom.total_fom("sensing", {"fi": fi, "s": s}, weights)
        with torch.no_grad():
            gfi = stats.gaussian()
        metrics = {"fi": float(fi.detach()), "gfi": float(gfi), "entropy": float(s.detach())}
        return Evaluation(loss, {"fom_ps": -fi, "fom_s": s}, stats.state.max_bond_dimension(), metrics), None

    batch = task.n_traj if task.noisy else 1
    state = _input_state(task, batch)
    report = circuit.contract_circuit(state, spec, rng_seed=seed, j_dt=j_dt, jump_record=jump_record)
    rho = mps.reduced_density_matrix(state, task.readout_mode)
    mask = fom.vacuum_mask(state.d, task.vacuum_factor)
    l_rho = fom.weighted_trace_distance(rho, task.target_density(), mask)
    with torch.no_grad():
        rho_d = rho.detach()
        metrics = {"fidelity": float(fom.uhlmann_fidelity(rho_d, task.target_density()))}
        try:
            cond, p_signal = fom.conditioned_density(rho_d)
            metrics["conditioned_fidelity"] = float(fom.uhlmann_fidelity(cond, task.target_density()))
            metrics["p_signal"] = float(p_signal)
        except fom.VacuumOutputError:
            metrics["conditioned_fidelity"] = float("nan")
            metrics["p_signal"] = 0.0
        metrics["p1"] = float(rho_d[1, 1].real)
        metrics["mean_n"] = float((torch.diagonal(rho_d).real * torch.arange(state.d, dtype=RDTYPE)).sum())
    if task.kind == "cat":
        s = fom.entropy_penalty(state)
        loss = fom.total_fom("cat", {"rho": l_rho, "s": s}, weights)
        parts = {"fom_rho": l_rho, "fom_s": s}
        metrics["entropy"] = float(s.detach())
    else:
        g = fom.g2_from_density(rho)
        loss = fom.total_fom("single_photon", {"rho": l_rho, "g": g}, weights)
        parts = {"fom_rho": l_rho, "fom_g": g}
        metrics["g2"] = float(g.detach())
    return Evaluation(loss, parts, report.max_bond_dimension, metrics), report


def loss_function(task: TaskConfig, spec: circuit.CircuitSpec, seed: int = 0, jump_record=None):
    """``fn(j_dt_flat_tensor) -> loss`` over the active slots, for gradient checks."""
    mask = spec.slot_mask()

    def fn(x: torch.Tensor) -> torch.Tensor:
        j_dt = torch.zeros(mask.shape, dtype=RDTYPE).masked_scatter(torch.from_numpy(mask), x)
        return evaluate(task, spec, j_dt, seed=seed, jump_record=jump_record)[0].loss

    return fn, spec.j_dt[mask]


HISTORY_COLUMNS = ("iteration", "fom", "fom_rho", "fom_s", "fom_g", "fom_ps", "max_chi")


@dataclass
class OptimResult:
    task: TaskConfig
    state: OptimState
    history: list
    metrics_history: list
    final_metrics: dict
    spec: circuit.CircuitSpec
    wall_clock: float


def run_optimization(
    task: TaskConfig,
    callback: Optional[Callable[[int, dict], None]] = None,
    initial: Optional[np.ndarray] = None,
) -> OptimResult:
    """Adam loop over the active coupler slots.

    Noisy tasks draw a fresh trajectory batch each iteration with seed
    ``task.seed + iteration``; their reported metrics are averaged over the
    last ``task.average_last`` iterations. Unitary tasks report the metrics
    of the best parameters seen.
    """
    t0 = time.perf_counter()
    spec = task.circuit_spec()
    params = spec.j_dt if initial is None else np.asarray(initial, float)
    opt = OptimState.start(params, spec.slot_mask())
    history, metrics_history = [], []
    for it in range(task.n_iter):
        j_dt = torch.tensor(opt.params, dtype=RDTYPE, requires_grad=True)
        ev, report = evaluate(task, spec, j_dt, seed=task.seed + it)
        loss = float(ev.loss.detach())
        if not np.isfinite(loss):
            exc = NumericalAbort(f"loss became {loss} at iteration {it}")
            exc.params, exc.iteration = opt.params.copy(), it
            raise exc
        if task.gradient_engine == "autodiff":
            grads = autodiff.backward(ev.loss, {"j_dt": j_dt})["j_dt"]
        else:
            # probes replay this iteration's loss outcomes
            replay = None if report is None else report.jump_record
            fn, x0 = loss_function(task, spec.with_j_dt(opt.params), seed=task.seed + it, jump_record=replay)
            _, flat = autodiff.finite_difference_gradient(fn, x0)
            grads = np.zeros_like(opt.params)
            grads[opt.mask] = flat
        row = {"iteration": it, "fom": loss, "max_chi": ev.max_chi}
        for key in ("fom_rho", "fom_s", "fom_g", "fom_ps"):
            row[key] = float(ev.parts[key].detach()) if key in ev.parts else float("nan")
        history.append(row)
        metrics_history.append(dict(ev.metrics, params=opt.params.copy()))
        opt.fom_history.append(loss)
        if loss < opt.best_fom:
            opt.best_fom, opt.best_params = loss, opt.params.copy()
        if callback is not None:
            callback(it, dict(row, **ev.metrics))
        try:
            adam_step(opt, grads, task.lr)
        except NumericalAbort as exc:
            exc.params, exc.iteration = opt.params.copy(), it
            raise
    if task.noisy:
        tail = metrics_history[-task.average_last:]
        final = {k: float(np.mean([m[k] for m in tail])) for k in tail[0] if k != "params"}
        final["fom"] = float(np.mean(opt.fom_history[-task.average_last:]))
        final["averaged_iterations"] = len(tail)
    elif task.n_iter > 0:
        with torch.no_grad():
            ev, _ = evaluate(task, spec, torch.tensor(opt.best_params, dtype=RDTYPE))
        final = dict(ev.metrics, fom=float(ev.loss))
    else:
        final = {}
    return OptimResult(task, opt, history, metrics_history, final, spec, time.perf_counter() - t0)


def metric_at(task: TaskConfig, params: np.ndarray, name: str, seed: int = 0) -> float:
    spec = task.circuit_spec()
    with torch.no_grad():
        ev, _ = evaluate(task, spec, torch.tensor(params, dtype=RDTYPE), seed=seed)
    return ev.metrics[name]


@dataclass
class RobustnessLevel:
    sigma: float
    samples: np.ndarray
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: np.ndarray
    mean: float


@dataclass
class RobustnessReport:
    reference: float
    levels: list

    def relative_median_drop(self, sigma: float) -> float:
        level = next(l for l in self.levels if l.sigma == sigma)
        return (self.reference - level.median) / self.reference

    def relative_mean_drop(self, sigma: float) -> float:
        level = next(l for l in self.levels if l.sigma == sigma)
        return (self.reference - level.mean) / self.reference


def box_statistics(sigma: float, samples) -> RobustnessLevel:
    samples = np.asarray(samples, dtype=float)
    q1, median, q3 = np.percentile(samples, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = samples[(samples >= lo_fence) & (samples <= hi_fence)]
    outliers = samples[(samples < lo_fence) | (samples > hi_fence)]
    return RobustnessLevel(
        sigma=sigma,
        samples=samples,
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outliers=outliers,
        mean=float(samples.mean()),
    )


def robustness_analysis(
    opt_params: np.ndarray,
    sigma_levels,
    n_samples: int,
    metric: Callable[[np.ndarray], float],
    seed: int = 0,
) -> RobustnessReport:
    """Box-plot statistics of ``metric`` under J -> J (1 + sigma xi), xi ~ N(0, 1)."""
    opt_params = np.asarray(opt_params, dtype=float)
    rng = np.random.default_rng(seed)
    reference = float(metric(opt_params))
    levels = []
    for sigma in sigma_levels:
        xi = rng.standard_normal((n_samples,) + opt_params.shape)
        values = [metric(opt_params * (1.0 + sigma * x)) for x in xi]
        levels.append(box_statistics(float(sigma), values))
    return RobustnessReport(reference=reference, levels=levels)
