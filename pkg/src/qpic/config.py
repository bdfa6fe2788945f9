"""Run configuration: JSON schema, unit handling, validation and echo.

Physical quantities carry their unit in the key name. Each of the rate
groups below must be given in exactly one form:

* Kerr strength: ``u_t_circ`` | ``u_dt`` (per layer) | ``u_per_ps`` with ``t_circ_ps``
* loss: ``gamma_t_circ`` | ``gamma_dt`` | ``gamma_per_ps`` with ``t_circ_ps``
* initial coupling: ``j_init_dt`` | ``j_init_per_ps`` with ``t_circ_ps``
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qpic import mps
from qpic.optim import J_DT_MAX, TaskConfig

SCHEMA_VERSION = 1

TASKS = (
    "simulate",
    "optimize-cat",
    "optimize-single-photon",
    "optimize-sensing",
    "calibrate",
    "robustness",
    "baselines",
)

TASK_KIND = {
    "optimize-cat": "cat",
    "optimize-single-photon": "single_photon",
    "optimize-sensing": "sensing",
}

UNIT_GROUPS = {
    "u": ("u_t_circ", "u_dt", "u_per_ps"),
    "gamma": ("gamma_t_circ", "gamma_dt", "gamma_per_ps"),
    "j_init": ("j_init_dt", "j_init_per_ps"),
}

SECTIONS = {
    "circuit": {
        "n_modes": 3,
        "depth": 25,
        "first_offset": 0,
        "loss_scheme": "kraus",
        "j_dt": None,
    },
    "input": {"alpha": 1.0, "alphas": None},
    "fom": {
        "kind": None,
        "weights": {},
        "vacuum_factor": 9.0,
        "beta": 1.0,
        "target_mode": None,
        "perturbed_mode": 0,
        "theta_step": 1e-3,
    },
    "optimizer": {"lr": 0.1, "n_iter": 300, "seed": 0, "average_last": 20, "gradient_engine": "autodiff"},
    "truncation": {"n_max": 5, "chi_max": mps.DEFAULT_CHI_MAX, "s_min": mps.DEFAULT_S_MIN},
    "trajectories": {"n_traj": 1},
    "robustness": {"kind": "cat", "sigma_levels": [0.01, 0.05, 0.1], "n_samples": 100, "params_csv": None, "seed": 0},
    "calibration": {
        "photon_count": 10.0,
        "sigma_t_ps": 1.0,
        "v_g_um_per_ps": 45.58,
        "k_z_per_um": 0.0,
        "z0_um": 0.0,
        "g_1d_uev_um": 1200.0,
        "t_end_ps": 8.31,
        "j_per_ps": None,
        "dt_ps": 0.01,
        "dz_um": None,
    },
}

# used only by tasks that do not optimize couplings
UNIT_DEFAULTS = {"u": 0.0, "gamma": 0.0, "j_init": 0.01}


class ConfigError(ValueError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__("; ".join(report.errors))


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def as_text(self) -> str:
        lines = [f"error: {e}" for e in self.errors] + [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) if lines else "ok"


@dataclass
class RunConfig:
    task: str
    sections: dict
    output: str = "out"
    schema_version: int = SCHEMA_VERSION

    def __getitem__(self, name: str) -> dict:
        return self.sections[name]

    def to_dict(self) -> dict:
        return emit(self)


def _has(d: dict, key: str) -> bool:
    return d.get(key) is not None


def _resolve_group(circ: dict, group: str, depth: int, report: ValidationReport):
    """Dimensionless total exposure (or per-layer value for j_init)."""
    keys = [k for k in UNIT_GROUPS[group] if _has(circ, k)]
    if len(keys) > 1:
        report.errors.append(f"circuit.{group}: give exactly one of {keys}")
        return None
    if not keys:
        report.errors.append(f"circuit.{group}: missing unit key, expected one of {list(UNIT_GROUPS[group])}")
        return None
    key = keys[0]
    value = float(circ[key])
    if key.endswith("_per_ps"):
        if not _has(circ, "t_circ_ps"):
            report.errors.append(f"circuit.{key} needs circuit.t_circ_ps")
            return None
        total = value * float(circ["t_circ_ps"])
        return total / depth if group == "j_init" else total
    if key == "j_init_dt":
        return value
    if key.endswith("_dt"):
        return value * depth
    return value


def default_dict(task: str) -> dict:
    data = {"schema_version": SCHEMA_VERSION, "task": task, "output": "out"}
    for name, defaults in SECTIONS.items():
        data[name] = copy.deepcopy(defaults)
    return data


def validate(data: dict) -> ValidationReport:
    """Schema, unit and constraint checks; never raises."""
    report = ValidationReport()
    if not isinstance(data, dict):
        report.errors.append("config must be a JSON object")
        return report
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        report.errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    task = data.get("task")
    if task not in TASKS:
        report.errors.append(f"task: expected one of {list(TASKS)}, got {task!r}")
    known = set(SECTIONS) | {"schema_version", "task", "output"}
    for key in data:
        if key not in known:
            report.errors.append(f"{key}: unknown section")
    for name, defaults in SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            report.errors.append(f"{name}: must be an object")
            continue
        allowed = set(defaults)
        if name == "circuit":
            allowed |= {k for ks in UNIT_GROUPS.values() for k in ks} | {"t_circ_ps"}
        for key in section:
            if key not in allowed:
                report.errors.append(f"{name}.{key}: unknown field")
    if report.errors:
        return report

    circ = data.get("circuit", {})
    n_modes, depth = circ.get("n_modes"), circ.get("depth")
    if not isinstance(n_modes, int) or n_modes < 2:
        report.errors.append(f"circuit.n_modes: integer >= 2 required, got {n_modes!r}")
    if not isinstance(depth, int) or depth < 1:
        report.errors.append(f"circuit.depth: integer >= 1 required, got {depth!r}")
    if report.errors:
        return report
    if task in ("simulate", "calibrate", "baselines"):
        needed = [g for g in UNIT_GROUPS if any(_has(circ, k) for k in UNIT_GROUPS[g])]
    else:
        needed = list(UNIT_GROUPS)
    values = {g: _resolve_group(circ, g, depth, report) for g in needed}
    if values.get("gamma") is not None and values["gamma"] < 0:
        report.errors.append("circuit.gamma: loss must be non-negative")
    j_init = values.get("j_init")
    if j_init is not None and not 0 <= j_init <= J_DT_MAX:
        report.errors.append(f"circuit.j_init: J*dt = {j_init:.4g} outside [0, pi]")
    if circ.get("j_dt") is not None:
        j_dt = np.asarray(circ["j_dt"], dtype=float)
        if j_dt.shape != (n_modes - 1, depth):
            report.errors.append(f"circuit.j_dt: shape {j_dt.shape}, expected {(n_modes - 1, depth)}")
        elif np.any(j_dt < 0) or np.any(j_dt > J_DT_MAX):
            report.errors.append(f"circuit.j_dt: J*dt = {float(np.max(np.abs(j_dt))):.4g} outside [0, pi]")
    trunc = data.get("truncation", {})
    if trunc.get("n_max", 1) < 1:
        report.errors.append("truncation.n_max: must be >= 1")
    opt = data.get("optimizer", {})
    if opt.get("n_iter", 0) < 0:
        report.errors.append("optimizer.n_iter: must be >= 0")
    if opt.get("gradient_engine", "autodiff") not in ("autodiff", "finite-difference"):
        report.errors.append("optimizer.gradient_engine: expected 'autodiff' or 'finite-difference'")
    if data.get("trajectories", {}).get("n_traj", 1) < 1:
        report.errors.append("trajectories.n_traj: must be >= 1")
    kind = TASK_KIND.get(task) or (data.get("robustness", {}).get("kind") if task == "robustness" else None)
    if kind == "sensing":
        if depth < n_modes - 1:
            report.warnings.append(
                f"circuit.depth: D = {depth} < L - 1 = {n_modes - 1}; light cannot reach the readout mode"
            )
        if values.get("gamma"):
            report.errors.append("circuit.gamma: sensing is defined for loss-free circuits")
    return report


def parse(data: dict) -> RunConfig:
    """Fill defaults, validate, and build a :class:`RunConfig`; raises :class:`ConfigError`."""
    if not isinstance(data, dict):
        raise ConfigError(ValidationReport(errors=["config must be a JSON object"]))
    task = data.get("task")
    full = default_dict(task if task in TASKS else "simulate")
    for key, value in data.items():
        if key in SECTIONS and isinstance(value, dict):
            full[key].update(copy.deepcopy(value))
        else:
            full[key] = copy.deepcopy(value)
    report = validate(full)
    if not report.ok:
        raise ConfigError(report)
    sections = {name: full[name] for name in SECTIONS}
    return RunConfig(task=full["task"], sections=sections, output=full["output"], schema_version=full["schema_version"])


def emit(config: RunConfig) -> dict:
    out = {"schema_version": config.schema_version, "task": config.task, "output": config.output}
    out.update(copy.deepcopy(config.sections))
    return out


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(ValidationReport(errors=[f"{path}: {exc}"])) from exc
    return parse(data)


def dump(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(emit(config), indent=2, sort_keys=True) + "\n")


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are JSON, else plain strings.

    Setting one form of a unit group removes the other forms.
    """
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(ValidationReport(errors=[f"override {item!r}: expected key=value"]))
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        keys = path.split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        if keys[0] == "circuit" and len(keys) == 2:
            for group_keys in UNIT_GROUPS.values():
                if keys[1] in group_keys:
                    for other in group_keys:
                        node.pop(other, None)
        node[keys[-1]] = value
    return data


def circuit_values(config: RunConfig) -> dict:
    """Dimensionless ``u_t_circ``, ``gamma_t_circ`` and ``j_init`` (per-layer J*dt)."""
    circ = config["circuit"]
    report = ValidationReport()
    out = {}
    for group, name in (("u", "u_t_circ"), ("gamma", "gamma_t_circ"), ("j_init", "j_init")):
        if any(_has(circ, k) for k in UNIT_GROUPS[group]):
            out[name] = _resolve_group(circ, group, circ["depth"], report)
        else:
            out[name] = UNIT_DEFAULTS[group]
    out["t_circ"] = float(circ["t_circ_ps"]) if _has(circ, "t_circ_ps") else 1.0
    return out


def task_config(config: RunConfig, kind: str = None) -> TaskConfig:
    kind = kind or config["fom"].get("kind") or TASK_KIND.get(config.task) or config["robustness"]["kind"]
    circ, fom_cfg, opt = config["circuit"], config["fom"], config["optimizer"]
    trunc = config["truncation"]
    values = circuit_values(config)
    return TaskConfig(
        kind=kind,
        n_modes=circ["n_modes"],
        depth=circ["depth"],
        n_max=trunc["n_max"],
        u_t_circ=values["u_t_circ"],
        gamma_t_circ=values["gamma_t_circ"],
        alpha=config["input"]["alpha"],
        j_init=values["j_init"],
        lr=opt["lr"],
        n_iter=opt["n_iter"],
        seed=opt["seed"],
        n_traj=config["trajectories"]["n_traj"],
        weights=dict(fom_cfg["weights"]),
        vacuum_factor=fom_cfg["vacuum_factor"],
        beta=fom_cfg["beta"],
        target_mode=fom_cfg["target_mode"],
        perturbed_mode=fom_cfg["perturbed_mode"],
        theta_step=fom_cfg["theta_step"],
        chi_max=trunc["chi_max"],
        s_min=trunc["s_min"],
        first_offset=circ["first_offset"],
        loss_scheme=circ["loss_scheme"],
        average_last=opt["average_last"],
        gradient_engine=opt["gradient_engine"],
    )
