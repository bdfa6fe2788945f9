"""``qpic <task> --config <path> [--seed N] [--set key=value ...] [--out dir]``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical abort.
Data files carry no timestamps; timing goes to ``run.log``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import torch

import qpic
from qpic import calib, circuit, config, fom, mps, noise, optim

log = logging.getLogger("qpic")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

ROBUSTNESS_METRIC = {"cat": "conditioned_fidelity", "single_photon": "g2", "sensing": "fi"}


def _clean(obj):
    """JSON-safe copy: numpy to builtins, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else repr(value)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def write_history_csv(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=optim.HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in optim.HISTORY_COLUMNS})


def write_couplings_csv(path: Path, j_dt: np.ndarray) -> None:
    """Rows are couplers (mode pairs), columns are layers."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["coupler"] + [f"layer_{d}" for d in range(j_dt.shape[1])])
        for l, row in enumerate(j_dt):
            writer.writerow([l] + [repr(float(x)) for x in row])


def read_couplings_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(x) for x in row[1:]] for row in rows[1:]])


def environment() -> dict:
    return {
        "qpic": qpic.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def _alphas(cfg: config.RunConfig) -> np.ndarray:
    n_modes = cfg["circuit"]["n_modes"]
    given = cfg["input"]["alphas"]
    if given is None:
        return np.full(n_modes, complex(cfg["input"]["alpha"]))
    values = [complex(a["re"], a["im"]) if isinstance(a, dict) else complex(a) for a in given]
    if len(values) != n_modes:
        raise config.ConfigError(config.ValidationReport(errors=[f"input.alphas: need {n_modes} values"]))
    return np.array(values)


def _spec(cfg: config.RunConfig) -> circuit.CircuitSpec:
    circ = cfg["circuit"]
    values = config.circuit_values(cfg)
    spec = circuit.build_circuit(
        circ["n_modes"],
        circ["depth"],
        j_dt_init=values["j_init"],
        u_t_circ=values["u_t_circ"],
        gamma_t_circ=values["gamma_t_circ"],
        t_circ=values["t_circ"],
        first_offset=circ["first_offset"],
        loss_scheme=circ["loss_scheme"],
    )
    if circ["j_dt"] is not None:
        spec.j_dt = np.where(spec.slot_mask(), np.asarray(circ["j_dt"], float), 0.0)
    return spec


def task_simulate(cfg, out: Path) -> dict:
    spec = _spec(cfg)
    trunc = cfg["truncation"]
    alphas = _alphas(cfg)
    n_traj = cfg["trajectories"]["n_traj"] if spec.gamma > 0 else 1
    state = mps.init_product_coherent(alphas, trunc["n_max"], trunc["chi_max"], n_traj, trunc["s_min"])
    number = np.diag(state.space.numbers).astype(complex)

    def occupations(st):
        with torch.no_grad():
            return [noise.trajectory_average(mps.local_expectation(st, number, l)[0].numpy()) for l in range(spec.n_modes)]

    input_occupation = occupations(state)
    report = circuit.contract_circuit(state, spec, rng_seed=cfg["optimizer"]["seed"])
    state = report.output_state
    occupation = occupations(state)
    with torch.no_grad():
        _, entropies = mps.bipartite_entropies(state)
    write_couplings_csv(out / "couplings.csv", spec.j_dt)
    if spec.gamma > 0:
        noise.write_jump_csv(out / "jumps.csv", report.jump_record, report.click_probabilities)
    return {
        "metrics": {
            "input_mean_n": [m for m, _ in input_occupation],
            "mean_n": [m for m, _ in occupation],
            "mean_n_stderr": [e for _, e in occupation],
            "total_mean_n": float(sum(m for m, _ in occupation)),
            "bond_entropies": entropies.numpy().tolist(),
            "max_bond_dimension": report.max_bond_dimension,
            "discarded_weight": report.total_discarded_weight.tolist(),
            "log_norm": np.asarray(state.norm_log).tolist(),
        },
        "trajectories": n_traj,
    }


def _optimize(cfg, out: Path, kind: str) -> tuple[dict, optim.OptimResult]:
    task = config.task_config(cfg, kind)

    def progress(it, row):
        if it % 25 == 0 or it == task.n_iter - 1:
            log.info("iteration %d fom %.6g max_chi %d", it, row["fom"], row["max_chi"])

    result = optim.run_optimization(task, callback=progress)
    log.info("optimization wall clock %.2f s", result.wall_clock)
    params = result.state.params if task.noisy else result.state.best_params
    write_history_csv(out / "history.csv", result.history)
    write_couplings_csv(out / "couplings.csv", params)
    if task.noisy:
        spec = task.circuit_spec()
        with torch.no_grad():
            _, report = optim.evaluate(task, spec, torch.tensor(params), seed=task.seed + task.n_iter)
        noise.write_jump_csv(out / "jumps.csv", report.jump_record, report.click_probabilities)
    data = {
        "metrics": result.final_metrics,
        "optimal_j_dt": params,
        "final_fom": result.state.fom_history[-1] if result.state.fom_history else None,
        "iterations": task.n_iter,
        "history_csv": "history.csv",
        "couplings_csv": "couplings.csv",
    }
    return data, result


def task_optimize(kind):
    def run(cfg, out):
        return _optimize(cfg, out, kind)[0]

    return run


def task_robustness(cfg, out: Path) -> dict:
    rob = cfg["robustness"]
    kind = rob["kind"]
    task = config.task_config(cfg, kind)
    if rob["params_csv"]:
        params = read_couplings_csv(rob["params_csv"])
    else:
        params = _optimize(cfg, out, kind)[1].state.best_params
    name = ROBUSTNESS_METRIC[kind]
    report = optim.robustness_analysis(
        params,
        rob["sigma_levels"],
        rob["n_samples"],
        lambda p: optim.metric_at(task, p, name, seed=task.seed),
        seed=rob["seed"],
    )
    with open(out / "robustness.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "sample", name])
        for level in report.levels:
            for i, v in enumerate(level.samples):
                writer.writerow([level.sigma, i, repr(float(v))])
    levels = [
        {k: getattr(level, k) for k in ("sigma", "median", "q1", "q3", "whisker_low", "whisker_high", "mean")}
        | {"outliers": level.outliers, "relative_median_drop": report.relative_median_drop(level.sigma)}
        for level in report.levels
    ]
    return {"metric": name, "reference": report.reference, "levels": levels, "samples_csv": "robustness.csv"}


def task_baselines(cfg, out: Path) -> dict:
    n_max = cfg["truncation"]["n_max"]
    table = []
    for c in (0.0, 0.25, 0.5, 1 / math.sqrt(2), 0.75, 1.0):
        for phi in (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4, math.pi):
            table.append({"c": c, "phi": phi, "pfi": fom.homodyne_pfi(c, phi, 1.0, 1.0)})
    spec = circuit.CircuitSpec(n_modes=2, depth=1, j_dt=np.array([[math.pi / 4]]))
    mps_fi = fom.fisher_information_readout(spec, [1.0, 1.0], perturbed_mode=0, readout_mode=1, n_max=n_max)
    return {
        "qfi_coherent_alpha_1": fom.qfi_coherent(1.0),
        "homodyne_pfi_balanced": fom.homodyne_pfi(1 / math.sqrt(2), math.pi / 2, 1.0, 1.0),
        "homodyne_table": table,
        "mps_two_mode_fisher": mps_fi,
        "mps_n_max": n_max,
    }


def task_calibrate(cfg, out: Path) -> dict:
    c = cfg["calibration"]
    params = calib.PulseParams(
        photon_count=c["photon_count"],
        sigma_t=c["sigma_t_ps"],
        v_g=c["v_g_um_per_ps"],
        k_z=c["k_z_per_um"],
        z0=c["z0_um"],
        g_1d=c["g_1d_uev_um"],
    )
    report = calib.calibrate(params, t_end=c["t_end_ps"], j=c["j_per_ps"], dt=c["dt_ps"], dz=c["dz_um"])
    write_json(out / "calibration.json", report)
    return {"metrics": {k: report[k] for k in ("u_per_ps", "u_dt", "j_dt", "transfer_fraction")}, "calibration_json": "calibration.json"}


TASKS = {
    "simulate": task_simulate,
    "optimize-cat": task_optimize("cat"),
    "optimize-single-photon": task_optimize("single_photon"),
    "optimize-sensing": task_optimize("sensing"),
    "calibrate": task_calibrate,
    "robustness": task_robustness,
    "baselines": task_baselines,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpic", description="Simulate and optimize Kerr coupler circuits.")
    parser.add_argument("task", choices=sorted(TASKS) + ["validate"])
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override optimizer and robustness seeds")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. optimizer.lr=0.2 (repeatable)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    return parser


def _load(args) -> tuple[config.RunConfig, config.ValidationReport]:
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise config.ConfigError(config.ValidationReport(errors=[f"{args.config}: {exc}"])) from exc
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"optimizer.seed={args.seed}", f"robustness.seed={args.seed}"]
    if args.out is not None:
        overrides.append(f"output={json.dumps(args.out)}")
    if args.task != "validate":
        overrides.append(f"task={json.dumps(args.task)}")
    data = config.apply_overrides(raw, overrides)
    cfg = config.parse(data)
    return cfg, config.validate(config.emit(cfg))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, report = _load(args)
    except config.ConfigError as exc:
        print(exc.report.as_text(), file=sys.stderr)
        return EXIT_CONFIG
    if args.task == "validate":
        print(report.as_text())
        return EXIT_OK
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)

    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    config.dump(cfg, out / "config.json")
    start = time.perf_counter()
    try:
        data = TASKS[cfg.task](cfg, out)
    except config.ConfigError as exc:
        print(exc.report.as_text(), file=sys.stderr)
        return EXIT_CONFIG
    except (optim.NumericalAbort, FloatingPointError, mps.ZeroNormError) as exc:
        checkpoint = out / "checkpoint.json"
        write_json(checkpoint, {
            "error": str(exc),
            "iteration": getattr(exc, "iteration", None),
            "j_dt": getattr(exc, "params", None),
            "config": config.emit(cfg),
        })
        log.error("numerical abort: %s", exc)
        print(f"numerical abort: {exc}; checkpoint written to {checkpoint}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        log.info("wall clock %.3f s", time.perf_counter() - start)
        log.removeHandler(handler)
        handler.close()
    result = {
        "task": cfg.task,
        "config": config.emit(cfg),
        "environment": environment(),
        "seeds": {"optimizer": cfg["optimizer"]["seed"], "robustness": cfg["robustness"]["seed"]},
    }
    result.update(data)
    write_json(out / "result.json", result)
    print(json.dumps(_clean(data.get("metrics", {k: v for k, v in data.items() if not isinstance(v, (list, dict))})), indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
