"""Batch experiment runner.

Subcommands:

    reference    integrate the Riccati system, cache it, print V(0, x0) and P_0
    train        train per (N, repetition), write Table-shaped CSV and series
    convergence  fit empirical rates over N from the train outputs
    report       print the mean (std) table from the train outputs

Errors exit nonzero and print one JSON line ``{"error": category, ...}`` on
stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import metrics
from .checkpoint import save_checkpoint
from .dp_baseline import check_drift_control, train_dp
from .errors import ConfigError, InsufficientDataError, SolverError
from .lq_problem import LqCoefficients, preset
from .metrics import ValidationSet, fit_rate, read_table_csv, relative_l2_in_time, summarize, write_table_csv
from .riccati import RiccatiSolution, integrate_riccati, load_solution, save_solution, value_at
from .smp_trainer import SCHEDULE_TABLE, TrainingConfig, train, validation_rollout

log = logging.getLogger("smp_bsde")

RATE_COLUMNS = ["max_x_err", "max_p_err", "avg_q_err", "avg_u_err", "terminal_loss", "y0_err", "a_posteriori"]


@dataclass
class ExperimentConfig:
    problem: object = "example1"
    method: str = "smp"
    N_list: list = field(default_factory=lambda: [2, 5, 10, 20, 50, 100])
    repetitions: int = 5
    desk_scale: int = 1
    seed: int = 0
    validation_seed: int = 1_000_003
    N_ode: int = 10_000
    N_fine: int = 1_000
    n_record: int = 100
    hidden: list = field(default_factory=lambda: [100, 100])
    batch_size: int | None = None
    iterations: int | None = None
    validation_size: int | None = None
    validation_every: int | None = None
    dtype: str = "float32"
    out: str = "runs/experiment"

    def __post_init__(self):
        if self.method not in ("smp", "dp"):
            raise ConfigError(f"method must be 'smp' or 'dp', got {self.method!r}")
        if int(self.repetitions) < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.desk_scale not in (1, 2, 4, 8):
            raise ConfigError("desk_scale must be one of 1, 2, 4, 8")
        if not isinstance(self.N_ode, int) or self.N_ode < 1:
            raise ConfigError(f"N_ode must be a positive integer, got {self.N_ode!r}")
        if self.N_ode % self.N_fine:
            raise ConfigError(f"N_fine={self.N_fine} must divide N_ode={self.N_ode}")
        if self.N_fine % self.n_record:
            raise ConfigError(f"n_record={self.n_record} must divide N_fine={self.N_fine}")
        self.N_list = [int(n) for n in self.N_list]
        for N in self.N_list:
            if N < 1 or self.n_record % N:
                raise ConfigError(f"N={N} must divide the recorded reference grid n_record={self.n_record}")

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_mapping(raw)

    def lq(self) -> LqCoefficients:
        if isinstance(self.problem, str):
            return preset(self.problem)
        if isinstance(self.problem, dict):
            return LqCoefficients.from_mapping(self.problem)
        raise ConfigError("problem must be a preset name or a mapping of coefficients")

    def training_config(self, N: int, repetition: int) -> TrainingConfig:
        overrides = {
            k: getattr(self, k)
            for k in ("batch_size", "iterations", "validation_size", "validation_every")
            if getattr(self, k) is not None
        }
        overrides.update(
            seed=self.seed + repetition,
            validation_seed=self.validation_seed,
            hidden=tuple(self.hidden),
            dtype=self.dtype,
        )
        if N in SCHEDULE_TABLE:
            return TrainingConfig.for_grid(N, self.desk_scale, **overrides)
        raise ConfigError(f"no learning-rate/iteration entry for N={N}; known: {sorted(SCHEDULE_TABLE)}")

    def validation_size_for(self) -> int:
        if self.validation_size is not None:
            return self.validation_size
        return 2**14 // self.desk_scale


def _problem_key(c: LqCoefficients, n_ode: int) -> str:
    blob = json.dumps(c.to_mapping(), sort_keys=True) + f"|{n_ode}"
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_inputs(cfg: ExperimentConfig, c: LqCoefficients, out: Path):
    with open(out / "problem.yaml", "w") as fh:
        yaml.safe_dump(c.to_mapping(), fh, sort_keys=False)
    resolved = asdict(cfg)
    resolved["schedule_table"] = {
        int(N): {"eta0": SCHEDULE_TABLE[N][0], "iterations": SCHEDULE_TABLE[N][1]} for N in SCHEDULE_TABLE
    }
    resolved["schedule_note"] = "footnote entries 1-6 assigned to N=2,5,10,20,50,100; entry 7 unused"
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=False)


def load_or_build_solution(cfg: ExperimentConfig, c: LqCoefficients, out: Path) -> RiccatiSolution:
    path = out / f"riccati_{_problem_key(c, cfg.N_ode)}.npz"
    if path.exists():
        return load_solution(path)
    sol = integrate_riccati(c, cfg.N_ode)
    save_solution(sol, path)
    return sol


def cmd_reference(cfg: ExperimentConfig):
    c = cfg.lq()
    out = _out_dir(cfg)
    _echo_inputs(cfg, c, out)
    sol = load_or_build_solution(cfg, c, out)
    v = value_at(sol, 0.0, c.x0)
    summary = {"problem": c.name, "N_ode": cfg.N_ode, "V0": float(v.value), "P0": (-v.grad).tolist()}
    with open(out / "reference.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"V(0,x0) = {float(v.value):.12e}")
    print("P_0 = -(Gamma(0) x0 + gamma(0)) = [" + ", ".join(f"{p:.9e}" for p in -v.grad) + "]")
    return sol, summary


def _write_series(path: Path, header: list, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.9e}" if isinstance(x, (float, np.floating)) else x for x in r])


def _smp_run(cfg, c, N, rep, validation, out):
    tcfg = cfg.training_config(N, rep)
    state, reports = train(tcfg, c, validation)
    final = reports[-1]
    _write_series(out / f"loss_N{N}_rep{rep}.csv", ["step", "loss"], enumerate(state.loss_history))
    _write_series(
        out / f"snapshots_N{N}_rep{rep}.csv",
        ["step", *metrics.TABLE_COLUMNS[1:], "a_posteriori"],
        ([r.step, *list(r.row().values())[1:], r.a_posteriori] for r in reports),
    )
    traj = validation_rollout(state, c, validation)
    rel = relative_l2_in_time(traj, validation.reference)
    _write_series(
        out / f"rel_time_N{N}_rep{rep}.csv",
        ["n", "t", "rel_X", "rel_P", "rel_Q", "rel_u"],
        (
            [n, traj.grid[n], rel.X[n], rel.P[n], rel.Q[n] if n < N else "", rel.u[n] if n < N else ""]
            for n in range(N + 1)
        ),
    )
    save_checkpoint(out / "checkpoints" / f"smp_N{N}_rep{rep}.npz", state, {"N": N, "repetition": rep})
    row = final.row()
    row["a_posteriori"] = final.a_posteriori
    return row


def _dp_run(cfg, c, N, rep, validation, out):
    tcfg = cfg.training_config(N, rep)
    state, reports = train_dp(tcfg, c, validation)
    final = reports[-1]
    _write_series(out / f"loss_dp_N{N}_rep{rep}.csv", ["step", "robust_loss"], enumerate(state.loss_history))
    _write_series(
        out / f"snapshots_dp_N{N}_rep{rep}.csv",
        list(asdict(final).keys()),
        (list(asdict(r).values()) for r in reports),
    )
    save_checkpoint(out / "checkpoints" / f"dp_N{N}_rep{rep}.npz", state, {"N": N, "repetition": rep, "method": "dp"})
    nan = float("nan")
    return {
        "N": N,
        "max_x_err": final.max_x_err,
        "max_p_err": final.max_p_err,
        "avg_q_err": nan,
        "avg_u_err": final.avg_u_err,
        "terminal_loss": nan,
        "y0_err": final.y0_err,
        "iter_time_s": final.iteration_time_s,
        "a_posteriori": nan,
    }


def cmd_train(cfg: ExperimentConfig):
    c = cfg.lq()
    if cfg.method == "dp":
        check_drift_control(c)
    out = _out_dir(cfg)
    (out / "checkpoints").mkdir(exist_ok=True)
    _echo_inputs(cfg, c, out)
    sol = load_or_build_solution(cfg, c, out)
    validation = ValidationSet.build(
        c, sol, cfg.validation_size_for(), cfg.N_fine, cfg.validation_seed, n_record=cfg.n_record
    )
    run = _dp_run if cfg.method == "dp" else _smp_run
    rows = []
    for N in cfg.N_list:
        for rep in range(cfg.repetitions):
            log.info("training method=%s N=%d repetition=%d", cfg.method, N, rep)
            try:
                row = run(cfg, c, N, rep, validation, out)
                row.update(kind="run", repetition=rep, status="ok")
            except SolverError as exc:
                log.warning("N=%d repetition=%d failed: %s", N, rep, exc)
                row = {"kind": "run", "repetition": rep, "status": f"failed:{exc.category}", "N": N}
            rows.append(row)
            write_table_csv(out / "table.csv", rows + summarize(rows))
    return rows + summarize(rows)


def cmd_convergence(cfg: ExperimentConfig):
    out = Path(cfg.out)
    table = out / "table.csv"
    if not table.exists():
        raise InsufficientDataError(f"{table} not found; run 'train' first")
    rows = read_table_csv(table)
    means = [r for r in rows if r["kind"] == "mean"]
    if len({int(r["N"]) for r in means}) < 2:
        raise InsufficientDataError("need at least two successful grid sizes to fit a rate")
    c = cfg.lq()
    fits = []
    for col in RATE_COLUMNS:
        pairs = [(c.T / int(r["N"]), float(r[col])) for r in means if np.isfinite(float(r[col])) and float(r[col]) > 0]
        if len(pairs) < 2:
            continue
        slope, intercept = fit_rate(pairs)
        fits.append({"measure": col, "slope": slope, "intercept": intercept, "points": len(pairs)})
    _write_series(
        out / "convergence.csv",
        ["measure", "slope", "intercept", "points"],
        ([f["measure"], f["slope"], f["intercept"], f["points"]] for f in fits),
    )
    _write_series(
        out / "convergence_points.csv",
        ["N", "h", *RATE_COLUMNS],
        ([int(r["N"]), c.T / int(r["N"]), *[float(r[k]) for k in RATE_COLUMNS]] for r in means),
    )
    for f in fits:
        print(f"{f['measure']:>14s}  slope {f['slope']:+.4f}  ({f['points']} points)")
    return fits


def cmd_report(cfg: ExperimentConfig):
    rows = read_table_csv(Path(cfg.out) / "table.csv")
    means = {int(r["N"]): r for r in rows if r["kind"] == "mean"}
    stds = {int(r["N"]): r for r in rows if r["kind"] == "std"}
    cols = metrics.TABLE_COLUMNS[1:]
    lines = ["N".rjust(4) + "".join(col.rjust(24) for col in cols)]
    for N in sorted(means):
        cells = [f"{float(means[N][k]):.3e} ({float(stds[N][k]):.0e})" for k in cols]
        lines.append(str(N).rjust(4) + "".join(cell.rjust(24) for cell in cells))
    failed = [r for r in rows if r["kind"] == "run" and r["status"] != "ok"]
    text = "\n".join(lines)
    print(text)
    if failed:
        print(f"{len(failed)} failed run(s): " + ", ".join(f"N={r['N']} rep={r['repetition']}" for r in failed))
    (Path(cfg.out) / "report.txt").write_text(text + "\n")
    return text


COMMANDS = {"reference": cmd_reference, "train": cmd_train, "convergence": cmd_convergence, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smp-bsde", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="YAML experiment configuration")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="base training seed (overrides config)")
    parser.add_argument("--desk-scale", type=int, help="divide iterations and batch sizes by 1, 2, 4 or 8")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        raw = {}
        if args.config is not None:
            raw = asdict(ExperimentConfig.load(args.config))
        for key, value in (("out", args.out), ("seed", args.seed), ("desk_scale", args.desk_scale)):
            if value is not None:
                raw[key] = value
        cfg = ExperimentConfig.from_mapping(raw)
        COMMANDS[args.command](cfg)
    except SolverError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            traceback.print_exc()
        print(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 70
    return 0


if __name__ == "__main__":
    sys.exit(main())
