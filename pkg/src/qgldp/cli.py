"""Command-line entry point.

Exit status: 0 success, 1 invalid input, 2 numerical blow-up, 3 failed
verification suite.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
import time

import numpy as np

from . import __version__
from . import spectral as sp
from .action import ControlPath, minimize_action, skeleton_solve
from .config import ConfigError, RunConfig, parse_config
from .experiments import (
    SUITES,
    Estimate,
    StudyReport,
    _fmt,
    _git_describe,
    _paths,
    is_probability,
    ldp_scaling_study,
    mc_probability,
    run_suite,
    time_increment_study,
    weak_convergence_study,
)
from .model import NumericalInstability, write_trajectory_csv

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_SUITE = 0, 1, 2, 3

COMMANDS = (
    "simulate", "simulate-sde", "skeleton", "minimize-action", "mc", "is",
    "ldp-scan", "weak-convergence", "time-increments", "verify",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qgldp", description="Stochastic two-layer QG model and large-deviation tools.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config or a previous run's manifest.json")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--overwrite", action="store_true", help="reuse a non-empty output directory")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("simulate", "simulate-sde", "skeleton"):
            p.add_argument("--snapshot-every", type=int, help="write a field snapshot every K steps")
        if name in ("skeleton", "is", "weak-convergence", "time-increments"):
            p.add_argument("--control", help="control snapshot (kind=control); zero control if omitted")
        if name == "verify":
            p.add_argument("--suite", choices=sorted(SUITES) + ["all"], default="all")
    return parser


# --- run directory ------------------------------------------------------------


class RunDir:
    def __init__(self, path: str, overwrite: bool):
        if os.path.isdir(path) and os.listdir(path):
            if not overwrite:
                raise ConfigError("run.out", f"output directory {path!r} is not empty (use --overwrite)")
            shutil.rmtree(path)
        os.makedirs(path, exist_ok=True)
        self.path = path
        self.outputs: list[str] = []

    def file(self, name: str) -> str:
        self.outputs.append(name)
        return os.path.join(self.path, name)

    def write_json(self, name: str, doc: dict) -> None:
        with open(self.file(name), "w") as fh:
            json.dump(doc, fh, indent=2, default=_fmt)
            fh.write("\n")


def _write_rows(path: str, rows: list[dict]) -> None:
    StudyReport("rows", {}, rows, True).write_csv(path)


def _estimate_row(est: Estimate, eps: float) -> dict:
    return {
        "eps": eps, "method": est.method, "p": est.p, "ci_lo": est.lo, "ci_hi": est.hi,
        "hits": est.hits, "n_paths": est.n_paths, "variance": est.variance, "ess": est.ess, "floor": est.floor,
    }


def _load_control(path: str | None, setup) -> ControlPath | None:
    if not path:
        return None
    data, grid, meta = sp.read_snapshot(path)
    if meta.get("kind") != "control":
        raise ConfigError("--control", f"{path} is not a control snapshot")
    if (grid.N, grid.L) != (setup.grid.N, setup.grid.L):
        raise sp.GridMismatchError("control snapshot grid differs from the configured grid")
    return ControlPath(float(meta.get("T", setup.T)), data)


def _write_control(path: str, h: ControlPath, grid) -> None:
    sp.write_snapshot(path, h.values, grid, kind="control", nt=h.n_t, m=h.values.shape[-1], T=repr(h.T))


def _snapshots(run: RunDir, grid, every, index, q) -> None:
    if every and index % every == 0:
        sp.write_snapshot(run.file(f"q_{index:06d}.bin"), q, grid, kind="q", step=index)


# --- subcommands --------------------------------------------------------------


def _cmd_simulate(cfg: RunConfig, run: RunDir, args) -> dict:
    setup = cfg.setup()
    model = setup.model
    every = args.snapshot_every if args.snapshot_every is not None else int(cfg["time"]["snapshot_every"])
    _write_echo(cfg, run)
    times, states = model.integrate(setup.xi, setup.T, setup.dt)
    write_trajectory_csv(run.file("trajectory.csv"), model, times, states)
    for i, q in enumerate(states):
        _snapshots(run, setup.grid, every, i, q)
    sp.write_snapshot(run.file("q_final.bin"), states[-1], setup.grid)
    return {}


def _cmd_simulate_sde(cfg: RunConfig, run: RunDir, args) -> dict:
    setup = cfg.setup()
    eps = float(cfg["run"]["eps"])
    every = args.snapshot_every if args.snapshot_every is not None else int(cfg["time"]["snapshot_every"])
    _write_echo(cfg, run)
    traj_id = int(cfg["run"]["traj_id"])
    states = [setup.xi]
    states += [q[0] for _, q, _ in _paths(setup, eps, np.array([traj_id]))]
    states = np.stack(states)
    times = np.linspace(0.0, setup.T, setup.n_steps + 1)
    write_trajectory_csv(run.file("trajectory.csv"), setup.model, times, states)
    for i, q in enumerate(states):
        _snapshots(run, setup.grid, every, i, q)
    sp.write_snapshot(run.file("q_final.bin"), states[-1], setup.grid)
    return {"eps": eps, "traj_id": traj_id}


def _cmd_skeleton(cfg: RunConfig, run: RunDir, args) -> dict:
    setup = cfg.setup()
    h = _load_control(args.control, setup)
    if h is None:
        h = ControlPath.zeros(setup.T, setup.n_steps + 1, setup.basis)
    every = args.snapshot_every if args.snapshot_every is not None else int(cfg["time"]["snapshot_every"])
    _write_echo(cfg, run)
    traj = skeleton_solve(h, setup.xi, setup.model, setup.basis)
    write_trajectory_csv(run.file("trajectory.csv"), setup.model, h.times, traj)
    for i, q in enumerate(traj):
        _snapshots(run, setup.grid, every, i, q)
    sp.write_snapshot(run.file("q_final.bin"), traj[-1], setup.grid)
    return {}


def _minimize(cfg: RunConfig, run: RunDir, setup):
    problem = cfg.problem(setup)
    report = minimize_action(problem)
    report.write_csv(run.file("action_log.csv"))
    _write_control(run.file("control.bin"), report.control, setup.grid)
    write_trajectory_csv(run.file("skeleton.csv"), setup.model, report.control.times, report.trajectory)
    summary = {
        "action": report.action, "violation": report.violation, "feasible": report.feasible,
        "mu": report.mu, "iterations": report.iterations, "tol": problem.tol,
    }
    if not report.feasible:
        print("warning: optimiser budget exhausted before the target was reached", file=sys.stderr)
    return report, summary


def _cmd_minimize_action(cfg: RunConfig, run: RunDir, args) -> dict:
    setup = cfg.setup()
    _write_echo(cfg, run)
    _, summary = _minimize(cfg, run, setup)
    return {"minimizer": summary}


def _cmd_mc(cfg: RunConfig, run: RunDir, args) -> dict:
    setup = cfg.setup()
    _write_echo(cfg, run)
    eps, n = float(cfg["run"]["eps"]), int(cfg["run"]["n_paths"])
    est = mc_probability(cfg.event(), eps, n, setup, args.workers)
    _write_rows(run.file("estimate.csv"), [_estimate_row(est, eps)])
    return {"estimate": _estimate_row(est, eps)}


def _cmd_is(cfg: RunConfig, run: RunDir, args) -> dict:
    setup = cfg.setup()
    _write_echo(cfg, run)
    h = _load_control(args.control, setup)
    extra = {}
    if h is None:
        report, extra["minimizer"] = _minimize(cfg, run, setup)
        h = report.control
    eps, n = float(cfg["run"]["eps"]), int(cfg["run"]["n_paths"])
    est = is_probability(cfg.event(), eps, n, h, setup, args.workers)
    _write_rows(run.file("estimate.csv"), [_estimate_row(est, eps)])
    extra["estimate"] = _estimate_row(est, eps)
    return extra


def _study_out(run: RunDir, report: StudyReport) -> dict:
    report.write_csv(run.file(f"{report.name}.csv"))
    m = report.manifest()
    return {"study": {k: m[k] for k in ("study", "params", "passed", "flags", "failing_seeds")}}


def _cmd_ldp_scan(cfg: RunConfig, run: RunDir, args) -> dict:
    setup = cfg.setup()
    _write_echo(cfg, run)
    report, summary = _minimize(cfg, run, setup)
    st = cfg["study"]
    study = ldp_scaling_study(
        cfg.event(), st["eps_grid"], report, setup, int(cfg["run"]["n_paths"]), st["method"],
        None if st["tol"] is None else float(st["tol"]), args.workers,
    )
    return {"minimizer": summary, **_study_out(run, study)}


def _cmd_weak_convergence(cfg: RunConfig, run: RunDir, args) -> dict:
    setup = cfg.setup()
    h = _load_control(args.control, setup)
    _write_echo(cfg, run)
    st = cfg["study"]
    study = weak_convergence_study(
        h, st["eps_grid"], setup, int(cfg["run"]["n_paths"]), args.workers, bool(st["conventional"]),
    )
    return _study_out(run, study)


def _cmd_time_increments(cfg: RunConfig, run: RunDir, args) -> dict:
    setup = cfg.setup()
    h = _load_control(args.control, setup)
    _write_echo(cfg, run)
    st = cfg["study"]
    bound = math.inf if st["bound"] in ("inf", None) else float(st["bound"])
    study = time_increment_study(
        h, float(cfg["run"]["eps"]), st["levels"], bound, setup, int(cfg["run"]["n_paths"]), args.workers,
    )
    return _study_out(run, study)


def _cmd_verify(cfg: RunConfig, run: RunDir, args) -> dict:
    _write_echo(cfg, run)
    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    results = {}
    for name in names:
        report = run_suite(name, seed=int(cfg["run"]["seed"]))
        report.write_csv(run.file(f"{report.name}.csv"))
        results[name] = {"passed": report.passed, "failing_seeds": report.failing_seeds}
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} suite {name}" + (f" failing seeds {report.failing_seeds}" if report.failing_seeds else ""))
    return {"suites": results, "suites_passed": all(r["passed"] for r in results.values())}


HANDLERS = {
    "simulate": _cmd_simulate,
    "simulate-sde": _cmd_simulate_sde,
    "skeleton": _cmd_skeleton,
    "minimize-action": _cmd_minimize_action,
    "mc": _cmd_mc,
    "is": _cmd_is,
    "ldp-scan": _cmd_ldp_scan,
    "weak-convergence": _cmd_weak_convergence,
    "time-increments": _cmd_time_increments,
    "verify": _cmd_verify,
}


def _write_echo(cfg: RunConfig, run: RunDir) -> None:
    run.write_json("config.json", cfg.echo())


def _derived(cfg: RunConfig) -> dict:
    if "physical" not in cfg.given:
        return {}
    p = cfg.params(cfg.grid())
    return {"F1": p.F1, "F2": p.F2, "r": p.r}


def dispatch(command: str, cfg: RunConfig, args) -> int:
    out = args.out or str(cfg["run"]["out"])
    cfg["run"]["out"] = out
    t0 = time.perf_counter()
    run = RunDir(out, args.overwrite)
    results = HANDLERS[command](cfg, run, args)
    wall = time.perf_counter() - t0
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.echo(),
        "derived": _derived(cfg),
        "seeds": {"seed": int(cfg["run"]["seed"]), "stream": cfg["run"]["stream"]},
        "workers": args.workers,
        "version": __version__,
        "git_describe": _git_describe(),
        "timings": {"wall": wall},
        "outputs": list(run.outputs),
        "results": results,
    }
    run.write_json("manifest.json", manifest)
    if command == "verify" and not results["suites_passed"]:
        return EXIT_SUITE
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = parse_config(args.config, args.overrides)
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        return dispatch(args.command, cfg, args)
    except NumericalInstability as exc:
        print(f"error: numerical instability at step {exc.step}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
