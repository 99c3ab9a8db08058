"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (invalid model, infeasible or
unconverged solve), 2 usage or input-format error. The last line written to
stdout is always a JSON summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cmaes import CmaesConfig, write_generation_log
from .codesign import CodesignReport, StudySpec, render_table, run_study
from .model import ORIGINAL_GEARS, ModelError, TransmissionSpec, design_violations, load_document, load_model, model_from_dict, validate_model
from .ocp import INTEGRATORS, SPACES, InfeasibleProblemError, OcProblemSpec, Trajectory, build_nlp, initial_guess
from .solver import SolverConfig, solve, verify_by_rollout

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        _summary({"command": None, "status": "usage_error", "error": message})
        sys.exit(EXIT_USAGE)


def _summary(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def _floats(text: str, n: int | None = None, name="value") -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name} must be comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"{name} needs exactly {n} values, got {len(vals)}")
    if not vals or not all(np.isfinite(vals)):
        raise argparse.ArgumentTypeError(f"{name} must be finite numbers")
    return vals


def _gears(text):
    return _floats(text, 4, "--gears")


def _payloads(text):
    vals = _floats(text, None, "--payloads")
    if any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("--payloads must be >= 0")
    return vals


def _nonneg(text):
    v = float(text)
    if not (v >= 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError("must be a finite number >= 0")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _positive(text):
    v = float(text)
    if not (v > 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError("must be a finite number > 0")
    return v


def _solver_args(p):
    p.add_argument("--max-outer", type=_positive_int, default=SolverConfig.max_outer_iters, help="outer iteration budget")
    p.add_argument("--max-inner", type=_positive_int, default=SolverConfig.max_inner_iters, help="inner iteration budget")
    p.add_argument("--tol-con", type=_positive, default=SolverConfig.tol_constraint, help="constraint tolerance")


def _ocp_args(p):
    p.add_argument("--T", type=_positive, default=OcProblemSpec.T, help="horizon, s")
    p.add_argument("--N", type=_positive_int, default=OcProblemSpec.N, help="number of intervals")
    p.add_argument("--integrator", choices=INTEGRATORS, default=OcProblemSpec.integrator)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="beltcodesign", description="Gear-ratio co-design of a belt-driven manipulator.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("model-validate", help="check a model file")
    p.add_argument("--model", help="model JSON (default: bundled model)")

    p = sub.add_parser("motion", help="solve one motion problem")
    p.add_argument("--model")
    p.add_argument("--space", choices=SPACES, default="actuation")
    p.add_argument("--payload", type=_nonneg, default=0.0, help="payload mass, kg")
    p.add_argument("--gears", type=_gears, default=list(ORIGINAL_GEARS), help="g1,g2,g3,g4")
    p.add_argument("--out", help="output prefix; writes PREFIX.json and PREFIX.csv")
    _ocp_args(p)
    _solver_args(p)

    p = sub.add_parser("codesign", help="run a bi-level co-design study")
    p.add_argument("--model")
    p.add_argument("--space", choices=SPACES + ("both",), default="both")
    p.add_argument("--payloads", type=_payloads, default=[0.0, 1.0, 3.0])
    p.add_argument("--seeds", type=_positive_int, default=5, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--pop", type=int, default=CmaesConfig.population, help="population size")
    p.add_argument("--gens", type=_positive_int, default=CmaesConfig.generations, help="generations")
    p.add_argument("--sigma0", type=_positive, default=CmaesConfig.sigma0, help="initial step, fraction of bound width")
    p.add_argument("--jobs", type=_positive_int, default=os.cpu_count() or 1, help="worker processes")
    p.add_argument("--out", required=True, help="output directory")
    _ocp_args(p)
    _solver_args(p)

    p = sub.add_parser("rollout", help="re-simulate a trajectory file from its controls")
    p.add_argument("--traj", required=True, help="trajectory JSON written by motion")
    p.add_argument("--model", help="model JSON (default: the one recorded in the trajectory)")
    p.add_argument("--gears", type=_gears, help="override recorded gear ratios")
    p.add_argument("--payload", type=_nonneg, help="override recorded payload")
    p.add_argument("--tol", type=_positive, default=1e-5, help="accepted state deviation")

    p = sub.add_parser("export", help="convert trajectories or generation logs")
    p.add_argument("--traj", help="trajectory JSON or CSV")
    p.add_argument("--in", dest="inp", help="co-design report JSON (exports generation logs)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--space", choices=SPACES, help="space of a CSV trajectory")
    p.add_argument("--out", help="output file (default: stdout)")

    p = sub.add_parser("report", help="summarise a co-design report")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--table", action="store_true", help="print the before/after table")
    return parser


def _load_model(path):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise UsageError(f"model file not found: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"model file is not valid JSON: {exc}") from None


def _ocp_spec(args, space) -> OcProblemSpec:
    return OcProblemSpec(space=space, T=args.T, N=args.N, integrator=args.integrator)


def _solver_config(args) -> SolverConfig:
    return SolverConfig(max_outer_iters=args.max_outer, max_inner_iters=args.max_inner, tol_constraint=args.tol_con)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def cmd_model_validate(args) -> int:
    try:
        doc = load_document(args.model)
    except FileNotFoundError as exc:
        raise UsageError(f"model file not found: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"model file is not valid JSON: {exc}") from None
    try:
        model = model_from_dict(doc)
        problems = [str(d) for d in validate_model(model)]
    except ModelError as exc:
        problems = [str(d) for d in exc.diagnostics]
    for msg in problems:
        print(msg)
    ok = not problems
    if ok:
        print(f"model ok: {model.n_joints} joints, moving mass {model.moving_mass:.3f} kg")
    _summary({"command": "model-validate", "status": "valid" if ok else "invalid", "diagnostics": problems})
    return EXIT_OK if ok else EXIT_DOMAIN


def motor_utilization(model, transmission, trajectory) -> np.ndarray:
    """Peak |tau_u| / tau_u,max per motor over the trajectory."""
    U = np.asarray(trajectory.controls)
    tau_u = U if trajectory.space == "actuation" else U @ transmission.G_inv
    limit = np.maximum(np.abs(model.tau_u_min), np.abs(model.tau_u_max))
    return np.max(np.abs(tau_u), axis=0) / limit


def cmd_motion(args) -> int:
    model = _load_model(args.model)
    problems = design_violations(args.gears)
    if problems:
        raise UsageError("invalid --gears: " + "; ".join(problems))
    transmission = TransmissionSpec(args.gears)
    m = model.with_payload(args.payload)
    spec = _ocp_spec(args, args.space)
    try:
        nlp = build_nlp(m, transmission, spec)
    except InfeasibleProblemError as exc:
        print(f"status: infeasible ({exc})")
        _summary({"command": "motion", "status": "infeasible", "message": str(exc), "space": args.space})
        return EXIT_DOMAIN
    result = solve(nlp, initial_guess(m, transmission, spec, nlp), _solver_config(args))
    util = motor_utilization(m, transmission, result.trajectory) if result.trajectory is not None else np.full(4, np.nan)
    print(f"status: {result.status}" + (f" ({result.message})" if result.message else ""))
    print(f"cost: {result.objective:.6g}")
    print(f"constraint violation: {result.constraint_violation:.3e}")
    print("max torque utilization per motor: " + ", ".join(f"{v:.3f}" for v in util))
    files = []
    if args.out and result.trajectory is not None:
        traj = result.trajectory
        traj.meta = {
            "gear_ratios": [float(v) for v in args.gears],
            "payload": args.payload,
            "model": str(Path(args.model).resolve()) if args.model else None,
            "solve": result.to_dict(with_trajectory=False),
        }
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        files = [str(prefix.with_suffix(".json")), str(prefix.with_suffix(".csv"))]
        Path(files[0]).write_text(traj.to_json())
        Path(files[1]).write_text(traj.to_csv())
    _summary(
        {
            "command": "motion",
            "status": result.status,
            "space": args.space,
            "payload": args.payload,
            "gears": [float(v) for v in args.gears],
            "cost": result.objective,
            "constraint_violation": result.constraint_violation,
            "utilization": [float(v) for v in util],
            "files": files,
        }
    )
    return EXIT_OK if result.converged else EXIT_DOMAIN


def cmd_codesign(args) -> int:
    if args.pop < 4:
        raise UsageError("--pop must be >= 4")
    if args.model:
        _load_model(args.model)
    spaces = SPACES if args.space == "both" else (args.space,)
    study = StudySpec(
        model_path=str(Path(args.model).resolve()) if args.model else None,
        spaces=spaces,
        payloads=tuple(args.payloads),
        seeds=args.seeds,
        cmaes=CmaesConfig(population=args.pop, generations=args.gens, sigma0=args.sigma0, seed=args.seed),
        solver=_solver_config(args),
        ocp=_ocp_spec(args, "actuation"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_study(study, jobs=args.jobs, progress=lambda msg: print(msg, flush=True))
    (out / "report.json").write_text(report.to_json())
    for cell in report.cells:
        name = f"generations_{cell.space}_{cell.payload:g}kg_seed{cell.seed}.csv"
        (out / name).write_text(write_generation_log(cell.log))
    table = render_table(report)
    (out / "table.txt").write_text(table)
    print(table, end="")
    ok = any(s.after_feasible for s in report.summaries)
    _summary(
        {
            "command": "codesign",
            "status": "ok" if ok else "infeasible",
            "report": str(out / "report.json"),
            "wall_time": report.wall_time,
            "cells": [s.to_dict() for s in report.summaries],
        }
    )
    return EXIT_OK if ok else EXIT_DOMAIN


def _load_trajectory(path, space=None) -> Trajectory:
    text = None
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    try:
        if path.endswith(".csv"):
            if space is None:
                raise UsageError("--space is required for CSV trajectories")
            return Trajectory.from_csv(text, space)
        return Trajectory.from_dict(json.loads(text))
    except (ValueError, IndexError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_rollout(args) -> int:
    traj = _load_trajectory(args.traj)
    meta = traj.meta or {}
    gears = args.gears or meta.get("gear_ratios")
    payload = args.payload if args.payload is not None else meta.get("payload")
    if gears is None or payload is None or not traj.spec:
        raise UsageError("trajectory lacks gear/payload/spec metadata; pass --gears and --payload")
    try:
        spec = OcProblemSpec.from_dict(traj.spec)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad problem spec in trajectory: {exc}") from None
    model = _load_model(args.model or meta.get("model")).with_payload(payload)
    report = verify_by_rollout(model, TransmissionSpec(gears), spec, traj)
    ok = report.max_state_deviation < args.tol
    for k, v in report.to_dict().items():
        print(f"{k}: {v:.3e}")
    _summary({"command": "rollout", "status": "ok" if ok else "deviates", "tol": args.tol, **report.to_dict()})
    return EXIT_OK if ok else EXIT_DOMAIN


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_export(args) -> int:
    if bool(args.traj) == bool(args.inp):
        raise UsageError("give exactly one of --traj or --in")
    if args.traj:
        traj = _load_trajectory(args.traj, args.space)
        text = traj.to_csv() if args.format == "csv" else traj.to_json() + "\n"
        _emit(text, args.out)
        _summary({"command": "export", "status": "ok", "kind": "trajectory", "format": args.format, "rows": int(traj.states.shape[0]), "out": args.out})
        return EXIT_OK
    report = _load_report(args.inp)
    rows = []
    for cell in report.cells:
        rows += [{"space": cell.space, "payload": cell.payload, "seed": cell.seed, **r} for r in cell.log]
    if args.format == "csv":
        text = write_generation_log(rows, key_columns=("space", "payload", "seed"))
    else:
        text = json.dumps(rows, indent=1) + "\n"
    _emit(text, args.out)
    _summary({"command": "export", "status": "ok", "kind": "generation_log", "format": args.format, "rows": len(rows), "out": args.out})
    return EXIT_OK


def _load_report(path) -> CodesignReport:
    doc = _read_json(path)
    try:
        return CodesignReport.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path} is not a co-design report: {exc}") from None


def cmd_report(args) -> int:
    report = _load_report(args.inp)
    if args.table:
        print(render_table(report), end="")
    else:
        for s in report.summaries:
            after = f"{s.after_cost:.6g}" if s.after_feasible else "infeasible"
            before = f"{s.before_cost:.6g}" if s.before_feasible else "infeasible"
            print(f"{s.space:9s} {s.payload:g} kg: before {before}, after {after}")
    _summary({"command": "report", "status": "ok", "cells": [s.to_dict() for s in report.summaries]})
    return EXIT_OK


COMMANDS = {
    "model-validate": cmd_model_validate,
    "motion": cmd_motion,
    "codesign": cmd_codesign,
    "rollout": cmd_rollout,
    "export": cmd_export,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _summary({"command": args.command, "status": "usage_error", "error": str(exc)})
        return EXIT_USAGE
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _summary({"command": args.command, "status": "invalid_model", "error": str(exc)})
        return EXIT_DOMAIN


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
