"""Bi-level gear-ratio co-design: CMA-ES over designs, optimal control inside."""

from __future__ import annotations

import functools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cmaes import PENALTY, CmaesConfig, DesignCandidate, minimize
from .model import ORIGINAL_GEARS, TransmissionSpec, design_violations, joint_limits_from_actuation, load_model
from .ocp import SPACES, InfeasibleProblemError, OcProblemSpec, build_nlp, initial_guess
from .solver import SolverConfig, solve

log = logging.getLogger(__name__)

REPORT_VERSION = 1


def evaluate_design(g, space, payload, model, ocp_spec: OcProblemSpec | None = None, solver_config: SolverConfig | None = None):
    """Solve the motion problem for design ``g``.

    Returns
    -------
    cost : float
        Optimal-control cost, or the penalty when infeasible.
    feasible : bool
    result : SolveResult or None
        None when the design or its limit boxes rule out a solve.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != (4,) or not np.all(np.isfinite(g)) or design_violations(g):
        return PENALTY, False, None
    spec = (ocp_spec or OcProblemSpec()).with_space(space)
    try:
        transmission = TransmissionSpec(g)
        m = model.with_payload(float(payload))
        nlp = build_nlp(m, transmission, spec)
        result = solve(nlp, initial_guess(m, transmission, spec, nlp), solver_config)
    except (InfeasibleProblemError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.debug("design %s rejected: %s", g, exc)
        return PENALTY, False, None
    if result.status != "converged":
        return PENALTY, False, result
    return float(result.objective), True, result


def _inner(g, space, payload, model, ocp_spec, solver_config):
    cost, feasible, result = evaluate_design(g, space, payload, model, ocp_spec, solver_config)
    return cost, feasible, result.status if result is not None else "rejected"


def max_differential_torque(gear_ratios, model, space) -> float:
    """Largest |tau_4| each formulation's control box can command."""
    t = TransmissionSpec(gear_ratios)
    if space == "joint":
        lo, hi, _, _ = joint_limits_from_actuation(t.G, model.tau_u_min, model.tau_u_max, model.qd_u_min, model.qd_u_max, t.G_inv)
        return float(max(abs(lo[3]), abs(hi[3])))
    if space == "actuation":
        # tau_4 = g4 (tau_u3 - tau_u4), extremised at opposite motor limits
        span = max(model.tau_u_max[2] - model.tau_u_min[3], model.tau_u_max[3] - model.tau_u_min[2])
        return float(t.gear_ratios[3] * span)
    raise ValueError(f"unknown space {space!r}")


@dataclass
class StudySpec:
    model_path: str | None = None
    spaces: tuple = SPACES
    payloads: tuple = (0.0, 1.0, 3.0)
    seeds: int = 5
    cmaes: CmaesConfig = field(default_factory=CmaesConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    ocp: OcProblemSpec = field(default_factory=OcProblemSpec)

    def __post_init__(self):
        self.spaces = tuple(self.spaces)
        self.payloads = tuple(float(p) for p in self.payloads)
        if not self.spaces or any(s not in SPACES for s in self.spaces):
            raise ValueError(f"spaces must be a non-empty subset of {SPACES}")
        if not self.payloads or any(not (p >= 0 and np.isfinite(p)) for p in self.payloads):
            raise ValueError("payloads must be finite and >= 0")
        if int(self.seeds) != self.seeds or self.seeds < 1:
            raise ValueError("seeds must be an integer >= 1")

    @classmethod
    def desk(cls, **kw) -> "StudySpec":
        """Small preset: population 20, 10 generations, 2 seeds, payloads 0 and 1 kg."""
        kw.setdefault("payloads", (0.0, 1.0))
        kw.setdefault("seeds", 2)
        kw.setdefault("cmaes", CmaesConfig(population=20, generations=10))
        return cls(**kw)

    @property
    def seed_values(self) -> list[int]:
        return [self.cmaes.seed + i for i in range(self.seeds)]

    def to_dict(self) -> dict:
        return {
            "model_path": self.model_path,
            "spaces": list(self.spaces),
            "payloads": list(self.payloads),
            "seeds": self.seeds,
            "cmaes": self.cmaes.to_dict(),
            "solver": self.solver.to_dict(),
            "ocp": self.ocp.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudySpec":
        return cls(
            model_path=d.get("model_path"),
            spaces=tuple(d["spaces"]),
            payloads=tuple(d["payloads"]),
            seeds=d["seeds"],
            cmaes=CmaesConfig.from_dict(d["cmaes"]),
            solver=SolverConfig(**d["solver"]),
            ocp=OcProblemSpec.from_dict(d["ocp"]),
        )


@dataclass
class CellResult:
    space: str
    payload: float
    seed: int
    best: DesignCandidate
    best_so_far: list
    log: list
    evaluations: int
    generations: int
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "payload": self.payload,
            "seed": self.seed,
            "best": self.best.to_dict(),
            "best_cost": float(self.best.fitness),
            "best_so_far": [float(v) for v in self.best_so_far],
            "evaluations": self.evaluations,
            "generations": self.generations,
            "log": self.log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        return cls(d["space"], float(d["payload"]), int(d["seed"]), DesignCandidate.from_dict(d["best"]), list(d["best_so_far"]), list(d["log"]), int(d["evaluations"]), int(d["generations"]))


@dataclass
class Summary:
    """Before/after comparison for one (space, payload) pair."""

    space: str
    payload: float
    before_cost: float
    before_feasible: bool
    before_status: str
    after: DesignCandidate | None
    seed_statuses: list

    @property
    def after_feasible(self) -> bool:
        return self.after is not None and self.after.feasible

    @property
    def after_cost(self) -> float:
        return self.after.fitness if self.after_feasible else PENALTY

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "payload": self.payload,
            "before_gears": [float(v) for v in ORIGINAL_GEARS],
            "before_cost": float(self.before_cost),
            "before_feasible": self.before_feasible,
            "before_status": self.before_status,
            "after": None if self.after is None else self.after.to_dict(),
            "after_cost": float(self.after_cost),
            "after_feasible": self.after_feasible,
            "seed_statuses": list(self.seed_statuses),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Summary":
        after = None if d["after"] is None else DesignCandidate.from_dict(d["after"])
        return cls(d["space"], float(d["payload"]), float(d["before_cost"]), bool(d["before_feasible"]), d["before_status"], after, list(d["seed_statuses"]))


@dataclass
class CodesignReport:
    study: StudySpec
    cells: list
    summaries: list
    wall_time: float = 0.0

    def summary(self, space, payload) -> Summary:
        for s in self.summaries:
            if s.space == space and s.payload == float(payload):
                return s
        raise KeyError((space, payload))

    def cell(self, space, payload, seed) -> CellResult:
        for c in self.cells:
            if (c.space, c.payload, c.seed) == (space, float(payload), seed):
                return c
        raise KeyError((space, payload, seed))

    @property
    def any_feasible(self) -> bool:
        return any(s.after_feasible or s.before_feasible for s in self.summaries)

    def to_dict(self, with_timing=False) -> dict:
        d = {
            "report_version": REPORT_VERSION,
            "study": self.study.to_dict(),
            "summaries": [s.to_dict() for s in self.summaries],
            "cells": [c.to_dict() for c in self.cells],
        }
        if with_timing:
            d["wall_time"] = self.wall_time
        return d

    def to_json(self) -> str:
        # timing is left out so that reruns produce identical files
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "CodesignReport":
        if d.get("report_version") != REPORT_VERSION or "summaries" not in d or "cells" not in d:
            raise ValueError("not a co-design report")
        return cls(
            StudySpec.from_dict(d["study"]),
            [CellResult.from_dict(c) for c in d["cells"]],
            [Summary.from_dict(s) for s in d["summaries"]],
            float(d.get("wall_time", 0.0)),
        )


def _fmt_gears(g) -> str:
    return "[" + ", ".join(f"{v:.3g}" for v in g) + "]"


def render_table(report: CodesignReport) -> str:
    """Fixed-width table with one row per (payload, space, before/after)."""
    header = ("Payload", "Space", "Before/After", "Gear Ratios", "Cost")
    rows = []
    for payload in report.study.payloads:
        for space in report.study.spaces:
            s = report.summary(space, payload)
            before = f"{s.before_cost:.2f}" if s.before_feasible else "-"
            rows.append((f"{payload:g} kg", space.capitalize(), "Before", _fmt_gears(ORIGINAL_GEARS), before))
            if s.after_feasible:
                rows.append((f"{payload:g} kg", space.capitalize(), "After", _fmt_gears(s.after.gear_ratios), f"{s.after.fitness:.2f}"))
            else:
                rows.append((f"{payload:g} kg", space.capitalize(), "After", "-", "-"))
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    out = [line(header), "  ".join("-" * w for w in widths)]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def run_study(study: StudySpec, model=None, jobs: int = 1, progress=None) -> CodesignReport:
    """Run every (space, payload, seed) cell of ``study``.

    Parameters
    ----------
    model : RobotModel, optional
        Overrides ``study.model_path``.
    jobs : int
        Worker processes for evaluating a generation; 1 runs in-process.
    progress : callable, optional
        Called with a short message after each cell.
    """
    t0 = time.perf_counter()
    model = model if model is not None else load_model(study.model_path)
    cells, summaries = [], []
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    mapper = pool.map if pool is not None else map
    try:
        for space in study.spaces:
            for payload in study.payloads:
                before_cost, before_feasible, before_res = evaluate_design(ORIGINAL_GEARS, space, payload, model, study.ocp, study.solver)
                before_status = before_res.status if before_res is not None else "rejected"
                inner = functools.partial(_inner, space=space, payload=payload, model=model, ocp_spec=study.ocp, solver_config=study.solver)
                best, statuses = None, []
                for seed in study.seed_values:
                    tc = time.perf_counter()
                    cfg = replace(study.cmaes, seed=seed)
                    # the original design joins the first generation so the optimum never regresses below it
                    res = minimize(inner, cfg, inject=[ORIGINAL_GEARS], mapper=mapper)
                    cell = CellResult(space, payload, seed, res.best, res.best_so_far, res.log, res.evaluations, res.generations, time.perf_counter() - tc)
                    cells.append(cell)
                    statuses.append("feasible" if res.best.feasible else "infeasible")
                    if res.best.feasible and (best is None or res.best.fitness < best.fitness):
                        best = res.best
                    if progress is not None:
                        progress(f"{space} payload={payload:g} seed={seed}: best {res.best.fitness:.6g} ({cell.wall_time:.0f}s)")
                summaries.append(Summary(space, payload, before_cost, before_feasible, before_status, best, statuses))
    finally:
        if pool is not None:
            pool.shutdown()
    return CodesignReport(study, cells, summaries, time.perf_counter() - t0)
