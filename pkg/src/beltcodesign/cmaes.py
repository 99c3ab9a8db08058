"""Ask/tell CMA-ES for the design loop.

The search runs in coordinates normalised to the unit box, so ``sigma0`` is a
fraction of each bound width. Candidates are evaluated as sampled; anything
outside the box or violating the gear ordering is penalised rather than
repaired.
"""

from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import GEAR_HI, GEAR_LO, design_violations

PENALTY = 1e6
LOG_COLUMNS = ("generation", "eval_index", "g1", "g2", "g3", "g4", "fitness", "feasible")


@dataclass(frozen=True)
class CmaesConfig:
    population: int = 100
    generations: int = 30
    sigma0: float = 0.3
    seed: int = 0
    bounds_lo: tuple = tuple(GEAR_LO)
    bounds_hi: tuple = tuple(GEAR_HI)
    penalty_value: float = PENALTY
    mean0: tuple | None = None

    def __post_init__(self):
        lo = np.asarray(self.bounds_lo, dtype=float)
        hi = np.asarray(self.bounds_hi, dtype=float)
        if int(self.population) != self.population or self.population < 4:
            raise ValueError("population must be an integer >= 4")
        if int(self.generations) != self.generations or self.generations < 1:
            raise ValueError("generations must be an integer >= 1")
        if not (np.isfinite(self.sigma0) and self.sigma0 > 0):
            raise ValueError("sigma0 must be positive")
        if lo.shape != hi.shape or lo.ndim != 1 or not np.all(lo < hi):
            raise ValueError("bounds_lo must be elementwise below bounds_hi")
        if self.mean0 is not None and np.shape(self.mean0) != lo.shape:
            raise ValueError("mean0 must match the bound dimension")

    @property
    def dim(self) -> int:
        return len(self.bounds_lo)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds_lo"] = [float(v) for v in self.bounds_lo]
        d["bounds_hi"] = [float(v) for v in self.bounds_hi]
        d["mean0"] = None if self.mean0 is None else [float(v) for v in self.mean0]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CmaesConfig":
        d = dict(d)
        for key in ("bounds_lo", "bounds_hi", "mean0"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DesignCandidate:
    gear_ratios: np.ndarray
    fitness: float
    feasible: bool
    status: str = ""

    def to_dict(self) -> dict:
        return {
            "gear_ratios": [float(v) for v in self.gear_ratios],
            "fitness": float(self.fitness),
            "feasible": bool(self.feasible),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DesignCandidate":
        return cls(np.asarray(d["gear_ratios"], dtype=float), float(d["fitness"]), bool(d["feasible"]), d.get("status", ""))


class CmaesState:
    """Strategy state: mean, step size, covariance and evolution paths.

    Parameters
    ----------
    config : CmaesConfig
        Population, bounds, initial step size and seed.
    """

    def __init__(self, config: CmaesConfig):
        self.config = config
        n = config.dim
        self.lo = np.asarray(config.bounds_lo, dtype=float)
        self.hi = np.asarray(config.bounds_hi, dtype=float)
        self.width = self.hi - self.lo
        self.rng = np.random.default_rng(config.seed)

        lam = int(config.population)
        mu = lam // 2
        w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights**2)
        self.lam, self.mu, self.n = lam, mu, n
        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        if config.mean0 is None:
            self.mean = np.full(n, 0.5)
        else:
            self.mean = (np.asarray(config.mean0, dtype=float) - self.lo) / self.width
        self.sigma = float(config.sigma0)
        self.C = np.eye(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.generation = 0
        self.evaluations = 0
        self.best_x: np.ndarray | None = None
        self.best_f = math.inf
        self._pending: np.ndarray | None = None
        self._injected: list[np.ndarray] = []

    # coordinates
    def to_design(self, y):
        return self.lo + self.width * np.asarray(y)

    def to_unit(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / self.width

    def inject(self, x) -> None:
        """Replace a sample of the next ``ask`` by the design ``x``."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"injected design must have shape ({self.n},)")
        self._injected.append(x.copy())

    def ask(self) -> np.ndarray:
        z = self.rng.standard_normal((self.lam, self.n))
        y = self.mean + self.sigma * (z * self.D) @ self.B.T
        limit = math.sqrt(self.n) + 2 * self.n / (self.n + 2)
        for i, x in enumerate(self._injected[: self.lam]):
            # keep the injected step within a typical Mahalanobis length
            step = self.to_unit(x) - self.mean
            zi = (self.B.T @ step) / self.D / self.sigma
            norm = np.linalg.norm(zi)
            if norm > limit:
                step *= limit / norm
            y[i] = self.mean + step
        self._injected = self._injected[self.lam :]
        self._pending = y
        return self.to_design(y)

    def tell(self, fitnesses) -> None:
        if self._pending is None:
            raise RuntimeError("tell called without a preceding ask")
        f = np.asarray(fitnesses, dtype=float)
        if f.shape != (self.lam,):
            raise ValueError(f"expected {self.lam} fitness values, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("fitness values must be finite; penalise infeasible candidates first")
        y = self._pending
        self._pending = None
        self.generation += 1
        self.evaluations += self.lam

        i_best = int(np.argmin(f))
        if f[i_best] < self.best_f:
            self.best_f = float(f[i_best])
            self.best_x = self.to_design(y[i_best])

        old = self.mean
        if np.ptp(f) == 0.0:
            # no ranking information: keep the mean and covariance, let the paths decay
            self.ps = (1 - self.cs) * self.ps
            self.pc = (1 - self.cc) * self.pc
            self._adapt_sigma()
            return

        order = np.argsort(f, kind="stable")[: self.mu]
        sel = y[order]
        self.mean = self.weights @ sel
        delta = (self.mean - old) / self.sigma
        c_inv_sqrt = self.B @ np.diag(1 / self.D) @ self.B.T
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (c_inv_sqrt @ delta)
        hsig = np.linalg.norm(self.ps) / math.sqrt(1 - (1 - self.cs) ** (2 * self.generation)) / self.chi_n < 1.4 + 2 / (self.n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * delta

        artmp = (sel - old) / self.sigma
        c1a = self.c1 * (1 - (1 - hsig) * self.cc * (2 - self.cc))
        self.C = (
            (1 - c1a - self.cmu) * self.C
            + self.c1 * np.outer(self.pc, self.pc)
            + self.cmu * (artmp.T * self.weights) @ artmp
        )
        self._adapt_sigma()
        self._decompose()

    def _adapt_sigma(self):
        self.sigma *= math.exp(min(1.0, (self.cs / self.damps) * (np.linalg.norm(self.ps) / self.chi_n - 1)))

    def _decompose(self):
        C = 0.5 * (self.C + self.C.T)
        evals, evecs = np.linalg.eigh(C)
        floor = max(1e-14 * max(evals.max(), 0.0), 1e-300)
        evals = np.maximum(evals, floor)
        self.C = (evecs * evals) @ evecs.T
        self.B, self.D = evecs, np.sqrt(evals)

    @property
    def covariance(self) -> np.ndarray:
        """Covariance in design coordinates (sigma included)."""
        return self.sigma**2 * self.C * np.outer(self.width, self.width)

    @property
    def mean_design(self) -> np.ndarray:
        return self.to_design(self.mean)


def ask(state: CmaesState) -> np.ndarray:
    return state.ask()


def tell(state: CmaesState, fitnesses) -> CmaesState:
    state.tell(fitnesses)
    return state


def penalized_fitness(g, inner, bounds_lo=GEAR_LO, bounds_hi=GEAR_HI, penalty=PENALTY) -> float:
    """Fitness of design ``g``: the inner cost, or ``penalty`` for any failure.

    ``inner(g)`` may return a cost or a tuple whose first two entries are
    ``(cost, feasible)``. Exceptions raised by ``inner`` count as infeasible.
    """
    return _penalized(g, inner, bounds_lo, bounds_hi, penalty)[0]


def _penalized(g, inner, bounds_lo, bounds_hi, penalty):
    g = np.asarray(g, dtype=float)
    if g.shape != (4,) or not np.all(np.isfinite(g)):
        return penalty, False, "invalid"
    if design_violations(g, bounds_lo, bounds_hi):
        return penalty, False, "design_violation"
    try:
        out = inner(g)
    except Exception as exc:  # all inner failures fold into the penalty
        return penalty, False, f"error: {exc}"
    if isinstance(out, tuple):
        cost, feasible = out[0], bool(out[1])
        status = "" if len(out) < 3 else out[2] if isinstance(out[2], str) else getattr(out[2], "status", "")
    else:
        cost, feasible, status = out, True, ""
    if not feasible or cost is None or not np.isfinite(cost):
        return penalty, False, status or "infeasible"
    return float(cost), True, status or "converged"


@dataclass
class CmaesResult:
    best: DesignCandidate
    log: list = field(default_factory=list)
    best_so_far: list = field(default_factory=list)
    evaluations: int = 0
    generations: int = 0

    def to_dict(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "best_so_far": [float(v) for v in self.best_so_far],
            "evaluations": self.evaluations,
            "generations": self.generations,
            "log": self.log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CmaesResult":
        return cls(DesignCandidate.from_dict(d["best"]), list(d["log"]), list(d["best_so_far"]), d["evaluations"], d["generations"])


def minimize(inner, config: CmaesConfig, inject=(), mapper=map) -> CmaesResult:
    """Run ``config.generations`` generations of CMA-ES on ``penalized_fitness``.

    Parameters
    ----------
    inner : callable
        Inner evaluation, see :func:`penalized_fitness`.
    config : CmaesConfig
    inject : sequence of designs
        Evaluated in the first generation in place of random samples.
    mapper : callable
        ``map``-like function used to evaluate one generation; results must
        come back in order.
    """
    state = CmaesState(config)
    for x in inject:
        state.inject(x)
    best = DesignCandidate(state.mean_design, config.penalty_value, False, "not evaluated")
    log, best_so_far = [], []

    # a partial of a module-level function stays picklable for process pools
    evaluate = functools.partial(_penalized, inner=inner, bounds_lo=config.bounds_lo, bounds_hi=config.bounds_hi, penalty=config.penalty_value)

    for gen in range(config.generations):
        X = state.ask()
        results = list(mapper(evaluate, list(X)))
        fit = np.array([r[0] for r in results])
        for i, (x, (fv, feas, status)) in enumerate(zip(X, results)):
            log.append(
                {
                    "generation": gen,
                    "eval_index": gen * state.lam + i,
                    "g1": float(x[0]),
                    "g2": float(x[1]),
                    "g3": float(x[2]),
                    "g4": float(x[3]),
                    "fitness": float(fv),
                    "feasible": bool(feas),
                }
            )
            if fv < best.fitness or (fv == best.fitness and feas and not best.feasible):
                best = DesignCandidate(np.array(x, dtype=float), float(fv), bool(feas), status)
        state.tell(fit)
        best_so_far.append(best.fitness)
    return CmaesResult(best, log, best_so_far, state.evaluations, state.generation)


def write_generation_log(rows, fh=None, key_columns=()) -> str:
    """Write generation-log rows as CSV; returns the text if ``fh`` is None.

    ``key_columns`` are prepended verbatim, e.g. to tag rows of several runs.
    """
    out = io.StringIO() if fh is None else fh
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(tuple(key_columns) + LOG_COLUMNS)
    for r in rows:
        writer.writerow(
            [r[k] for k in key_columns]
            + [r["generation"], r["eval_index"]]
            + [repr(float(r[k])) for k in ("g1", "g2", "g3", "g4", "fitness")]
            + [int(bool(r["feasible"]))]
        )
    return out.getvalue() if fh is None else ""


def read_generation_log(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
        raise ValueError(f"generation log must have columns {','.join(LOG_COLUMNS)}")
    rows = []
    for r in reader:
        rows.append(
            {
                "generation": int(r["generation"]),
                "eval_index": int(r["eval_index"]),
                **{k: float(r[k]) for k in ("g1", "g2", "g3", "g4", "fitness")},
                "feasible": r["feasible"] in ("1", "True", "true"),
            }
        )
    return rows
