"""Augmented-Lagrangian solver for equality- and bound-constrained NLPs.

Outer loop: multiplier/penalty updates on the equality constraints.
Inner loop: projected Gauss-Newton on the bound-constrained augmented
Lagrangian. Each step solves a box-constrained quadratic model, followed by
an Armijo search along the feasible segment.

Any object exposing ``objective``, ``gradient``, ``constraints``,
``jacobian`` (sparse), ``lo``/``hi`` and optionally ``objective_hessian`` can
be solved; :class:`~beltcodesign.ocp.Nlp` is the main client.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

STATUSES = ("converged", "max_iters", "infeasible", "numerical_failure")


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iters: int = 30
    max_inner_iters: int = 200
    tol_constraint: float = 1e-6
    tol_stationarity: float = 1e-5
    penalty_init: float = 100.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    # converged also requires the open-loop rollout to stay within rollout_factor * tol_constraint
    rollout_factor: float = 1.0

    def __post_init__(self):
        if min(self.tol_constraint, self.tol_stationarity, self.penalty_init, self.penalty_max) <= 0:
            raise ValueError("tolerances and penalties must be > 0")
        if not 0 < self.rollout_factor <= 10:
            raise ValueError("rollout_factor must be in (0, 10]")
        if self.penalty_growth <= 1:
            raise ValueError("penalty_growth must be > 1")
        if self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ValueError("iteration budgets must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    status: str
    constraint_violation: float
    iterations: int
    wall_time: float
    outer_iterations: int = 0
    stationarity: float = float("nan")
    multipliers: np.ndarray | None = None
    trajectory: object = None
    merit_history: list = field(default_factory=list)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self, with_trajectory=True) -> dict:
        out = {
            "status": self.status,
            "objective": self.objective,
            "constraint_violation": self.constraint_violation,
            "stationarity": self.stationarity,
            "iterations": self.iterations,
            "outer_iterations": self.outer_iterations,
            "wall_time": self.wall_time,
            "message": self.message,
        }
        if with_trajectory and self.trajectory is not None:
            out["trajectory"] = self.trajectory.to_dict()
        return out


class SimpleNlp:
    """Small dense NLP from callables, for tests and toy problems."""

    def __init__(self, f, grad, c, jac, lo, hi, hess=None):
        self._f, self._g, self._c, self._j, self._h = f, grad, c, jac, hess
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.size = self.lo.size

    def objective(self, z):
        return float(self._f(z))

    def gradient(self, z):
        return np.asarray(self._g(z), dtype=float)

    def constraints(self, z):
        return np.atleast_1d(np.asarray(self._c(z), dtype=float))

    def jacobian(self, z):
        return sp.csr_matrix(np.atleast_2d(self._j(z)))

    def objective_hessian(self, z):
        if self._h is None:
            return sp.identity(self.size, format="csr")
        return sp.csr_matrix(self._h(z))


class _NumericalFailure(Exception):
    pass


class _Merit:
    """phi(z) = f(z) + lam.c(z) + mu/2 |c(z)|^2 for fixed lam, mu."""

    def __init__(self, nlp, lam, mu):
        self.nlp, self.lam, self.mu = nlp, lam, mu

    def value(self, z):
        c = self.nlp.constraints(z)
        f = self.nlp.objective(z)
        val = f + self.lam @ c + 0.5 * self.mu * (c @ c)
        return val, c

    def derivatives(self, z, c):
        J = self.nlp.jacobian(z)
        g = self.nlp.gradient(z) + J.T @ (self.lam + self.mu * c)
        if hasattr(self.nlp, "objective_hessian"):
            Hf = self.nlp.objective_hessian(z)
        else:
            Hf = sp.identity(z.size, format="csr") * 1e-8
        B = sp.csc_matrix(Hf + self.mu * (J.T @ J))
        return g, B, J


def _projected_gradient(z, g, lo, hi):
    return np.clip(z - g, lo, hi) - z


def box_qp(B, g, lo, hi, fixed=None, max_iter=50, tol=1e-10):
    """Minimise g.d + d.B.d/2 over lo <= d <= hi (B sparse SPD).

    Projected Newton: clamp the variables sitting on a bound with the
    gradient pushing outward, take a Newton step on the rest, then a
    projected Armijo search on the (exact) quadratic model.
    """
    n = g.size
    fixed = np.zeros(n, bool) if fixed is None else fixed
    d = np.clip(np.zeros(n), lo, hi)
    B = sp.csr_matrix(B)

    def value(x):
        return g @ x + 0.5 * x @ (B @ x)

    val = value(d)
    old_clamped = None
    lu = None
    for _ in range(max_iter):
        grad = g + B @ d
        clamped = fixed | ((d <= lo) & (grad > 0)) | ((d >= hi) & (grad < 0))
        free = np.flatnonzero(~clamped)
        if free.size == 0:
            break
        same = old_clamped is not None and np.array_equal(clamped, old_clamped)
        if same and np.max(np.abs(grad[free])) < tol:
            break
        if not same:
            # Newton system on the free block only; reused while the clamped set holds
            Bf = B[free][:, free].tocsc()
            try:
                lu = spla.splu(Bf + sp.identity(free.size, format="csc") * 1e-12, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError:
                lu = None
        old_clamped = clamped
        search = np.zeros(n)
        search[free] = lu.solve(-grad[free]) if lu is not None else -grad[free]
        slope = search @ grad
        if not slope < -tol * tol:
            break
        alpha = 1.0
        while alpha > 1e-10:
            trial = np.clip(d + alpha * search, lo, hi)
            v = value(trial)
            if v - val <= 0.1 * alpha * slope or v < val and alpha < 1e-3:
                break
            alpha *= 0.5
        else:
            break
        improvement = val - v
        d, val = trial, v
        if improvement <= tol * (1.0 + abs(val)):
            break
    d[fixed] = 0.0
    return d


def _inner_solve(nlp, merit, z, lo, hi, tol, max_iter, history):
    """Projected Gauss-Newton on the bound-constrained merit. Returns (z, c, pg_norm, iters)."""
    fixed = lo == hi
    val, c = merit.value(z)
    if not np.isfinite(val):
        raise _NumericalFailure("non-finite merit at inner start")
    history.append(val)
    pg = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        g, B, _ = merit.derivatives(z, c)
        if not np.all(np.isfinite(g)):
            raise _NumericalFailure("non-finite gradient")
        pg = np.max(np.abs(_projected_gradient(z, g, lo, hi)), initial=0.0)
        if pg <= tol:
            return z, c, pg, it - 1
        d = box_qp(B, g, lo - z, hi - z, fixed)
        alpha = 1.0
        accepted = False
        for _ in range(40):
            z_new = np.clip(z + alpha * d, lo, hi)
            decrease = g @ (z_new - z)
            if decrease >= 0:
                break
            val_new, c_new = merit.value(z_new)
            if np.isfinite(val_new) and val_new <= val + 1e-4 * decrease:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no further decrease is representable; the current point is as good as it gets
            return z, c, pg, it
        log.debug("   inner %d alpha=%.3g val=%.6g pg=%.2e", it, alpha, val_new, pg)
        z, val, c = z_new, val_new, c_new
        history.append(val)
    g, _, _ = merit.derivatives(z, c)
    pg = np.max(np.abs(_projected_gradient(z, g, lo, hi)), initial=0.0)
    return z, c, pg, it


def solve_auglag(nlp, guess, config: SolverConfig | None = None, accept=None) -> SolveResult:
    """Augmented Lagrangian with a projected Gauss-Newton inner loop.

    ``accept(z)``, if given, is consulted whenever the tolerances are met. A
    rejection tightens the constraint tolerance tenfold (down to 1e-12) and
    the iteration continues with the current multipliers and penalty.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    lo, hi = np.asarray(nlp.lo, dtype=float), np.asarray(nlp.hi, dtype=float)
    if hasattr(guess, "states") and hasattr(nlp, "pack"):
        z = nlp.pack(guess)
    else:
        z = np.asarray(guess, dtype=float).copy()
    z = np.clip(z, lo, hi)
    mu = config.penalty_init
    c = nlp.constraints(z)
    lam = np.zeros_like(c)
    omega = 1.0 / mu
    eta = 1.0 / mu**0.1
    total_inner = 0
    history = []
    status = "max_iters"
    message = ""
    stalled = 0
    best_viol = np.inf
    pg = np.inf
    tol_con = config.tol_constraint
    outer = 0
    try:
        for outer in range(1, config.max_outer_iters + 1):
            merit = _Merit(nlp, lam, mu)
            hist = []
            inner_tol = max(omega, 0.1 * config.tol_stationarity)
            z, c, pg, nit = _inner_solve(nlp, merit, z, lo, hi, inner_tol, config.max_inner_iters, hist)
            history.append(hist)
            total_inner += nit
            viol = np.max(np.abs(c), initial=0.0)
            if not np.isfinite(viol):
                raise _NumericalFailure("non-finite constraint violation")
            log.debug("outer %d mu=%.1e viol=%.3e pg=%.3e inner=%d", outer, mu, viol, pg, nit)
            if viol <= max(eta, tol_con):
                lam = lam + mu * c
                # stationarity of the Lagrangian at the updated multipliers
                g_lag = nlp.gradient(z) + nlp.jacobian(z).T @ lam
                pg = np.max(np.abs(_projected_gradient(z, g_lag, lo, hi)), initial=0.0)
                if viol <= tol_con and pg <= config.tol_stationarity:
                    if accept is None or accept(z):
                        status = "converged"
                        break
                    if tol_con <= 1e-12:
                        message = "solution rejected by acceptance check at the tightest tolerance"
                        break
                    tol_con = max(0.1 * min(tol_con, viol), 1e-12)
                    log.debug("acceptance check failed; tightening tol_constraint to %.1e", tol_con)
                eta = max(eta / mu**0.9, 0.1 * tol_con)
                omega = max(omega / mu, 0.1 * config.tol_stationarity)
            else:
                # a violation that no longer responds to the penalty signals a locally infeasible problem
                if mu >= min(1e3, config.penalty_max) and viol > 100 * config.tol_constraint:
                    if viol > 0.5 * best_viol:
                        stalled += 1
                    else:
                        stalled = 0
                    if stalled >= (2 if mu >= config.penalty_max else 3):
                        status = "infeasible"
                        message = f"constraint violation stalled at {viol:.3e} (penalty {mu:.0e})"
                        break
                mu = min(mu * config.penalty_growth, config.penalty_max)
                eta = 1.0 / mu**0.1
                omega = 1.0 / mu
            best_viol = min(best_viol, viol)
    except _NumericalFailure as exc:
        status, message = "numerical_failure", str(exc)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        status, message = "numerical_failure", str(exc)

    if status != "numerical_failure" and not np.all(np.isfinite(z)):
        status, message = "numerical_failure", "non-finite iterate"
    c = nlp.constraints(z)
    viol = float(np.max(np.abs(c), initial=0.0))
    if status == "converged" and viol > config.tol_constraint:
        status = "max_iters"
    if status == "max_iters" and accept is not None and not message and viol <= config.tol_constraint:
        message = "acceptance check not met within the iteration budget"
    obj = float(nlp.objective(z))
    if not np.isfinite(obj) or not np.isfinite(viol):
        status = "numerical_failure"
    if status == "max_iters" and not message:
        message = "iteration budget exhausted"
    result = SolveResult(
        x=z,
        objective=obj,
        status=status,
        constraint_violation=viol,
        iterations=total_inner,
        wall_time=time.perf_counter() - t0,
        outer_iterations=outer,
        stationarity=float(pg),
        multipliers=lam,
        merit_history=history,
        message=message,
    )
    if hasattr(nlp, "unpack") and np.all(np.isfinite(z)):
        result.trajectory = nlp.unpack(z)
    return result


SOLVERS = {"auglag": solve_auglag}


def solve(nlp, guess, config: SolverConfig | None = None, method: str = "auglag") -> SolveResult:
    """Solve ``nlp`` from ``guess`` with the registered backend ``method``.

    For transcribed motion problems ``converged`` additionally requires an
    independent rollout of the controls to reproduce the states to within
    ``rollout_factor * tol_constraint``; the defect tolerance is tightened
    until it does.
    """
    config = config or SolverConfig()
    try:
        backend = SOLVERS[method]
    except KeyError:
        raise ValueError(f"unknown solver {method!r}; available: {sorted(SOLVERS)}") from None
    if not hasattr(nlp, "transmission"):
        return backend(nlp, guess, config)

    limit = config.rollout_factor * config.tol_constraint

    def rollout_ok(z):
        report = verify_by_rollout(nlp.model, nlp.transmission, nlp.spec, nlp.unpack(z))
        return report.max_state_deviation < limit

    result = backend(nlp, guess, config, accept=rollout_ok)
    if result.status == "converged":
        return result
    if result.trajectory is not None and result.constraint_violation <= config.tol_constraint:
        report = verify_by_rollout(nlp.model, nlp.transmission, nlp.spec, result)
        if report.max_state_deviation >= limit and not result.message.startswith("constraint"):
            result.message = f"rollout deviation {report.max_state_deviation:.2e} too large"
    return result


@dataclass
class RolloutReport:
    max_state_deviation: float
    max_bound_violation: float
    terminal_error: float
    states: np.ndarray

    def to_dict(self):
        return {
            "max_state_deviation": self.max_state_deviation,
            "max_bound_violation": self.max_bound_violation,
            "terminal_error": self.terminal_error,
        }


def verify_by_rollout(model, transmission, spec, result) -> RolloutReport:
    """Re-simulate the controls from x_0 and compare with the solver's states.

    Always returns a report; a rollout that blows up reports infinite errors.
    """
    from .ocp import Nlp, step

    traj = getattr(result, "trajectory", result)
    X, U = np.asarray(traj.states), np.asarray(traj.controls)
    h = spec.T / spec.N
    states = np.empty_like(X)
    states[0] = X[0]
    with np.errstate(all="ignore"):
        for k in range(U.shape[0]):
            try:
                states[k + 1] = step(model, transmission, spec.space, states[k], U[k], h, spec.integrator, check=False)
            except (FloatingPointError, np.linalg.LinAlgError):
                states[k + 1:] = np.inf
                break
    dev = np.max(np.abs(states - X))
    try:
        nlp = Nlp(model, transmission, spec)
        z = np.concatenate([states.ravel(), U.ravel()])
        bound = float(np.max(np.maximum(nlp.lo - z, 0) + np.maximum(z - nlp.hi, 0)))
    except ValueError:
        bound = float("inf")
    term = np.max(np.abs(states[-1] - np.asarray(spec.x_final)))
    dev = float(dev) if np.isfinite(dev) else float("inf")
    term = float(term) if np.isfinite(term) else float("inf")
    return RolloutReport(dev, bound if np.isfinite(bound) else float("inf"), term, states)
