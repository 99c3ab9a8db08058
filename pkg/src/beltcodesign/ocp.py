"""Direct transcription of the pick-and-place optimal control problem.

Decision vector layout: ``z = [x_0 .. x_N, u_0 .. u_{N-1}]`` with
``x = [q, qd]``. Controls are joint torques in joint space and motor torques
in actuation space. Equality constraints are ordered
``[x_0 - x_init, x_1 - f(x_0, u_0), ..., x_N - f(x_{N-1}, u_{N-1}), x_N - x_final]``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import dynamics
from .model import RobotModel, TransmissionSpec, joint_limits_from_actuation

SPACES = ("joint", "actuation")
INTEGRATORS = ("semi_implicit_euler", "rk4")

# pick (arm reaching down) and place (arm folded back up) postures of the reference task
DEFAULT_Q_INIT = (0.3, 0.5, -1.2, 0.0)
DEFAULT_Q_FINAL = (-0.9, 2.0, -1.5, 0.0)


class InfeasibleProblemError(ValueError):
    """Boundary states or limit boxes make the transcription infeasible before solving."""


@dataclass(frozen=True)
class OcProblemSpec:
    space: str = "actuation"
    T: float = 0.7
    N: int = 50
    Q: tuple = (1e-2,) * 8
    R: tuple = (1e-3,) * 4
    rho: tuple = (1e3, 1e3)
    cart_axes: tuple = (0, 2)
    cart_lo: tuple = (0.15, -0.65)
    cart_hi: tuple = (0.85, 0.35)
    x_init: tuple = DEFAULT_Q_INIT + (0.0,) * 4
    x_final: tuple = DEFAULT_Q_FINAL + (0.0,) * 4
    integrator: str = "semi_implicit_euler"
    cart_all_nodes: bool = True

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}, got {self.space!r}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}")
        if not self.T > 0:
            raise ValueError("T must be > 0")
        if self.N < 2:
            raise ValueError("N must be >= 2")
        for name in ("Q", "R", "rho"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"{name} weights must be >= 0")
        if not (len(self.cart_axes) == len(self.rho) == len(self.cart_lo) == len(self.cart_hi)):
            raise ValueError("cart_axes, rho, cart_lo and cart_hi must have equal length")
        if len(self.x_init) != len(self.Q) or len(self.x_final) != len(self.Q):
            raise ValueError("x_init/x_final must match the state dimension of Q")

    @property
    def h(self) -> float:
        return self.T / self.N

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "OcProblemSpec":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
        return cls(**kw)

    def with_space(self, space: str) -> "OcProblemSpec":
        return replace(self, space=space)


def csv_header(n: int, m: int) -> list:
    return ["t"] + [f"q{i + 1}" for i in range(n)] + [f"qd{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]


@dataclass
class Trajectory:
    space: str
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    spec: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.controls.shape[0]

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "times": self.times.tolist(),
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "spec": self.spec,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Trajectory":
        try:
            traj = cls(
                space=doc["space"],
                times=np.asarray(doc["times"], dtype=float),
                states=np.asarray(doc["states"], dtype=float),
                controls=np.asarray(doc["controls"], dtype=float),
                spec=doc.get("spec", {}),
                meta=doc.get("meta", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"not a trajectory document: {exc}") from exc
        traj.check()
        return traj

    def check(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown space {self.space!r}")
        N = self.controls.shape[0]
        if self.states.ndim != 2 or self.controls.ndim != 2:
            raise ValueError("states and controls must be 2-D")
        if self.times.shape != (N + 1,) or self.states.shape[0] != N + 1:
            raise ValueError("times/states must have N+1 rows for N controls")
        if self.states.shape[1] % 2:
            raise ValueError("states must hold positions and velocities")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.controls)) and np.all(np.isfinite(self.times))):
            raise ValueError("trajectory contains non-finite values")
        if N and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        n = self.states.shape[1] // 2
        m = self.controls.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(csv_header(n, m))
        for k in range(self.states.shape[0]):
            u = [repr(float(v)) for v in self.controls[k]] if k < self.N else [""] * m
            w.writerow([repr(float(self.times[k]))] + [repr(float(v)) for v in self.states[k]] + u)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, space: str) -> "Trajectory":
        rows = list(csv.reader(io.StringIO(text)))
        if len(rows) < 3:
            raise ValueError("trajectory CSV needs a header and at least two rows")
        header, body = rows[0], rows[1:]
        n = sum(1 for h in header if h.startswith("q") and not h.startswith("qd"))
        m = sum(1 for h in header if h.startswith("u"))
        if header != csv_header(n, m) or any(len(r) != len(header) for r in body):
            raise ValueError("trajectory CSV columns must be t, q1..qn, qd1..qn, u1..um")
        try:
            data = [[float(v) if v != "" else np.nan for v in r] for r in body]
        except ValueError as exc:
            raise ValueError(f"non-numeric trajectory CSV entry: {exc}") from exc
        arr = np.array(data)
        if np.isnan(arr[:-1]).any() or np.isnan(arr[-1, : 1 + 2 * n]).any():
            raise ValueError("only the controls of the last row may be blank")
        traj = cls(space, arr[:, 0], arr[:, 1 : 1 + 2 * n], arr[:-1, 1 + 2 * n : 1 + 2 * n + m])
        traj.check()
        return traj


# --------------------------------------------------------------------------
# dynamics and cost


def accelerations(model: RobotModel, transmission: TransmissionSpec, space: str, x, u, check=True):
    n = model.n_joints
    q, qd = x[..., :n], x[..., n:]
    if space == "joint":
        return dynamics.forward_dynamics_joint(model, q, qd, u, check=check)
    return dynamics.forward_dynamics_actuation(model, transmission.G, q, qd, u, G_inv=transmission.G_inv, check=check)


def step(model, transmission, space, x, u, h, integrator="semi_implicit_euler", check=True):
    """One integration step x_{k+1} = f(x_k, u_k) with zero-order-hold control.

    Raises FloatingPointError instead of returning non-finite states.
    """
    if not h > 0:
        raise ValueError("step size must be > 0")
    x = np.asarray(x)
    n = model.n_joints
    if integrator == "semi_implicit_euler":
        qdd = accelerations(model, transmission, space, x, u, check)
        qd_next = x[..., n:] + h * qdd
        q_next = x[..., :n] + h * qd_next
        out = np.concatenate([q_next, qd_next], axis=-1)
    elif integrator == "rk4":

        def rhs(s):
            return np.concatenate([s[..., n:], accelerations(model, transmission, space, s, u, check)], axis=-1)

        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        out = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    else:
        raise ValueError(f"unknown integrator {integrator!r}")
    if check and not np.all(np.isfinite(out)):
        raise FloatingPointError("integration produced a non-finite state")
    return out


def cartesian_violation(spec: OcProblemSpec, ee):
    """Signed distance of the selected end-effector coordinates outside the box (0 inside)."""
    p = np.asarray(ee)[..., list(spec.cart_axes)]
    return p - np.clip(p, spec.cart_lo, spec.cart_hi)


def cost(spec: OcProblemSpec, trajectory: Trajectory, model: RobotModel) -> float:
    """Quadratic state/control regularisation plus the Cartesian box penalty."""
    X, U = trajectory.states, trajectory.controls
    N = spec.N
    if X.shape != (N + 1, len(spec.Q)) or U.shape != (N, len(spec.R)):
        raise ValueError(f"trajectory shape {X.shape}/{U.shape} does not match the problem")
    Q, R, rho = map(np.asarray, (spec.Q, spec.R, spec.rho))
    total = np.sum(X[:N] ** 2 * Q) + np.sum(U**2 * R)
    nodes = X if spec.cart_all_nodes else X[:N]
    c = cartesian_violation(spec, dynamics.fk(model, nodes[:, : model.n_joints]))
    return float(total + np.sum(c**2 * rho))


# --------------------------------------------------------------------------
# NLP


class Nlp:
    """Transcribed NLP: objective, equality constraints and variable bounds.

    Instances carry no mutable state besides a one-entry evaluation cache, so
    separate instances can be solved concurrently.
    """

    def __init__(self, model: RobotModel, transmission: TransmissionSpec, spec: OcProblemSpec):
        self.model = model
        self.transmission = transmission
        self.spec = spec
        self.n = n = model.n_joints
        self.nx = 2 * n
        self.nu = len(spec.R)
        self.N = N = spec.N
        self.h = spec.h
        self.n_states = (N + 1) * self.nx
        self.size = self.n_states + N * self.nu
        self.n_eq = (N + 2) * self.nx
        self.x_init = np.asarray(spec.x_init, dtype=float)
        self.x_final = np.asarray(spec.x_final, dtype=float)
        self.lo, self.hi, self.u_lo, self.u_hi = self._bounds()
        self._Q = np.tile(np.asarray(spec.Q, dtype=float), N)
        self._R = np.tile(np.asarray(spec.R, dtype=float), N)
        self._rho = np.asarray(spec.rho, dtype=float)
        self._jac_pattern()
        self._cache_key = None
        self._cache = None

    # layout ---------------------------------------------------------------
    def split(self, z):
        X = z[: self.n_states].reshape(self.N + 1, self.nx)
        U = z[self.n_states :].reshape(self.N, self.nu)
        return X, U

    def pack(self, trajectory: Trajectory) -> np.ndarray:
        return np.concatenate([trajectory.states.ravel(), trajectory.controls.ravel()])

    def unpack(self, z) -> Trajectory:
        X, U = self.split(np.asarray(z, dtype=float))
        times = np.arange(self.N + 1) * self.h
        return Trajectory(self.spec.space, times, X.copy(), U.copy(), self.spec.to_dict())

    def _bounds(self):
        m, t, spec = self.model, self.transmission, self.spec
        tau_lo, tau_hi, qd_lo, qd_hi = joint_limits_from_actuation(t.G, m.tau_u_min, m.tau_u_max, m.qd_u_min, m.qd_u_max, t.G_inv)
        if np.any(qd_lo > qd_hi):
            raise InfeasibleProblemError(f"velocity box inverted for this design: {qd_lo} > {qd_hi}")
        if spec.space == "joint":
            u_lo, u_hi = tau_lo, tau_hi
        else:
            u_lo, u_hi = np.array(m.tau_u_min, dtype=float), np.array(m.tau_u_max, dtype=float)
        x_lo = np.concatenate([m.q_min, qd_lo])
        x_hi = np.concatenate([m.q_max, qd_hi])
        for name, x in (("x_init", self.x_init), ("x_final", self.x_final)):
            bad = np.flatnonzero((x < x_lo) | (x > x_hi))
            if bad.size:
                raise InfeasibleProblemError(f"{name} violates state bounds at components {bad.tolist()}")
        lo = np.concatenate([np.tile(x_lo, self.N + 1), np.tile(u_lo, self.N)])
        hi = np.concatenate([np.tile(x_hi, self.N + 1), np.tile(u_hi, self.N)])
        return lo, hi, u_lo, u_hi

    def _jac_pattern(self):
        nx, nu, N = self.nx, self.nu, self.N
        rows, cols = [], []
        # x_0 - x_init
        rows.append(np.arange(nx))
        cols.append(np.arange(nx))
        for k in range(N):
            r0 = nx * (k + 1)
            r = r0 + np.arange(nx)
            # +I on x_{k+1}
            rows.append(r)
            cols.append(nx * (k + 1) + np.arange(nx))
            # -df/dx on x_k and -df/du on u_k, row-major blocks
            rows.append(np.repeat(r, nx))
            cols.append(np.tile(nx * k + np.arange(nx), nx))
            rows.append(np.repeat(r, nu))
            cols.append(np.tile(self.n_states + nu * k + np.arange(nu), nx))
        rows.append(nx * (N + 1) + np.arange(nx))
        cols.append(nx * N + np.arange(nx))
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)

    # evaluation -----------------------------------------------------------
    def _dynamics(self, z):
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        X, U = self.split(z)
        f = step(self.model, self.transmission, self.spec.space, X[:-1], U, self.h, self.spec.integrator, check=False)
        self._cache_key, self._cache = key, f
        return f

    def constraints(self, z) -> np.ndarray:
        X, _ = self.split(z)
        f = self._dynamics(z)
        return np.concatenate([X[0] - self.x_init, (X[1:] - f).ravel(), X[-1] - self.x_final])

    def step_jacobians(self, z, eps=1e-30):
        """Exact df/dx (N, nx, nx) and df/du (N, nx, nu) by complex-step differentiation."""
        X, U = self.split(z)
        N, nx, nu = self.N, self.nx, self.nu
        d = nx + nu
        pert = 1j * eps * np.eye(d)
        xs = (X[:-1, None, :] + pert[None, :, :nx]).reshape(N * d, nx)
        us = (U[:, None, :] + pert[None, :, nx:]).reshape(N * d, nu)
        f = step(self.model, self.transmission, self.spec.space, xs, us, self.h, self.spec.integrator, check=False)
        D = (f.imag / eps).reshape(N, d, nx)
        return np.swapaxes(D[:, :nx], 1, 2), np.swapaxes(D[:, nx:], 1, 2)

    def jacobian(self, z) -> sp.csr_matrix:
        fx, fu = self.step_jacobians(z)
        nx, N = self.nx, self.N
        data = [np.ones(nx)]
        for k in range(N):
            data.append(np.ones(nx))
            data.append(-fx[k].ravel())
            data.append(-fu[k].ravel())
        data.append(np.ones(nx))
        return sp.csr_matrix((np.concatenate(data), (self._rows, self._cols)), shape=(self.n_eq, self.size))

    def _cart(self, X):
        nodes = X if self.spec.cart_all_nodes else X[: self.N]
        q = nodes[:, : self.n]
        return q, cartesian_violation(self.spec, dynamics.fk(self.model, q))

    def objective(self, z) -> float:
        X, U = self.split(z)
        _, c = self._cart(X)
        return float(
            np.sum(X[: self.N].ravel() ** 2 * self._Q) + np.sum(U.ravel() ** 2 * self._R) + np.sum(c**2 * self._rho)
        )

    def gradient(self, z) -> np.ndarray:
        X, U = self.split(z)
        g = np.zeros(self.size)
        g[: self.N * self.nx] = 2.0 * self._Q * X[: self.N].ravel()
        g[self.n_states :] = 2.0 * self._R * U.ravel()
        q, c = self._cart(X)
        if np.any(c):
            Jc = self._cart_jac(q)
            gq = 2.0 * np.einsum("ka,kaj->kj", c * self._rho, Jc)
            for k in range(q.shape[0]):
                g[k * self.nx : k * self.nx + self.n] += gq[k]
        return g

    def _cart_jac(self, q):
        return dynamics.ee_jacobian(self.model, q)[:, list(self.spec.cart_axes), :]

    def objective_hessian(self, z) -> sp.csr_matrix:
        """Gauss-Newton Hessian of the objective (exact for the quadratic terms)."""
        X, _ = self.split(z)
        diag = np.zeros(self.size)
        diag[: self.N * self.nx] = 2.0 * self._Q
        diag[self.n_states :] = 2.0 * self._R
        Hm = sp.diags(diag)
        q, c = self._cart(X)
        active = c != 0
        if np.any(active):
            Jc = self._cart_jac(q) * active[:, :, None]
            blocks = 2.0 * np.einsum("kai,ka,kaj->kij", Jc, self._rho * np.ones_like(c), Jc)
            rows, cols, vals = [], [], []
            n = self.n
            for k in np.flatnonzero(active.any(axis=1)):
                idx = k * self.nx + np.arange(n)
                rows.append(np.repeat(idx, n))
                cols.append(np.tile(idx, n))
                vals.append(blocks[k].ravel())
            Hm = Hm + sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.size, self.size))
        return sp.csr_matrix(Hm)

    def cost_of(self, trajectory: Trajectory) -> float:
        return cost(self.spec, trajectory, self.model)


def build_nlp(model: RobotModel, transmission: TransmissionSpec, spec: OcProblemSpec) -> Nlp:
    return Nlp(model, transmission, spec)


def initial_guess(model: RobotModel, transmission: TransmissionSpec, spec: OcProblemSpec, nlp: Nlp | None = None) -> Trajectory:
    """Straight-line state interpolation with gravity-compensating controls, clipped to bounds."""
    nlp = nlp or Nlp(model, transmission, spec)
    N, n = spec.N, model.n_joints
    s = np.linspace(0.0, 1.0, N + 1)[:, None]
    X = nlp.x_init + s * (nlp.x_final - nlp.x_init)
    x_lo, x_hi = nlp.lo[: nlp.nx], nlp.hi[: nlp.nx]
    X = np.clip(X, x_lo, x_hi)
    tau = dynamics.rnea(model, X[:N, :n], np.zeros((N, n)), np.zeros((N, n)))
    U = tau if spec.space == "joint" else tau @ transmission.G_inv
    U = np.clip(U, nlp.u_lo, nlp.u_hi)
    return Trajectory(spec.space, np.arange(N + 1) * spec.h, X, U, spec.to_dict())
