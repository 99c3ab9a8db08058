"""Robot model, belt transmission and limit data.

The model file is a JSON document; the README documents every
field. Everything here is immutable after construction so a single
model can be shared between concurrent evaluators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

GEAR_LO = np.array([1.0, 1.0, 1.0, 1.0])
GEAR_HI = np.array([9.0, 9.0, 3.0, 3.0])
ORIGINAL_GEARS = np.array([6.0, 3.0, 1.0, 1.0])

DEFAULT_MODEL_PATH = Path(__file__).parent / "data" / "default_model.json"


class ModelError(ValueError):
    """Raised when a model file is malformed or violates an invariant.

    ``diagnostics`` holds every violation found, not just the first.
    """

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "\n".join(f"  {d}" for d in self.diagnostics)
        super().__init__(f"invalid model ({len(self.diagnostics)} problem(s)):\n{lines}")


class InvalidDesignError(ValueError):
    """Gear ratios outside the physically meaningful range."""


class SingularTransmissionError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Diagnostic:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


def rpy_to_matrix(rpy) -> np.ndarray:
    """Rotation matrix from fixed-axis roll/pitch/yaw (R = Rz @ Ry @ Rx)."""
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True, eq=False)
class LinkSpec:
    """One revolute link of the kinematic tree.

    ``joint_rotation``/``joint_translation`` place the joint frame in the
    parent joint frame at q = 0; ``com`` and ``inertia`` are expressed in the
    link's own (rotating) frame, inertia about the COM.
    """

    name: str
    parent: int
    joint_axis: np.ndarray
    joint_rotation: np.ndarray
    joint_translation: np.ndarray
    mass: float
    com: np.ndarray
    inertia: np.ndarray


@dataclass(frozen=True, eq=False)
class RobotModel:
    links: tuple
    gravity: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    qd_u_min: np.ndarray
    qd_u_max: np.ndarray
    tau_u_min: np.ndarray
    tau_u_max: np.ndarray
    payload_mass: float = 0.0
    ee_parent: int = -1
    ee_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gear_ratios: np.ndarray = field(default_factory=lambda: ORIGINAL_GEARS.copy())

    @property
    def n_joints(self) -> int:
        return len(self.links)

    @property
    def ee_link(self) -> int:
        return self.ee_parent if self.ee_parent >= 0 else self.n_joints - 1

    @property
    def moving_mass(self) -> float:
        return float(sum(link.mass for link in self.links))

    def with_payload(self, payload_mass: float) -> "RobotModel":
        if payload_mass < 0:
            raise ValueError("payload mass must be >= 0")
        return replace(self, payload_mass=float(payload_mass))

    def with_gravity(self, gravity) -> "RobotModel":
        return replace(self, gravity=np.asarray(gravity, dtype=float))


class TransmissionSpec:
    """Gear ratios of the belt couplings and the induced coupling matrix.

    ``G`` maps joint velocities to motor velocities (qd_u = G qd) and its
    transpose maps motor torques to joint torques (tau = G^T tau_u).
    """

    def __init__(self, gear_ratios, bounds_lo=GEAR_LO, bounds_hi=GEAR_HI):
        self.gear_ratios = np.array(gear_ratios, dtype=float)
        self.bounds_lo = np.array(bounds_lo, dtype=float)
        self.bounds_hi = np.array(bounds_hi, dtype=float)
        self.G = build_G(self.gear_ratios)
        self.G_inv = belt_inverse(self.gear_ratios)
        self.G_inv_T = self.G_inv.T
        for arr in (self.gear_ratios, self.G, self.G_inv):
            arr.setflags(write=False)

    def __repr__(self):
        return f"TransmissionSpec({self.gear_ratios.tolist()})"

    def violations(self) -> list:
        return design_violations(self.gear_ratios, self.bounds_lo, self.bounds_hi)

    @property
    def feasible(self) -> bool:
        return not self.violations()


def build_G(gear_ratios) -> np.ndarray:
    """Coupling matrix of the belt transmission, motor velocity = G @ joint velocity."""
    g = np.asarray(gear_ratios, dtype=float)
    if g.shape != (4,):
        raise InvalidDesignError(f"expected 4 gear ratios, got shape {g.shape}")
    if not np.all(np.isfinite(g)) or np.any(g <= 0):
        raise InvalidDesignError(f"gear ratios must be finite and > 0, got {g.tolist()}")
    g1, g2, g3, g4 = g
    return np.array(
        [
            [g1, 0.0, 0.0, 0.0],
            [g2, g2, 0.0, 0.0],
            [1.0, g3, g4, g4],
            [1.0, g3, g4, -g4],
        ]
    )


def belt_inverse(gear_ratios) -> np.ndarray:
    """Closed-form inverse of :func:`build_G`.

    Exact zeros in the differential row keep the collapsed velocity box of
    the last joint at exactly [0, 0] instead of a rounding-sized interval.
    """
    g1, g2, g3, g4 = np.asarray(gear_ratios, dtype=float)
    if min(g1, g2, g3, g4) <= 0:
        raise InvalidDesignError("gear ratios must be > 0")
    h = 0.5 / g4
    return np.array(
        [
            [1.0 / g1, 0.0, 0.0, 0.0],
            [-1.0 / g1, 1.0 / g2, 0.0, 0.0],
            [(g3 - 1.0) / (g1 * g4), -g3 / (g2 * g4), h, h],
            [0.0, 0.0, h, -h],
        ]
    )


def design_violations(gear_ratios, lo=GEAR_LO, hi=GEAR_HI) -> list:
    """Messages for every bound or ordering (g3 <= g2 < g1) violation."""
    g = np.asarray(gear_ratios, dtype=float)
    out = []
    if g.shape != (4,) or not np.all(np.isfinite(g)):
        return ["gear ratios must be 4 finite numbers"]
    for i in range(4):
        if g[i] < lo[i] or g[i] > hi[i]:
            out.append(f"g{i + 1}={g[i]:g} outside [{lo[i]:g}, {hi[i]:g}]")
    if not g[1] < g[0]:
        out.append(f"ordering: g2={g[1]:g} must be < g1={g[0]:g}")
    if not g[2] <= g[1]:
        out.append(f"ordering: g3={g[2]:g} must be <= g2={g[1]:g}")
    return out


def joint_limits_from_actuation(G, tau_u_min, tau_u_max, qd_u_min, qd_u_max, G_inv=None):
    """Joint-space torque and velocity boxes induced by motor limits.

    Motor bounds are pushed through the transmission elementwise,
    ``G^T tau_u`` for torques and ``G^-1 qd_u`` for velocities. With symmetric
    motor bounds the differential row of G makes the last joint's boxes
    collapse to [0, 0]; that is kept as is.

    Returns
    -------
    (tau_lo, tau_hi, qd_lo, qd_hi)
    """
    G = np.asarray(G, dtype=float)
    if G_inv is None:
        if np.linalg.matrix_rank(G) < G.shape[0]:
            raise SingularTransmissionError("transmission matrix is singular")
        G_inv = np.linalg.inv(G)
    tau_lo = _matvec(G.T, tau_u_min)
    tau_hi = _matvec(G.T, tau_u_max)
    qd_lo = _matvec(G_inv, qd_u_min)
    qd_hi = _matvec(G_inv, qd_u_max)
    return tau_lo, tau_hi, qd_lo, qd_hi


def _matvec(A, x):
    # rounded products then a plain sum: no FMA, so +a and -a cancel exactly
    return (A * np.asarray(x, dtype=float)[None, :]).sum(axis=1)


# --------------------------------------------------------------------------
# model files


def _vec(raw, path, size, diags):
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        diags.append(Diagnostic(path, "not numeric"))
        return np.zeros(size)
    if arr.shape != (size,):
        diags.append(Diagnostic(path, f"expected {size} numbers, got shape {arr.shape}"))
        return np.zeros(size)
    if not np.all(np.isfinite(arr)):
        diags.append(Diagnostic(path, "non-finite entry"))
    return arr


def _scalar(raw, path, diags, kind=float, default=0):
    try:
        if isinstance(raw, bool):
            raise TypeError
        return kind(raw)
    except (TypeError, ValueError):
        diags.append(Diagnostic(path, "not a number" if kind is float else "not an integer"))
        return kind(default)


def _section(doc, key, diags):
    raw = doc.get(key, {})
    if not isinstance(raw, dict):
        diags.append(Diagnostic(key, "must be an object"))
        return {}
    return raw


def _inertia(raw, path, diags):
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        diags.append(Diagnostic(path, "not numeric"))
        return np.eye(3)
    if arr.shape == (3,):
        return np.diag(arr)
    if arr.shape == (6,):
        ixx, iyy, izz, ixy, ixz, iyz = arr
        return np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
    if arr.shape == (3, 3):
        return arr
    diags.append(Diagnostic(path, "expected [ixx,iyy,izz], [ixx,iyy,izz,ixy,ixz,iyz] or 3x3"))
    return np.eye(3)


def model_from_dict(doc: dict) -> RobotModel:
    """Build a RobotModel from a parsed model document.

    Raises ModelError listing every problem found.
    """
    diags = []
    if not isinstance(doc, dict):
        raise ModelError([Diagnostic("$", "top level must be an object")])
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        diags.append(Diagnostic("schema_version", f"unsupported version {version!r}"))
    for key in ("links", "gravity", "limits"):
        if key not in doc:
            diags.append(Diagnostic(key, "missing"))
    if diags:
        raise ModelError(diags)

    links = []
    raw_links = doc["links"]
    if not isinstance(raw_links, list) or not raw_links:
        raise ModelError([Diagnostic("links", "must be a non-empty list")])
    for i, raw in enumerate(raw_links):
        p = f"links[{i}]"
        if not isinstance(raw, dict):
            diags.append(Diagnostic(p, "must be an object"))
            continue
        origin = _section(raw, "joint_origin", diags)
        rot = rpy_to_matrix(_vec(origin.get("rpy", [0, 0, 0]), f"{p}.joint_origin.rpy", 3, diags))
        links.append(
            LinkSpec(
                name=str(raw.get("name", f"link{i + 1}")),
                parent=_scalar(raw.get("parent", i - 1), f"{p}.parent", diags, int, -2),
                joint_axis=_vec(raw.get("joint_axis"), f"{p}.joint_axis", 3, diags),
                joint_rotation=rot,
                joint_translation=_vec(origin.get("xyz", [0, 0, 0]), f"{p}.joint_origin.xyz", 3, diags),
                mass=_scalar(raw.get("mass", float("nan")), f"{p}.mass", diags),
                com=_vec(raw.get("com", [0, 0, 0]), f"{p}.com", 3, diags),
                inertia=_inertia(raw.get("inertia"), f"{p}.inertia", diags),
            )
        )
    if diags:
        raise ModelError(diags)
    n = len(links)
    limits = _section(doc, "limits", diags)
    lim = {}
    for key in ("q_min", "q_max", "qd_u_min", "qd_u_max", "tau_u_min", "tau_u_max"):
        if key not in limits:
            diags.append(Diagnostic(f"limits.{key}", "missing"))
            lim[key] = np.zeros(n)
        else:
            lim[key] = _vec(limits[key], f"limits.{key}", n, diags)

    ee = _section(doc, "end_effector", diags)
    trans = _section(doc, "transmission", diags)
    gears = _vec(trans.get("gear_ratios", ORIGINAL_GEARS), "transmission.gear_ratios", 4, diags)
    model = RobotModel(
        links=tuple(links),
        gravity=_vec(doc["gravity"], "gravity", 3, diags),
        q_min=lim["q_min"],
        q_max=lim["q_max"],
        qd_u_min=lim["qd_u_min"],
        qd_u_max=lim["qd_u_max"],
        tau_u_min=lim["tau_u_min"],
        tau_u_max=lim["tau_u_max"],
        payload_mass=_scalar(doc.get("payload_mass", 0.0), "payload_mass", diags),
        ee_parent=_scalar(ee.get("parent", n - 1), "end_effector.parent", diags, int, n - 1),
        ee_translation=_vec(ee.get("xyz", [0, 0, 0]), "end_effector.xyz", 3, diags),
        gear_ratios=gears,
    )
    if diags:
        raise ModelError(diags)
    problems = validate_model(model)
    if problems:
        raise ModelError(problems)
    return model


def validate_model(model: RobotModel) -> list:
    """Check every model invariant; returns a (possibly empty) list of Diagnostics."""
    out = []
    n = model.n_joints
    for i, link in enumerate(model.links):
        p = f"links[{i}]({link.name})"
        if not (-1 <= link.parent < i):
            out.append(Diagnostic(f"{p}.parent", f"parent {link.parent} must precede link {i}"))
        norm = np.linalg.norm(link.joint_axis)
        if abs(norm - 1.0) > 1e-12:
            out.append(Diagnostic(f"{p}.joint_axis", f"norm {norm:.6g} is not 1"))
        if not np.isfinite(link.mass) or link.mass <= 0:
            out.append(Diagnostic(f"{p}.mass", f"mass {link.mass:g} must be > 0"))
        inertia = link.inertia
        if np.max(np.abs(inertia - inertia.T)) > 1e-12:
            out.append(Diagnostic(f"{p}.inertia", "not symmetric"))
        elif np.min(np.linalg.eigvalsh(inertia)) < -1e-12:
            out.append(Diagnostic(f"{p}.inertia", "not positive semidefinite"))
    pairs = (("q_min", "q_max"), ("qd_u_min", "qd_u_max"), ("tau_u_min", "tau_u_max"))
    for lo_name, hi_name in pairs:
        lo, hi = getattr(model, lo_name), getattr(model, hi_name)
        for j in np.flatnonzero(~(lo < hi)):
            out.append(Diagnostic(f"limits.{lo_name}[{j}]", f"{lo[j]:g} must be < {hi_name}[{j}]={hi[j]:g}"))
    if model.payload_mass < 0:
        out.append(Diagnostic("payload_mass", "must be >= 0"))
    if not (-1 <= model.ee_parent < n):
        out.append(Diagnostic("end_effector.parent", "unknown link"))
    if n == 4:
        for msg in design_violations(model.gear_ratios):
            out.append(Diagnostic("transmission.gear_ratios", msg))
    return out


def load_model(path=None) -> RobotModel:
    path = Path(path) if path is not None else DEFAULT_MODEL_PATH
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError([Diagnostic(str(path), f"parse error: {exc}")]) from exc
    return model_from_dict(doc)


def load_document(path=None) -> dict:
    path = Path(path) if path is not None else DEFAULT_MODEL_PATH
    return json.loads(path.read_text())
