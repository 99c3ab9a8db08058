"""Rigid-body dynamics of the kinematic tree, in joint and actuation space.

All spatial quantities are 6D Plücker vectors ``[angular; linear]`` expressed
in the world frame at the world origin, which keeps every algorithm free of
frame-to-frame transforms and makes batching over many configurations a
matter of a leading array axis.

Every function accepts either single vectors (shape ``(n,)``) or batches
(shape ``(B, n)``). The kernels never conjugate, take absolute values or
branch on data, so they are holomorphic in their inputs and can be fed
complex perturbations for complex-step differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RobotModel, SingularTransmissionError


def _skew(v):
    """[v]x for a batch of 3-vectors, shape (B, 3) -> (B, 3, 3)."""
    z = np.zeros_like(v[:, 0])
    return np.stack(
        [
            np.stack([z, -v[:, 2], v[:, 1]], axis=-1),
            np.stack([v[:, 2], z, -v[:, 0]], axis=-1),
            np.stack([-v[:, 1], v[:, 0], z], axis=-1),
        ],
        axis=1,
    )


def _axis_rotation(axis, angle):
    """Rodrigues rotation about a fixed unit axis for a batch of angles."""
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    s = np.sin(angle)[:, None, None]
    c = np.cos(angle)[:, None, None]
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def _cross(a, b):
    return np.stack(
        [
            a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
            a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
            a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0],
        ],
        axis=-1,
    )


def _crm(v, m):
    """Spatial motion cross product v x m."""
    w, vl = v[:, :3], v[:, 3:]
    return np.concatenate([_cross(w, m[:, :3]), _cross(w, m[:, 3:]) + _cross(vl, m[:, :3])], axis=1)


def _crf(v, f):
    """Spatial force cross product v x* f."""
    w, vl = v[:, :3], v[:, 3:]
    return np.concatenate([_cross(w, f[:, :3]) + _cross(vl, f[:, 3:]), _cross(w, f[:, 3:])], axis=1)


def _point_inertia(mass, rot_inertia, c):
    """6x6 spatial inertia at the world origin of a body with COM ``c``."""
    cx = _skew(c)
    B = c.shape[0]
    out = np.zeros((B, 6, 6), dtype=c.dtype)
    out[:, :3, :3] = rot_inertia + mass * cx @ np.swapaxes(cx, 1, 2)
    out[:, :3, 3:] = mass * cx
    out[:, 3:, :3] = mass * np.swapaxes(cx, 1, 2)
    out[:, 3:, 3:] = mass * np.eye(3)
    return out


@dataclass
class Kinematics:
    """World-frame kinematic quantities of every link for a batch of configurations."""

    R: list  # link orientations, (B, 3, 3)
    o: list  # joint origins, (B, 3)
    S: np.ndarray  # joint motion subspaces, (B, n, 6)
    inertia: list  # spatial inertias incl. payload, (B, 6, 6)
    ee: np.ndarray  # end-effector positions, (B, 3)


def kinematics(model: RobotModel, q, with_inertia=True) -> Kinematics:
    q = np.atleast_2d(q)
    B, n = q.shape
    R, o, S, inertia = [], [], [], []
    eye = np.broadcast_to(np.eye(3), (B, 3, 3))
    for i, link in enumerate(model.links):
        if link.parent < 0:
            Rp, op = eye, np.zeros((B, 3))
        else:
            Rp, op = R[link.parent], o[link.parent]
        base = Rp @ link.joint_rotation
        Ri = base @ _axis_rotation(link.joint_axis, q[:, i])
        oi = op + Rp @ link.joint_translation
        zi = base @ link.joint_axis
        R.append(Ri)
        o.append(oi)
        S.append(np.concatenate([zi, _cross(oi, zi)], axis=1))
        if with_inertia:
            c = oi + Ri @ link.com
            rot_inertia = Ri @ link.inertia @ np.swapaxes(Ri, 1, 2)
            inertia.append(_point_inertia(link.mass, rot_inertia, c))
    k = model.ee_link
    ee = o[k] + R[k] @ model.ee_translation
    if with_inertia and model.payload_mass > 0:
        inertia[k] = inertia[k] + _point_inertia(model.payload_mass, np.zeros((B, 3, 3)), ee)
    return Kinematics(R, o, np.stack(S, axis=1), inertia, ee)


def _batch(*arrays):
    out = [np.atleast_2d(a) for a in arrays]
    B = max(a.shape[0] for a in out)
    return [np.broadcast_to(a, (B, a.shape[1])) for a in out]


def rnea(model: RobotModel, q, qd, qdd, kin: Kinematics | None = None):
    """Inverse dynamics: joint torques realising ``qdd`` at state ``(q, qd)``.

    Gravity enters as a fictitious base acceleration, so ``rnea(q, qd, 0)``
    is the full bias vector C (Coriolis, centrifugal and gravity).
    """
    single = np.ndim(q) == 1 and np.ndim(qd) == 1 and np.ndim(qdd) == 1
    q, qd, qdd = _batch(q, qd, qdd)
    B, n = q.shape
    if kin is None:
        kin = kinematics(model, q)
    dtype = np.result_type(q, qd, qdd)
    a0 = np.zeros((B, 6), dtype=dtype)
    a0[:, 3:] = -model.gravity
    v = [None] * n
    a = [None] * n
    f = [None] * n
    for i, link in enumerate(model.links):
        Si = kin.S[:, i]
        vp = np.zeros((B, 6), dtype=dtype) if link.parent < 0 else v[link.parent]
        ap = a0 if link.parent < 0 else a[link.parent]
        vi = vp + Si * qd[:, i : i + 1]
        ai = ap + Si * qdd[:, i : i + 1] + _crm(vi, Si) * qd[:, i : i + 1]
        v[i] = vi
        a[i] = ai
        I = kin.inertia[i]
        f[i] = np.einsum("bij,bj->bi", I, ai) + _crf(vi, np.einsum("bij,bj->bi", I, vi))
    tau = np.empty((B, n), dtype=np.result_type(dtype, f[0]))
    for i in range(n - 1, -1, -1):
        tau[:, i] = np.einsum("bi,bi->b", kin.S[:, i], f[i])
        p = model.links[i].parent
        if p >= 0:
            f[p] = f[p] + f[i]
    return tau[0] if single else tau


def mass_matrix(model: RobotModel, q, kin: Kinematics | None = None):
    """Joint-space mass matrix H(q) by the composite-rigid-body algorithm."""
    single = np.ndim(q) == 1
    q = np.atleast_2d(q)
    if kin is None:
        kin = kinematics(model, q)
    B, n = q.shape
    Ic = list(kin.inertia)
    for i in range(n - 1, -1, -1):
        p = model.links[i].parent
        if p >= 0:
            Ic[p] = Ic[p] + Ic[i]
    H = np.zeros((B, n, n), dtype=Ic[0].dtype)
    for i in range(n):
        F = np.einsum("bij,bj->bi", Ic[i], kin.S[:, i])
        j = i
        while j >= 0:
            H[:, i, j] = np.einsum("bi,bi->b", kin.S[:, j], F)
            H[:, j, i] = H[:, i, j]
            j = model.links[j].parent
    return H[0] if single else H


def cholesky_solve(H, b):
    """Solve H x = b for a batch of small SPD matrices.

    Hand-rolled instead of np.linalg.cholesky so that complex-perturbed
    inputs are factored without conjugation.
    """
    B, n, _ = H.shape
    L = np.zeros_like(H, dtype=np.result_type(H, b))
    for j in range(n):
        d = H[:, j, j] - np.einsum("bk,bk->b", L[:, j, :j], L[:, j, :j])
        L[:, j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            L[:, i, j] = (H[:, i, j] - np.einsum("bk,bk->b", L[:, i, :j], L[:, j, :j])) / L[:, j, j]
    y = np.zeros((B, n), dtype=L.dtype)
    for i in range(n):
        y[:, i] = (b[:, i] - np.einsum("bk,bk->b", L[:, i, :i], y[:, :i])) / L[:, i, i]
    x = np.zeros_like(y)
    for i in range(n - 1, -1, -1):
        x[:, i] = (y[:, i] - np.einsum("bk,bk->b", L[:, i + 1 :, i], x[:, i + 1 :])) / L[:, i, i]
    return x


def bias(model: RobotModel, q, qd, kin: Kinematics | None = None):
    """C(q, qd): Coriolis-centrifugal plus gravity terms."""
    return rnea(model, q, qd, np.zeros(np.shape(q)), kin)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite input to forward dynamics")


def forward_dynamics_joint(model: RobotModel, q, qd, tau, check=True):
    """qdd = H^-1 (tau - C), via Cholesky."""
    if check:
        _check_finite(q, qd, tau)
    single = np.ndim(q) == 1 and np.ndim(qd) == 1 and np.ndim(tau) == 1
    q, qd, tau = _batch(q, qd, tau)
    kin = kinematics(model, q)
    H = mass_matrix(model, q, kin)
    C = rnea(model, q, qd, np.zeros(q.shape, dtype=q.dtype), kin)
    qdd = cholesky_solve(H, tau - C)
    return qdd[0] if single else qdd


@dataclass
class ActuationTerms:
    H_u: np.ndarray
    C_u: np.ndarray
    g_u: np.ndarray


def to_actuation(H, C, G, g_u=None) -> ActuationTerms:
    """Map joint-space EoM terms to actuation space.

    H_u = G^-T H G^-1 and C_u = G^-T (C - H G^-1 g_u). Works on single
    matrices or batches.
    """
    G = np.asarray(G)
    if np.linalg.matrix_rank(G) < G.shape[0]:
        raise SingularTransmissionError("transmission matrix is singular")
    G_inv = np.linalg.inv(G)
    H = np.asarray(H)
    C = np.asarray(C)
    if g_u is None:
        g_u = np.zeros(C.shape[-1])
    H_u = G_inv.T @ H @ G_inv
    H_u = 0.5 * (H_u + np.swapaxes(H_u, -1, -2))
    rhs = C - np.einsum("...ij,j->...i", H @ G_inv, g_u)
    C_u = np.einsum("ij,...j->...i", G_inv.T, rhs)
    return ActuationTerms(H_u, C_u, np.broadcast_to(g_u, C_u.shape).copy())


def forward_dynamics_actuation(model: RobotModel, G, q, qd, tau_u, G_inv=None, check=True):
    """Joint accelerations from motor torques, through the actuation-space EoM.

    Solves H_u qdd_u = tau_u - C_u and maps back with qdd = G^-1 (qdd_u - g_u);
    g_u vanishes because G is constant.
    """
    if check:
        _check_finite(q, qd, tau_u)
    single = np.ndim(q) == 1 and np.ndim(qd) == 1 and np.ndim(tau_u) == 1
    q, qd, tau_u = _batch(q, qd, tau_u)
    if G_inv is None:
        G = np.asarray(G)
        if np.linalg.matrix_rank(G) < G.shape[0]:
            raise SingularTransmissionError("transmission matrix is singular")
        G_inv = np.linalg.inv(G)
    kin = kinematics(model, q)
    H = mass_matrix(model, q, kin)
    C = rnea(model, q, qd, np.zeros(q.shape, dtype=q.dtype), kin)
    H_u = G_inv.T @ H @ G_inv
    C_u = np.einsum("ij,bj->bi", G_inv.T, C)
    qdd_u = cholesky_solve(H_u, tau_u - C_u)
    qdd = np.einsum("ij,bj->bi", G_inv, qdd_u)
    return qdd[0] if single else qdd


def fk(model: RobotModel, q):
    """End-effector position in the base frame."""
    single = np.ndim(q) == 1
    ee = kinematics(model, np.atleast_2d(q), with_inertia=False).ee
    return ee[0] if single else ee


def ee_jacobian(model: RobotModel, q):
    """Geometric (linear-velocity) Jacobian of the end-effector position, (3, n) or (B, 3, n)."""
    single = np.ndim(q) == 1
    q = np.atleast_2d(q)
    kin = kinematics(model, q, with_inertia=False)
    B, n = q.shape
    J = np.zeros((B, 3, n), dtype=q.dtype)
    support = set()
    j = model.ee_link
    while j >= 0:
        support.add(j)
        j = model.links[j].parent
    for j in support:
        z = kin.S[:, j, :3]
        J[:, :, j] = _cross(z, kin.ee - kin.o[j])
    return J[0] if single else J


def kinetic_energy(model: RobotModel, q, qd):
    H = mass_matrix(model, q)
    return 0.5 * np.einsum("...i,...ij,...j->...", qd, H, qd)


def potential_energy(model: RobotModel, q):
    """-sum m g.c over links and payload (zero at the base origin)."""
    single = np.ndim(q) == 1
    q = np.atleast_2d(q)
    kin = kinematics(model, q, with_inertia=False)
    V = np.zeros(q.shape[0], dtype=q.dtype)
    for i, link in enumerate(model.links):
        c = kin.o[i] + kin.R[i] @ link.com
        V = V - link.mass * c @ model.gravity
    if model.payload_mass > 0:
        V = V - model.payload_mass * kin.ee @ model.gravity
    return V[0] if single else V
