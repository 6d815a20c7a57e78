"""Rigid transforms, quaternions and dual-quaternion blending."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation


ORTHO_TOL = 1e-9


def quat_to_matrix(q_wxyz) -> np.ndarray:
    q = np.asarray(q_wxyz, dtype=float)
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.array([w, x, y, z])
    return -q if q[0] < 0 else q


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product of (..., 4) arrays in (w, x, y, z) order."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def is_rotation(R, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.linalg.norm(R.T @ R - np.eye(3)) <= tol
            and abs(np.linalg.det(R) - 1.0) <= 1e-6)


def axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * angle).as_matrix()


@dataclass
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not is_rotation(self.rotation):
            raise ValueError("rotation is not orthonormal with det +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def to_dual_quat(self):
        r = matrix_to_quat(self.rotation)
        t = np.concatenate([[0.0], self.translation])
        return r, 0.5 * quat_mul(t, r)

    @classmethod
    def from_dual_quat(cls, real, dual) -> "RigidTransform":
        real = np.asarray(real, dtype=float)
        dual = np.asarray(dual, dtype=float)
        n = np.linalg.norm(real)
        real, dual = real / n, dual / n
        t = 2.0 * quat_mul(dual, quat_conj(real))[1:]
        R = quat_to_matrix(real)
        # re-orthonormalise to the tolerance enforced by __post_init__
        U, _, Vt = np.linalg.svd(R)
        return cls(U @ Vt, t)


def blend_dual_quat(weights, transforms) -> RigidTransform:
    """Dual-quaternion blend of rigid transforms.

    Quaternions are flipped onto the hemisphere of the largest-weight
    transform before the weighted sum so antipodal representations agree.
    """
    w = np.asarray(weights, dtype=float)
    if len(w) != len(transforms):
        raise ValueError("weights and transforms differ in length")
    if not np.any(w != 0.0):
        raise ValueError("cannot blend with all-zero weights")
    k = int(np.argmax(w))
    if w[k] == 1.0 and np.count_nonzero(w) == 1:
        src = transforms[k]
        return RigidTransform(src.rotation.copy(), src.translation.copy())
    dqs = [t.to_dual_quat() for t in transforms]
    pivot = dqs[k][0]
    real = np.zeros(4)
    dual = np.zeros(4)
    for wb, (r, d) in zip(w, dqs):
        s = -1.0 if np.dot(r, pivot) < 0 else 1.0
        real += wb * s * r
        dual += wb * s * d
    if np.linalg.norm(real) < 1e-12:
        raise ValueError("degenerate dual-quaternion blend")
    return RigidTransform.from_dual_quat(real, dual)
