"""Blend-skinning kinematics over Gaussian-shaped bones.

Labels are 1-based (1..B); 0 is reserved for "unassigned" throughout the
package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .transforms import RigidTransform, blend_dual_quat, is_rotation


class InvalidBoneError(ValueError):
    pass


# bone counts used for the reference categories
DEFAULT_BONE_COUNTS = {"human": 11, "quadruped": 13, "laptop": 2}


@dataclass
class Bone:
    center: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scales: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=float).reshape(3, 3)
        self.scales = np.asarray(self.scales, dtype=float).reshape(3)

    def validate(self):
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise InvalidBoneError(f"bone scales must be positive, got {self.scales}")
        if not is_rotation(self.orientation):
            raise InvalidBoneError("bone orientation is not a proper rotation")

    def posed(self, joint: RigidTransform) -> "Bone":
        return Bone(joint.apply(self.center), joint.rotation @ self.orientation,
                    self.scales.copy())


@dataclass
class BoneFrame:
    joints: list
    global_transform: RigidTransform = field(default_factory=RigidTransform.identity)

    @property
    def n_bones(self) -> int:
        return len(self.joints)

    @classmethod
    def identity(cls, n_bones: int) -> "BoneFrame":
        return cls([RigidTransform.identity() for _ in range(n_bones)])


@dataclass
class BoneSequence:
    canonical_bones: list
    frames: list
    frame_dt: float = 1.0 / 24

    def __post_init__(self):
        self.validate()

    @property
    def n_bones(self) -> int:
        return len(self.canonical_bones)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def validate(self):
        if len(self.frames) < 2:
            raise ValueError("a bone sequence needs at least two frames")
        if not self.frame_dt > 0:
            raise ValueError("frame_dt must be positive")
        for b in self.canonical_bones:
            b.validate()
        for t, fr in enumerate(self.frames):
            if fr.n_bones != self.n_bones:
                raise ValueError(f"frame {t} has {fr.n_bones} joints, expected {self.n_bones}")

    def bone_centers(self, t: int) -> np.ndarray:
        """Body-frame bone centres at frame t (global transform excluded)."""
        fr = self.frames[t]
        return np.array([j.apply(b.center) for b, j in zip(self.canonical_bones, fr.joints)])


def _zero_logits(x: np.ndarray, n_bones: int) -> np.ndarray:
    return np.zeros(x.shape[:-1] + (n_bones,))


@dataclass
class SkinningModel:
    """Canonical bones plus an optional per-point logit correction.

    ``delta_logits`` maps an (..., 3) array to (..., B) extra logits; the
    default is the zero function.
    """

    bones: list
    delta_logits: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not self.bones:
            raise InvalidBoneError("skinning model needs at least one bone")
        for b in self.bones:
            b.validate()

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    def correction(self, x: np.ndarray) -> np.ndarray:
        if self.delta_logits is None:
            return _zero_logits(x, self.n_bones)
        return np.asarray(self.delta_logits(x), dtype=float)


def mahalanobis_distances(x, bones: Sequence[Bone]) -> np.ndarray:
    """Squared Mahalanobis distance from x (3,) or (N, 3) to every bone.

    Returns (B,) or (N, B).
    """
    if not bones:
        raise InvalidBoneError("no bones given")
    x = np.asarray(x, dtype=float)
    out = []
    for b in bones:
        b.validate()
        local = (x - b.center) @ b.orientation / b.scales
        out.append(np.sum(local * local, axis=-1))
    return np.stack(out, axis=-1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def skinning_weights(x, model: SkinningModel, pose: Optional[BoneFrame] = None) -> np.ndarray:
    """Softmax of negated bone distances plus the model's logit correction."""
    x = np.asarray(x, dtype=float)
    bones = model.bones
    if pose is not None:
        bones = [b.posed(j) for b, j in zip(bones, pose.joints)]
    logits = -mahalanobis_distances(x, bones) + model.correction(x)
    return _softmax(logits)


def blend_transforms(weights, frame: BoneFrame) -> RigidTransform:
    w = np.asarray(weights, dtype=float)
    if w.shape != (frame.n_bones,):
        raise ValueError(f"expected {frame.n_bones} weights, got shape {w.shape}")
    return blend_dual_quat(w, frame.joints)


def forward_warp(x_canonical, model: SkinningModel, frame: BoneFrame) -> np.ndarray:
    """Canonical point -> posed world point: global(blend(joints)(x))."""
    x = np.asarray(x_canonical, dtype=float)
    if x.ndim == 2:
        return np.array([forward_warp(p, model, frame) for p in x])
    w = skinning_weights(x, model)
    J = blend_transforms(w, frame)
    return frame.global_transform.apply(J.apply(x))


def backward_warp(x_world, model: SkinningModel, frame: BoneFrame) -> np.ndarray:
    """World point -> canonical point.

    Weights are evaluated in the body frame against the posed bones; the
    blended transform is then inverted.
    """
    x = np.asarray(x_world, dtype=float)
    if x.ndim == 2:
        return np.array([backward_warp(p, model, frame) for p in x])
    body = frame.global_transform.inverse().apply(x)
    w = skinning_weights(body, model, pose=frame)
    J = blend_transforms(w, frame)
    return J.inverse().apply(body)


def part_labels(points, model: SkinningModel) -> np.ndarray:
    """1-based argmax of the skinning weights (first maximum wins ties)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    W = skinning_weights(pts, model)
    return np.argmax(W, axis=1).astype(np.int64) + 1


def bone_deltas(seq: BoneSequence, t: int) -> np.ndarray:
    """Relative bone-centre motion between frames t and t+1, shape (B, 3)."""
    if not 0 <= t < seq.n_frames - 1:
        raise IndexError(f"frame index {t} outside [0, {seq.n_frames - 2}]")
    return seq.bone_centers(t + 1) - seq.bone_centers(t)
