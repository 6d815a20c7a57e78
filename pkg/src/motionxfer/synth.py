"""Small deterministic scenes standing in for reconstructed references and generated targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import FeatureSet, synthetic_features
from .kinematics import Bone, BoneFrame, BoneSequence
from .mpm import ParticleState
from .transforms import RigidTransform, axis_angle

SCENE_KINDS = ("box", "two-box-hinge", "biped-stick")


@dataclass
class SynthScene:
    particles: ParticleState          # target
    sequence: BoneSequence            # reference motion
    ref_features: FeatureSet
    target_features: FeatureSet
    particle_parts: np.ndarray        # ground-truth target part per particle


def box_lattice(lo, hi, spacing: float) -> np.ndarray:
    """Cell-centred lattice filling the box [lo, hi]."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    counts = np.maximum(np.round((hi - lo) / spacing).astype(int), 1)
    axes = [lo[a] + (np.arange(counts[a]) + 0.5) * (hi[a] - lo[a]) / counts[a] for a in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    return g.reshape(-1, 3)


def cube_particles(n: int = 8, spacing: float = 0.025, center=(0.0, 0.0, 0.0),
                   density: float = 1000.0) -> ParticleState:
    """n^3 particles on a regular lattice."""
    c = np.asarray(center, dtype=float)
    ax = (np.arange(n) - 0.5 * (n - 1)) * spacing
    x = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3) + c
    return ParticleState.at_rest(x, density, spacing ** 3)


def _jitter(x, amount, rng):
    return x + amount * rng.uniform(-1.0, 1.0, x.shape) if amount > 0 else x


def _features(verts, labels, n_parts, dims, noise, seed):
    diff, geo = synthetic_features(labels, n_parts, dims, noise, seed)
    return FeatureSet(verts, diff, geo)


def _bone_for(points) -> Bone:
    lo, hi = points.min(axis=0), points.max(axis=0)
    return Bone(0.5 * (lo + hi), np.eye(3), np.maximum(0.5 * (hi - lo), 1e-3))


def box_scene(n: int = 8, spacing: float = 0.025, delta=(0.1, 0.0, 0.0), n_frames: int = 2,
              frame_dt: float = 0.1, target_scale: float = 1.0, density: float = 1000.0,
              dims=(16, 8), noise: float = 0.05, jitter: float = 0.0, seed: int = 0) -> SynthScene:
    """Single-part cube whose one bone translates by ``delta`` per frame."""
    rng = np.random.default_rng(seed)
    ref = cube_particles(n, spacing).x
    target = cube_particles(n, spacing * target_scale, density=density)
    target.x = _jitter(target.x, jitter * spacing, rng)
    bone = _bone_for(ref)
    d = np.asarray(delta, dtype=float)
    frames = [BoneFrame([RigidTransform(np.eye(3), k * d)]) for k in range(n_frames)]
    seq = BoneSequence([bone], frames, frame_dt)
    ones_r, ones_t = np.ones(len(ref), int), np.ones(target.n, int)
    return SynthScene(target, seq,
                      _features(ref, ones_r, 1, dims, noise, seed + 1),
                      _features(target.x, ones_t, 1, dims, noise, seed + 2), ones_t)


def hinge_geometry(scale: float = 1.0, length: float = 0.4, thickness: float = 0.05,
                   width: float = 0.15):
    """Base slab and upright lid meeting along a hinge axis parallel to z.

    Returns (base box, lid box, hinge point) where boxes are (lo, hi) pairs.
    """
    L, h, w = length * scale, thickness * scale, width * scale
    base = (np.array([0.0, 0.0, 0.0]), np.array([L, h, w]))
    lid = (np.array([0.0, h, 0.0]), np.array([h, h + L, w]))
    return base, lid, np.array([0.0, h, 0.5 * w])


def hinge_scene(opening_deg: float = 30.0, n_frames: int = 4, frame_dt: float = 1.0 / 24,
                target_scale: float = 1.5, spacing: float = 0.0167, ref_spacing: float = 0.02,
                density: float = 1000.0, dims=(16, 8), noise: float = 0.05,
                jitter: float = 0.0, seed: int = 0) -> SynthScene:
    """Two-bone hinge (laptop analogue): the lid opens by ``opening_deg`` over the sequence."""
    rng = np.random.default_rng(seed)

    def build(scale, sp):
        base, lid, hinge = hinge_geometry(scale)
        xb, xl = box_lattice(*base, sp), box_lattice(*lid, sp)
        return np.concatenate([xb, xl]), np.r_[np.ones(len(xb), int), np.full(len(xl), 2)], hinge

    ref, ref_parts, hinge = build(1.0, ref_spacing)
    tx, t_parts, _ = build(target_scale, spacing * target_scale)
    tx = _jitter(tx, jitter * spacing, rng)
    vol = (spacing * target_scale) ** 3
    target = ParticleState.at_rest(tx, density, vol)
    bones = [_bone_for(ref[ref_parts == 1]), _bone_for(ref[ref_parts == 2])]
    frames = []
    for k in range(n_frames):
        ang = np.deg2rad(opening_deg) * k / (n_frames - 1)
        R = axis_angle([0, 0, 1], ang)
        frames.append(BoneFrame([RigidTransform(), RigidTransform(R, hinge - R @ hinge)]))
    seq = BoneSequence(bones, frames, frame_dt)
    return SynthScene(target, seq,
                      _features(ref, ref_parts, 2, dims, noise, seed + 1),
                      _features(tx, t_parts, 2, dims, noise, seed + 2), t_parts)


# (name, parent, lo, hi, pivot); parent -1 is the root
_BIPED = [
    ("torso", -1, (-0.06, 0.40, -0.03), (0.06, 0.70, 0.03), (0.0, 0.40, 0.0)),
    ("head", 0, (-0.04, 0.70, -0.03), (0.04, 0.80, 0.03), (0.0, 0.70, 0.0)),
    ("pelvis", 0, (-0.06, 0.34, -0.03), (0.06, 0.40, 0.03), (0.0, 0.40, 0.0)),
    ("thigh_l", 2, (0.01, 0.18, -0.025), (0.05, 0.34, 0.025), (0.03, 0.34, 0.0)),
    ("shin_l", 3, (0.01, 0.0, -0.025), (0.05, 0.18, 0.025), (0.03, 0.18, 0.0)),
    ("thigh_r", 2, (-0.05, 0.18, -0.025), (-0.01, 0.34, 0.025), (-0.03, 0.34, 0.0)),
    ("shin_r", 5, (-0.05, 0.0, -0.025), (-0.01, 0.18, 0.025), (-0.03, 0.18, 0.0)),
    ("upper_arm_l", 0, (0.06, 0.52, -0.02), (0.09, 0.68, 0.02), (0.075, 0.68, 0.0)),
    ("forearm_l", 7, (0.06, 0.38, -0.02), (0.09, 0.52, 0.02), (0.075, 0.52, 0.0)),
    ("upper_arm_r", 0, (-0.09, 0.52, -0.02), (-0.06, 0.68, 0.02), (-0.075, 0.68, 0.0)),
    ("forearm_r", 9, (-0.09, 0.38, -0.02), (-0.06, 0.52, 0.02), (-0.075, 0.52, 0.0)),
]
# swing amplitude (radians, about the x axis) and phase per segment
_SWING = {"thigh_l": (0.4, 0.0), "thigh_r": (0.4, np.pi), "shin_l": (0.2, 0.5),
          "shin_r": (0.2, np.pi + 0.5), "upper_arm_l": (0.3, np.pi), "upper_arm_r": (0.3, 0.0),
          "forearm_l": (0.15, np.pi), "forearm_r": (0.15, 0.0)}


def biped_scene(n_frames: int = 5, frame_dt: float = 1.0 / 24, target_scale: float = 1.2,
                spacing: float = 0.02, density: float = 1000.0, dims=(16, 16),
                noise: float = 0.05, seed: int = 0) -> SynthScene:
    """Eleven-segment stick figure swinging its limbs as in a walk cycle."""
    parts_r, parts_t, ref_pts, tar_pts = [], [], [], []
    for b, (_, _, lo, hi, _) in enumerate(_BIPED, start=1):
        pr = box_lattice(lo, hi, spacing)
        pt = box_lattice(np.asarray(lo) * target_scale, np.asarray(hi) * target_scale,
                         spacing * target_scale)
        ref_pts.append(pr)
        tar_pts.append(pt)
        parts_r.append(np.full(len(pr), b))
        parts_t.append(np.full(len(pt), b))
    ref = np.concatenate(ref_pts)
    tx = np.concatenate(tar_pts)
    ref_parts, t_parts = np.concatenate(parts_r), np.concatenate(parts_t)
    target = ParticleState.at_rest(tx, density, (spacing * target_scale) ** 3)
    bones = [_bone_for(p) for p in ref_pts]
    frames = []
    for k in range(n_frames):
        phase = 2 * np.pi * k / max(n_frames - 1, 1)
        world = []
        for name, parent, _, _, pivot in _BIPED:
            amp, off = _SWING.get(name, (0.0, 0.0))
            R = axis_angle([1, 0, 0], amp * np.sin(phase + off)) if amp else np.eye(3)
            p = np.asarray(pivot)
            local = RigidTransform(R, p - R @ p)
            world.append(local if parent < 0 else world[parent].compose(local))
        frames.append(BoneFrame(world))
    seq = BoneSequence(bones, frames, frame_dt)
    B = len(_BIPED)
    return SynthScene(target, seq,
                      _features(ref, ref_parts, B, dims, noise, seed + 1),
                      _features(tx, t_parts, B, dims, noise, seed + 2), t_parts)


def synth_scene(kind: str, **params) -> SynthScene:
    if kind == "box":
        return box_scene(**params)
    if kind == "two-box-hinge":
        return hinge_scene(**params)
    if kind == "biped-stick":
        return biped_scene(**params)
    raise ValueError(f"unknown scene kind {kind!r}; choose from {', '.join(SCENE_KINDS)}")
