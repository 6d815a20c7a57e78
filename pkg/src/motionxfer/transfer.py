"""Phase-by-phase motion transfer through the differentiable simulator.

Each phase covers one pair of adjacent reference frames.  Part velocities
start from the bone displacement spread over the phase, a triplane field per
part adds a learned offset, and the offsets are fitted so the simulated part
centroids move like the (size-compensated) reference bones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import adjoint
from .correspondence import (
    FeatureSet,
    assign_particles,
    concat_features,
    match_parts,
    mean_part_features,
    remove_outliers,
)
from .kinematics import BoneSequence, SkinningModel, bone_deltas, part_labels
from .mpm import (
    MaterialParams,
    NumericalDivergenceError,
    ParticleState,
    SimConfig,
    SimGrid,
    control_points,
    share_velocities,
    simulate,
)
from .transforms import RigidTransform
from .triplane import TriplaneField

log = logging.getLogger(__name__)


@dataclass
class TransferSettings:
    iters: int = 200
    lr: float = 1e-2
    tv_weight: float = 1e-3
    share_velocity: bool = True
    control_resolution: int = 41
    plane_resolution: int = 32
    plane_channels: int = 16
    hidden: int = 64
    seed: int = 0
    scale_global_translation: bool = True
    rms_decay: float = 0.999
    rms_eps: float = 1e-8


@dataclass
class TransferScene:
    particles: ParticleState
    labels: np.ndarray
    reference: BoneSequence
    s_t: float
    s_o: float
    config: SimConfig
    settings: TransferSettings = field(default_factory=TransferSettings)
    fields: dict = field(default_factory=dict)
    reference_labels: Optional[np.ndarray] = None
    reference_centroids: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (self.s_t > 0 and self.s_o > 0):
            raise ValueError("coverage ratios must be positive")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.particles.n:
            raise ValueError("one part label per particle required")

    @property
    def n_parts(self) -> int:
        return self.reference.n_bones

    @property
    def scale(self) -> float:
        return self.s_t / self.s_o


@dataclass
class PhaseResult:
    t: int
    displacement: np.ndarray
    target: np.ndarray
    losses: list
    final: ParticleState
    best_iter: int = 0
    fields: dict = field(default_factory=dict)

    @property
    def best_loss(self) -> float:
        return float(self.losses[self.best_iter]) if self.losses else float("nan")

    @property
    def terminal_error(self) -> float:
        """Sum over parts of the Euclidean centroid-displacement error."""
        return float(np.sum(np.linalg.norm(self.displacement - self.target, axis=1)))


# -- elementary operations --------------------------------------------------

def init_velocity(bone_delta, N: int, dt: float) -> np.ndarray:
    if N < 1 or not dt > 0:
        raise ValueError("need N >= 1 and dt > 0")
    return np.asarray(bone_delta, dtype=float) / (N * dt)


def part_centroids(state: ParticleState, labels, n_parts: int) -> np.ndarray:
    lab = np.asarray(labels)
    out = np.zeros((n_parts, 3))
    for b in range(1, n_parts + 1):
        sel = lab == b
        if np.any(sel):
            m = state.m[sel]
            out[b - 1] = m @ state.x[sel] / m.sum()
    return out


def part_displacement(before: ParticleState, after: ParticleState, labels,
                      n_parts: int = None) -> np.ndarray:
    """Mass-weighted centroid motion per part, (B, 3)."""
    if before.n != after.n:
        raise ValueError("states have different particle counts")
    lab = np.asarray(labels)
    B = int(lab.max(initial=0)) if n_parts is None else n_parts
    empty = [b for b in range(1, B + 1) if not np.any(lab == b)]
    if empty:
        log.warning("parts without particles get zero displacement: %s", empty)
    return part_centroids(after, lab, B) - part_centroids(before, lab, B)


def displacement_loss(achieved, reference, s_t: float, s_o: float) -> float:
    if not (s_t > 0 and s_o > 0):
        raise ValueError("coverage ratios must be positive")
    return float(np.sum(np.abs(np.asarray(achieved) - (s_t / s_o) * np.asarray(reference))))


def coverage_ratio(positions) -> float:
    """Bounding-box diagonal of a point set."""
    x = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(x) < 2:
        raise ValueError("coverage ratio needs at least two points")
    d = float(np.linalg.norm(x.max(axis=0) - x.min(axis=0)))
    if d == 0:
        raise ValueError("degenerate point set with zero extent")
    return d


def part_coverage_ratio(positions, labels) -> float:
    """Mean bounding-box diagonal over the labelled parts."""
    x = np.asarray(positions, dtype=float).reshape(-1, 3)
    lab = np.asarray(labels)
    diags = [coverage_ratio(x[lab == b]) for b in np.unique(lab[lab > 0]) if np.sum(lab == b) >= 2]
    if not diags:
        raise ValueError("no part with at least two points")
    return float(np.mean(diags))


# -- optimisation ----------------------------------------------------------

class _RMSProp:
    """Per-parameter adaptive step without momentum."""

    def __init__(self, size: int, lr: float, decay: float, eps: float):
        self.sq = np.zeros(size)
        self.lr, self.decay, self.eps = lr, decay, eps
        self.k = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.k += 1
        self.sq = self.decay * self.sq + (1 - self.decay) * grad * grad
        sq_hat = self.sq / (1 - self.decay ** self.k)
        return params - self.lr * grad / (np.sqrt(sq_hat) + self.eps)


def _phase_start(state: ParticleState, scene: TransferScene) -> ParticleState:
    s = state.copy()
    s.v = np.zeros_like(s.v)
    s.C = np.zeros_like(s.C)
    if scene.settings.share_velocity:
        _, s.groups = control_points(s.x, scene.settings.control_resolution)
    else:
        s.groups = None
    return s


def _part_indices(labels, n_parts):
    return {b: np.flatnonzero(labels == b) for b in range(1, n_parts + 1) if np.any(labels == b)}


def make_fields(scene: TransferScene, state: ParticleState, seed_offset: int = 0) -> dict:
    """One zero-output triplane field per populated part, boxed to that part."""
    st = scene.settings
    fields = {}
    for b, idx in _part_indices(scene.labels, scene.n_parts).items():
        pts = state.x[idx]
        fields[b] = TriplaneField.create(np.stack([pts.min(axis=0), pts.max(axis=0)]),
                                         st.plane_resolution, st.plane_channels, st.hidden,
                                         seed=st.seed + 7919 * seed_offset + b)
    return fields


def _initial_velocities(scene, start, parts, v0, fields, alpha=1.0):
    v = np.zeros((start.n, 3))
    for b, idx in parts.items():
        v[idx] = alpha * v0[b - 1]
        if fields:
            v[idx] += fields[b].query(start.x[idx])
    if scene.settings.share_velocity and start.groups is not None:
        v = share_velocities(v, start.m, start.groups)
    return v


def _loss_position_grad(start, labels, parts, resid):
    g = np.zeros((start.n, 3))
    sgn = np.sign(resid)
    for b, idx in parts.items():
        m = start.m[idx]
        g[idx] = (m / m.sum())[:, None] * sgn[b - 1]
    return g


def train_phase(scene: TransferScene, t: int, iters: int = None, lr: float = None,
                state: ParticleState = None) -> PhaseResult:
    st = scene.settings
    iters = st.iters if iters is None else iters
    lr = st.lr if lr is None else lr
    cfg = scene.config.with_(share_velocity=st.share_velocity)
    N, dt = cfg.substeps, cfg.dt
    ref = bone_deltas(scene.reference, t)
    target = scene.scale * ref
    v0 = init_velocity(ref, N, dt)
    start = _phase_start(scene.particles if state is None else state, scene)
    parts = _part_indices(scene.labels, scene.n_parts)
    fields = make_fields(scene, start, seed_offset=t)
    scene.fields = fields
    opts = {b: _RMSProp(f.flat().size, lr, st.rms_decay, st.rms_eps) for b, f in fields.items()}

    losses, best = [], None
    for k in range(max(iters, 1)):
        s0 = start.copy()
        s0.v = _initial_velocities(scene, start, parts, v0, fields)
        tape = adjoint.record(s0, cfg, N)
        disp = part_displacement(start, tape.final, scene.labels, scene.n_parts)
        resid = disp - target
        tv_terms = {b: f.tv_loss() for b, f in fields.items()}
        tv = sum(v[0] for v in tv_terms.values())
        lx = float(np.sum(np.abs(resid[[b - 1 for b in parts]])))
        loss = lx + st.tv_weight * tv
        log.info("phase=%d iter=%d loss=%.6g tv=%.6g", t, k, loss, tv)
        if not np.isfinite(loss):
            raise NumericalDivergenceError(
                f"phase {t} iteration {k}: non-finite loss (displacement {disp.tolist()})")
        losses.append(loss)
        if best is None or loss < losses[best[0]]:
            best = (k, tape.final, disp, {b: f.copy() for b, f in fields.items()})
        if k >= iters - 1 or loss == 0.0:
            break
        gx = _loss_position_grad(start, scene.labels, parts, resid)
        _, gv, _, _ = adjoint.backprop(tape, gx)
        if cfg.share_velocity and start.groups is not None:
            gv = adjoint._share_backward(gv, start.m, start.groups)
        for b, f in fields.items():
            g = f.query_batch_with_param_grad(start.x[parts[b]], gv[parts[b]])
            g["planes"] = g["planes"] + st.tv_weight * tv_terms[b][1]
            f.set_flat(opts[b].step(f.flat(), TriplaneField.flatten_grads(g)))
    k_best, final, disp, best_fields = best
    return PhaseResult(t, disp, target, losses, final, k_best, best_fields)


def ablation_manual_velocity(scene: TransferScene, t: int, alpha: float,
                             state: ParticleState = None) -> PhaseResult:
    """Phase with fields disabled and velocities alpha * v0."""
    cfg = scene.config.with_(share_velocity=scene.settings.share_velocity)
    N, dt = cfg.substeps, cfg.dt
    ref = bone_deltas(scene.reference, t)
    target = scene.scale * ref
    start = _phase_start(scene.particles if state is None else state, scene)
    parts = _part_indices(scene.labels, scene.n_parts)
    s0 = start.copy()
    s0.v = _initial_velocities(scene, start, parts, init_velocity(ref, N, dt), None, alpha)
    final = simulate(s0, cfg, N)
    disp = part_displacement(start, final, scene.labels, scene.n_parts)
    loss = displacement_loss(disp[[b - 1 for b in parts]], ref[[b - 1 for b in parts]],
                             scene.s_t, scene.s_o)
    return PhaseResult(t, disp, target, [loss], final, 0)


# -- full pipeline --------------------------------------------------------

def global_offset(scene: TransferScene, k: int) -> RigidTransform:
    """Global motion of frame k relative to frame 0, translation size-compensated."""
    g0 = scene.reference.frames[0].global_transform
    gk = scene.reference.frames[k].global_transform
    s = scene.scale if scene.settings.scale_global_translation else 1.0
    g0s = RigidTransform(g0.rotation, s * g0.translation)
    gks = RigidTransform(gk.rotation, s * gk.translation)
    return gks.compose(g0s.inverse())


def apply_global(state: ParticleState, G: RigidTransform) -> ParticleState:
    out = state.copy()
    out.x = G.apply(state.x)
    out.v = state.v @ G.rotation.T
    return out


@dataclass
class TransferResult:
    frames: list
    simulated: list
    phases: list


def run_transfer(scene: TransferScene, phases: int = None, ablation_alpha: float = None) -> TransferResult:
    """Chain phases over consecutive frame pairs.

    Returns exported frames (global motion applied), the raw simulated
    states, and the per-phase results.  With ``ablation_alpha`` the fields
    are disabled and velocities are scaled manually instead.
    """
    T = scene.reference.n_frames
    phases = T - 1 if phases is None else phases
    if not 0 <= phases <= T - 1:
        raise ValueError(f"phases must lie in [0, {T - 1}]")
    state = scene.particles
    simulated, results = [state], []
    for t in range(phases):
        if ablation_alpha is None:
            res = train_phase(scene, t, state=state)
        else:
            res = ablation_manual_velocity(scene, t, ablation_alpha, state=state)
        results.append(res)
        state = res.final
        simulated.append(state)
    frames = [apply_global(s, global_offset(scene, k)) for k, s in enumerate(simulated)]
    return TransferResult(frames, simulated, results)


def transfer_grid(positions, reference: BoneSequence, scale: float, resolution: int,
                  margin: int = 3, reach_factor: float = 1.5) -> SimGrid:
    """Grid covering the target plus the farthest it can travel over the sequence."""
    x = np.asarray(positions, dtype=float)
    reach = 0.0
    for t in range(reference.n_frames - 1):
        reach += float(np.max(np.linalg.norm(bone_deltas(reference, t), axis=1)))
    reach *= reach_factor * scale
    lo, hi = x.min(axis=0) - reach, x.max(axis=0) + reach
    return SimGrid.enclosing(np.stack([lo, hi]), resolution, dilation=0.2,
                             clearance_cells=margin + 2)


def build_scene(particles: ParticleState, target_features: FeatureSet, ref_features: FeatureSet,
                reference: BoneSequence, settings: TransferSettings = None, *,
                resolution: int = 64, substeps: int = 24, material: MaterialParams = None,
                gravity=(0.0, 0.0, 0.0), boundary: dict = None, outlier_k: float = 2.0,
                coverage: str = "diagonal", deterministic: bool = True,
                reach_factor: float = 1.5) -> TransferScene:
    """Match reference parts onto the target and assemble a transfer scene."""
    settings = settings or TransferSettings()
    B = reference.n_bones
    ref_labels = part_labels(ref_features.vertices, SkinningModel(reference.canonical_bones))
    means = mean_part_features(concat_features(ref_features), ref_labels, B)
    tar_labels = match_parts(concat_features(target_features), means)
    assignment = remove_outliers(target_features.vertices, tar_labels, outlier_k, B)
    labels = assign_particles(particles.x, assignment)
    if coverage == "diagonal":
        s_o, s_t = coverage_ratio(ref_features.vertices), coverage_ratio(target_features.vertices)
    elif coverage == "part_diagonal":
        s_o = part_coverage_ratio(ref_features.vertices, ref_labels)
        s_t = part_coverage_ratio(target_features.vertices, assignment.labels)
    else:
        raise ValueError(f"unknown coverage strategy {coverage!r}")
    grid = transfer_grid(particles.x, reference, s_t / s_o, resolution, reach_factor=reach_factor)
    cfg = SimConfig(grid, dt=reference.frame_dt / substeps, substeps=substeps,
                    gravity=np.asarray(gravity, dtype=float),
                    material=material or MaterialParams(),
                    boundary={"y-": "sticky"} if boundary is None else boundary,
                    share_velocity=settings.share_velocity, deterministic=deterministic)
    ref_cent = np.array([ref_features.vertices[ref_labels == b].mean(axis=0) for b in range(1, B + 1)])
    return TransferScene(particles, labels, reference, s_t, s_o, cfg, settings,
                         reference_labels=ref_labels, reference_centroids=ref_cent)
