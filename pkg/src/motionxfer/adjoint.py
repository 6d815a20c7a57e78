"""Reverse-mode gradients through the MLS-MPM substep.

Only the initial particle velocities are treated as inputs; the backward
pass still carries adjoints for positions, F and C because they couple the
substeps.  Forward substeps are recomputed from checkpoints so the tape
stays small.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mpm import (
    OFFSETS,
    ParticleState,
    SimConfig,
    Stencil,
    build_stencil,
    g2p_advect,
    grid_update,
    p2g,
    particle_stress,
    signed_svd,
    _check_cfl,
    _scatter,
)

DENOM_GUARD = 1e-8
FULL_TAPE_LIMIT = 64
CHECKPOINT_EVERY = 8


class TapeOverflowError(MemoryError):
    pass


def _state_bytes(state: ParticleState) -> int:
    return state.n * 24 * 8


def forward_cached(state: ParticleState, config: SimConfig):
    """One substep returning the stencil and grid needed by the backward pass.

    Uses exactly the same kernels as :func:`motionxfer.mpm.step`.
    """
    _check_cfl(state, config)
    st = build_stencil(state.x, config.grid)
    tau = particle_stress(state, config)
    g = grid_update(p2g(state, config.grid, tau, config, stencil=st), config)
    out = g2p_advect(state, g, config, stencil=st)
    return out, (st, g, tau)


def stress_backward(F: np.ndarray, g_tau: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """Pull a Kirchhoff-stress adjoint back to the deformation gradient."""
    U, s, Vt = signed_svd(F)
    R = U @ Vt
    J = np.linalg.det(F)
    Ft = np.swapaxes(F, 1, 2)
    Gt = np.swapaxes(g_tau, 1, 2)
    gF = 2.0 * mu * (g_tau @ F + Gt @ (F - R))
    trG = np.trace(g_tau, axis1=1, axis2=2)
    gF += (lam * (2.0 * J - 1.0) * J * trG)[:, None, None] * np.linalg.inv(Ft)
    # polar rotation R = U V^T: dR = U W V^T with W_ij = (X_ij - X_ji) / (s_i + s_j)
    gR = -2.0 * mu * g_tau @ F
    V = np.swapaxes(Vt, 1, 2)
    H = np.swapaxes(U, 1, 2) @ gR @ V
    denom = s[:, :, None] + s[:, None, :]
    denom = np.where(np.abs(denom) < DENOM_GUARD, np.copysign(DENOM_GUARD, denom), denom)
    gX = (H - np.swapaxes(H, 1, 2)) / denom
    idx = np.arange(3)
    gX[:, idx, idx] = 0.0
    gF += U @ gX @ Vt
    return gF


def _share_backward(g: np.ndarray, m: np.ndarray, groups: np.ndarray) -> np.ndarray:
    n_groups = int(groups.max()) + 1
    M = np.bincount(groups, weights=m, minlength=n_groups)
    S = np.stack([np.bincount(groups, weights=g[:, c], minlength=n_groups) for c in range(3)], axis=1)
    return m[:, None] * S[groups] / M[groups, None]


def step_backward(state: ParticleState, out: ParticleState, cache, grads, config: SimConfig):
    """Adjoint of one substep.

    ``grads`` holds adjoints (gx, gv, gF, gC) of ``out``; returns the same
    tuple for ``state``.
    """
    st, grid, tau = cache
    gx_o, gv_o, gF_o, gC_o = grads
    dt, dx = config.dt, grid.dx
    K = 4.0 / dx ** 2
    m = state.m
    w, d = st.w, st.d

    # x' = x + dt v',  F' = (I + dt C') F
    gx = gx_o.copy()
    gv1 = gv_o + dt * gx_o
    gC_new = gC_o + dt * gF_o @ np.swapaxes(state.F, 1, 2)
    gF = np.swapaxes(np.eye(3) + dt * out.C, 1, 2) @ gF_o
    if config.share_velocity and state.groups is not None:
        gv1 = _share_backward(gv1, m, state.groups)

    # G2P: v = sum w vi,  C = K sum w vi d^T
    vi = grid.velocity[st.idx]
    gCd = d @ np.swapaxes(gC_new, 1, 2)
    g_vi = w[..., None] * (gv1[:, None, :] + K * gCd)
    gw = np.sum(vi * (gv1[:, None, :] + K * gCd), axis=2)
    gd = K * w[..., None] * (vi @ gC_new)
    g_vgrid = _scatter(st.idx, g_vi, grid.n_nodes)

    # grid update: v = mask * (P / M + dt g) on occupied nodes
    g_u = g_vgrid * config.boundary_mask()
    occ = grid.mass > 0
    gP = np.zeros_like(g_u)
    gM = np.zeros(grid.n_nodes)
    Mo = grid.mass[occ]
    gP[occ] = g_u[occ] / Mo[:, None]
    gM[occ] = -np.sum(g_u[occ] * grid.momentum[occ], axis=1) / Mo ** 2

    # P2G: P = sum w (m v + A d),  M = sum w m
    A = m[:, None, None] * state.C
    if tau is not None:
        A = A - (dt * K * state.V0)[:, None, None] * tau
    gP_p = gP[st.idx]
    mom = m[:, None, None] * state.v[:, None, :] + d @ np.swapaxes(A, 1, 2)
    wgP = w[..., None] * gP_p
    gv = m[:, None] * wgP.sum(axis=1)
    gA = np.swapaxes(wgP, 1, 2) @ d
    gw += np.sum(gP_p * mom, axis=2) + gM[st.idx] * m[:, None]
    gd += wgP @ A
    gC = m[:, None, None] * gA
    if tau is not None:
        g_tau = -(dt * K * state.V0)[:, None, None] * gA
        gF += stress_backward(state.F, g_tau, config.material.mu, config.material.lam)

    # stencil geometry: d = (offset - frac) dx,  w = prod_a w1[o_a, a](frac_a)
    gx -= gd.sum(axis=1)
    gx += _weight_position_grad(st, gw) / dx
    return gx, gv, gF, gC


def _weight_position_grad(st: Stencil, gw: np.ndarray) -> np.ndarray:
    o = OFFSETS
    w1, dw1 = st.w1, st.dw1
    a0, a1, a2 = w1[:, o[:, 0], 0], w1[:, o[:, 1], 1], w1[:, o[:, 2], 2]
    d0, d1, d2 = dw1[:, o[:, 0], 0], dw1[:, o[:, 1], 1], dw1[:, o[:, 2], 2]
    return np.stack([
        np.sum(gw * d0 * a1 * a2, axis=1),
        np.sum(gw * a0 * d1 * a2, axis=1),
        np.sum(gw * a0 * a1 * d2, axis=1),
    ], axis=1)


@dataclass
class AdjointTape:
    """Checkpointed forward trajectory.

    ``checkpoints`` maps substep index to the state *before* that substep.
    """

    config: SimConfig
    n_steps: int
    interval: int
    checkpoints: dict = field(default_factory=dict)
    final: ParticleState = None

    def replay(self) -> ParticleState:
        state = self.checkpoints[0]
        for _ in range(self.n_steps):
            state, _ = forward_cached(state, self.config)
        return state


def record(particles: ParticleState, config: SimConfig, n_steps: int,
           max_tape_bytes: int = 2 ** 31) -> AdjointTape:
    interval = 1 if n_steps <= FULL_TAPE_LIMIT else CHECKPOINT_EVERY
    n_ckpt = (n_steps + interval - 1) // interval
    if n_ckpt * _state_bytes(particles) > max_tape_bytes:
        raise TapeOverflowError(
            f"{n_ckpt} checkpoints of {particles.n} particles exceed {max_tape_bytes} bytes")
    tape = AdjointTape(config, n_steps, interval)
    state = particles
    for k in range(n_steps):
        if k % interval == 0:
            tape.checkpoints[k] = state
        state, _ = forward_cached(state, config)
    tape.final = state
    return tape


def backprop(tape: AdjointTape, gx_final: np.ndarray, gv_final=None):
    """Pull adjoints of the final state back to the initial state.

    Returns (gx0, gv0, gF0, gC0).
    """
    n = tape.final.n
    grads = (np.asarray(gx_final, dtype=float).reshape(n, 3),
             np.zeros((n, 3)) if gv_final is None else np.asarray(gv_final, dtype=float).reshape(n, 3),
             np.zeros((n, 3, 3)), np.zeros((n, 3, 3)))
    starts = sorted(tape.checkpoints, reverse=True)
    end = tape.n_steps
    for s in starts:
        states, caches = [tape.checkpoints[s]], []
        for _ in range(s, end):
            nxt, cache = forward_cached(states[-1], tape.config)
            states.append(nxt)
            caches.append(cache)
        for k in range(len(caches) - 1, -1, -1):
            grads = step_backward(states[k], states[k + 1], caches[k], grads, tape.config)
        end = s
    return grads


def simulate_with_gradient(particles: ParticleState, config: SimConfig, n_steps: int,
                           loss_grad_on_final_positions):
    """Forward simulation plus d(loss)/d(initial velocities).

    The loss enters only through its gradient on the final positions.
    """
    tape = record(particles, config, n_steps)
    gx, gv, _, _ = backprop(tape, loss_grad_on_final_positions)
    return tape.final, gv


def gradient_check(scene: ParticleState, config: SimConfig, n_probes: int,
                   n_steps: int = None, seed: int = 0, rel_step: float = 1e-4) -> dict:
    """Compare adjoint velocity gradients with central finite differences.

    The probe loss is a fixed random linear functional of the final
    positions.  The velocity perturbation moves a particle by ``rel_step``
    cells over the run.
    """
    if n_probes <= 0:
        return {"n_probes": 0, "max_rel_error": None, "mean_rel_error": None, "probes": []}
    n_steps = config.substeps if n_steps is None else n_steps
    rng = np.random.default_rng(seed)
    coeff = rng.standard_normal((scene.n, 3))
    _, grad = simulate_with_gradient(scene, config, n_steps, coeff)

    def loss(v):
        s = scene.copy()
        s.v = v
        state = s
        for _ in range(n_steps):
            state, _ = forward_cached(state, config)
        return float(np.sum(coeff * state.x))

    h = rel_step * config.grid.dx / (n_steps * config.dt)
    probes = []
    flat = rng.choice(scene.n * 3, size=min(n_probes, scene.n * 3), replace=False)
    for f in flat:
        p, c = divmod(int(f), 3)
        vp, vm = scene.v.copy(), scene.v.copy()
        vp[p, c] += h
        vm[p, c] -= h
        fd = (loss(vp) - loss(vm)) / (2 * h)
        ad = float(grad[p, c])
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-12)
        probes.append({"particle": p, "component": c, "adjoint": ad, "fd": fd, "rel_error": rel})
    errs = [q["rel_error"] for q in probes]
    return {"n_probes": len(probes), "max_rel_error": max(errs),
            "mean_rel_error": float(np.mean(errs)), "probes": probes}
