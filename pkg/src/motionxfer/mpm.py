"""Explicit MLS-MPM with fixed-corotated elasticity.

All grid fields are stored flattened: node (i, j, k) lives at
``(i * n + j) * n + k``.  Scatter uses ``np.bincount`` which accumulates in
particle order, so every run is bitwise reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

FACES = ("x-", "x+", "y-", "y+", "z-", "z+")
BOUNDARY_KINDS = ("sticky", "slip", "open")

# stencil offsets of the quadratic B-spline, (27, 3)
OFFSETS = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)])


class OutOfBoundsError(ValueError):
    pass


class NumericalDivergenceError(RuntimeError):
    pass


def lame_parameters(E: float, nu: float) -> tuple[float, float]:
    if not E > 0:
        raise ValueError(f"Young's modulus must be positive, got {E}")
    if nu >= 0.5:
        raise ValueError(f"Poisson ratio {nu} at or beyond the incompressible limit 0.5")
    if nu < 0:
        raise ValueError(f"Poisson ratio must be non-negative, got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


@dataclass(frozen=True)
class MaterialParams:
    E: float = 1e4
    nu: float = 0.3

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"Poisson ratio must be in (0, 0.5), got {self.nu}")
        lame_parameters(self.E, self.nu)

    @property
    def mu(self) -> float:
        return lame_parameters(self.E, self.nu)[0]

    @property
    def lam(self) -> float:
        return lame_parameters(self.E, self.nu)[1]


@dataclass
class ParticleState:
    x: np.ndarray
    v: np.ndarray
    m: np.ndarray
    V0: np.ndarray
    F: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None
    # control-cell index per particle, used for velocity sharing
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1, 3)
        n = len(self.x)
        self.v = np.asarray(self.v, dtype=float).reshape(n, 3)
        self.m = np.broadcast_to(np.asarray(self.m, dtype=float), (n,)).copy()
        self.V0 = np.broadcast_to(np.asarray(self.V0, dtype=float), (n,)).copy()
        self.F = np.tile(np.eye(3), (n, 1, 1)) if self.F is None else np.asarray(self.F, dtype=float).reshape(n, 3, 3)
        self.C = np.zeros((n, 3, 3)) if self.C is None else np.asarray(self.C, dtype=float).reshape(n, 3, 3)
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64).reshape(n)

    @property
    def n(self) -> int:
        return len(self.x)

    def copy(self) -> "ParticleState":
        return ParticleState(self.x.copy(), self.v.copy(), self.m.copy(), self.V0.copy(),
                             self.F.copy(), self.C.copy(),
                             None if self.groups is None else self.groups.copy())

    def validate(self):
        if np.any(self.m <= 0):
            raise ValueError("particle masses must be positive")
        if np.any(self.V0 <= 0):
            raise ValueError("particle volumes must be positive")
        if self.n and np.any(np.linalg.det(self.F) <= 0):
            raise ValueError("deformation gradient with non-positive determinant")

    @classmethod
    def at_rest(cls, x, density: float = 1000.0, volume: float = 1e-6) -> "ParticleState":
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        return cls(x, np.zeros_like(x), density * volume, volume)


@dataclass
class SimGrid:
    """Uniform cubic grid; fields are None until populated by p2g."""

    resolution: int
    dx: float
    origin: np.ndarray
    mass: Optional[np.ndarray] = None
    momentum: Optional[np.ndarray] = None
    velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        if self.resolution < 4:
            raise ValueError("grid resolution must be at least 4")
        if not self.dx > 0:
            raise ValueError("cell size must be positive")

    @property
    def n_nodes(self) -> int:
        return self.resolution ** 3

    def descriptor(self) -> "SimGrid":
        return SimGrid(self.resolution, self.dx, self.origin.copy())

    def node_positions(self) -> np.ndarray:
        n = self.resolution
        ijk = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"), -1)
        return self.origin + ijk.reshape(-1, 3) * self.dx

    @classmethod
    def enclosing(cls, positions, resolution: int = 64, dilation: float = 0.2,
                  clearance_cells: int = 5) -> "SimGrid":
        """Cubic grid around a point set.

        The domain is the bounding box dilated by ``dilation`` and widened
        further if needed so every point keeps ``clearance_cells`` cells away
        from each face.
        """
        x = np.asarray(positions, dtype=float).reshape(-1, 3)
        lo, hi = x.min(axis=0), x.max(axis=0)
        ext = float(np.max(hi - lo))
        if ext <= 0:
            ext = 1.0
        side = ext * (1.0 + dilation)
        if 2 * clearance_cells < resolution:
            side = max(side, ext / (1.0 - 2.0 * clearance_cells / resolution))
        dx = side / resolution
        center = 0.5 * (lo + hi)
        return cls(resolution, dx, center - 0.5 * side)


@dataclass
class SimConfig:
    grid: SimGrid
    dt: float = 1e-3
    substeps: int = 24
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.8, 0.0]))
    # None means a stress-free (dust) material
    material: Optional[MaterialParams] = field(default_factory=MaterialParams)
    boundary: dict = field(default_factory=lambda: {"y-": "sticky"})
    margin: int = 3
    share_velocity: bool = False
    deterministic: bool = True

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        for face, kind in self.boundary.items():
            if face not in FACES:
                raise ValueError(f"unknown boundary face {face!r}")
            if kind not in BOUNDARY_KINDS:
                raise ValueError(f"unknown boundary condition {kind!r} on {face}")
        self._mask = None

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def boundary_mask(self) -> np.ndarray:
        """Per-node, per-component 0/1 multiplier implementing the boundary."""
        if self._mask is None:
            n, mg = self.grid.resolution, self.margin
            mask = np.ones((n, n, n, 3))
            for face, kind in self.boundary.items():
                if kind == "open":
                    continue
                axis = "xyz".index(face[0])
                sl = [slice(None)] * 3
                sl[axis] = slice(0, mg) if face[1] == "-" else slice(n - mg, n)
                if kind == "sticky":
                    mask[tuple(sl)] = 0.0
                else:
                    mask[tuple(sl) + (axis,)] = 0.0
            self._mask = mask.reshape(-1, 3)
        return self._mask


# -- material model ---------------------------------------------------------

def signed_svd(F: np.ndarray):
    """SVD with U, V proper rotations; the sign goes into the last singular value."""
    U, s, Vt = np.linalg.svd(F)
    U = U.copy()
    s = s.copy()
    Vt = Vt.copy()
    du = np.linalg.det(U) < 0
    U[du, :, 2] *= -1
    s[du, 2] *= -1
    dv = np.linalg.det(Vt) < 0
    Vt[dv, 2, :] *= -1
    s[dv, 2] *= -1
    return U, s, Vt


def kirchhoff_stress(F, material: MaterialParams) -> np.ndarray:
    """Fixed-corotated Kirchhoff stress for (3, 3) or (N, 3, 3) input."""
    F = np.asarray(F, dtype=float)
    single = F.ndim == 2
    Fb = F[None] if single else F
    if not np.all(np.isfinite(Fb)):
        raise ValueError("non-finite deformation gradient")
    J = np.linalg.det(Fb)
    if np.any(J <= 0):
        raise ValueError("deformation gradient is not invertible with positive determinant")
    U, _, Vt = signed_svd(Fb)
    R = U @ Vt
    mu, lam = material.mu, material.lam
    tau = 2.0 * mu * (Fb - R) @ np.swapaxes(Fb, 1, 2)
    tau += (lam * (J - 1.0) * J)[:, None, None] * np.eye(3)
    return tau[0] if single else tau


# -- transfers --------------------------------------------------------------

@dataclass
class Stencil:
    idx: np.ndarray      # (N, 27) flat node indices
    w: np.ndarray        # (N, 27) kernel weights
    d: np.ndarray        # (N, 27, 3) node minus particle offsets
    w1: np.ndarray       # (N, 3, 3) per-axis 1D weights [particle, offset, axis]
    dw1: np.ndarray      # (N, 3, 3) derivatives of w1 w.r.t. fractional coordinate
    frac: np.ndarray     # (N, 3)


def build_stencil(x: np.ndarray, grid: SimGrid) -> Stencil:
    n = grid.resolution
    inv_dx = 1.0 / grid.dx
    fx = (x - grid.origin) * inv_dx
    base = np.floor(fx - 0.5).astype(np.int64)
    bad = np.any(base < 0, axis=1) | np.any(base > n - 3, axis=1) | ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        p = int(np.flatnonzero(bad)[0])
        raise OutOfBoundsError(f"particle {p} at {x[p]} is outside the padded grid domain")
    frac = fx - base
    w1 = np.stack([0.5 * (1.5 - frac) ** 2, 0.75 - (frac - 1.0) ** 2, 0.5 * (frac - 0.5) ** 2], axis=1)
    dw1 = np.stack([frac - 1.5, -2.0 * (frac - 1.0), frac - 0.5], axis=1)
    o = OFFSETS
    w = w1[:, o[:, 0], 0] * w1[:, o[:, 1], 1] * w1[:, o[:, 2], 2]
    node = base[:, None, :] + o[None]
    idx = (node[..., 0] * n + node[..., 1]) * n + node[..., 2]
    d = (o[None] - frac[:, None, :]) * grid.dx
    return Stencil(idx, w, d, w1, dw1, frac)


def kernel_weights(x, grid: SimGrid) -> tuple[np.ndarray, np.ndarray]:
    """Flat node indices and quadratic B-spline weights, each (N, 27)."""
    st = build_stencil(np.asarray(x, dtype=float).reshape(-1, 3), grid)
    return st.idx, st.w


def _scatter(idx: np.ndarray, values: np.ndarray, n_nodes: int) -> np.ndarray:
    """Sum (N, 27[, k]) values into nodes."""
    flat = idx.ravel()
    if values.ndim == 2:
        return np.bincount(flat, weights=values.ravel(), minlength=n_nodes)
    k = values.shape[-1]
    vals = values.reshape(-1, k)
    return np.stack([np.bincount(flat, weights=vals[:, c], minlength=n_nodes) for c in range(k)], axis=1)


def p2g(particles: ParticleState, grid: SimGrid, stress, config: SimConfig,
        stencil: Optional[Stencil] = None) -> SimGrid:
    """Scatter mass and APIC momentum, with the MLS-MPM stress impulse fused in."""
    st = build_stencil(particles.x, grid) if stencil is None else stencil
    m = particles.m
    K = 4.0 / grid.dx ** 2
    affine = m[:, None, None] * particles.C
    if stress is not None:
        affine = affine - (config.dt * K * particles.V0)[:, None, None] * stress
    mom = m[:, None, None] * particles.v[:, None, :] + st.d @ np.swapaxes(affine, 1, 2)
    mass = _scatter(st.idx, st.w * m[:, None], grid.n_nodes)
    momentum = _scatter(st.idx, st.w[..., None] * mom, grid.n_nodes)
    return SimGrid(grid.resolution, grid.dx, grid.origin.copy(), mass, momentum)


def grid_update(grid: SimGrid, config: SimConfig) -> SimGrid:
    occupied = grid.mass > 0
    vel = np.zeros_like(grid.momentum)
    vel[occupied] = grid.momentum[occupied] / grid.mass[occupied, None]
    vel[occupied] += config.dt * config.gravity
    vel *= config.boundary_mask()
    return SimGrid(grid.resolution, grid.dx, grid.origin.copy(), grid.mass, grid.momentum, vel)


def share_velocities(v: np.ndarray, m: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Replace each velocity by the mass-weighted mean of its group."""
    n_groups = int(groups.max()) + 1 if len(groups) else 0
    M = np.bincount(groups, weights=m, minlength=n_groups)
    P = np.stack([np.bincount(groups, weights=m * v[:, c], minlength=n_groups) for c in range(3)], axis=1)
    return P[groups] / M[groups, None]


def g2p_advect(particles: ParticleState, grid: SimGrid, config: SimConfig,
               stencil: Optional[Stencil] = None) -> ParticleState:
    st = build_stencil(particles.x, grid) if stencil is None else stencil
    vi = grid.velocity[st.idx]                       # (N, 27, 3)
    wv = st.w[..., None] * vi
    v = wv.sum(axis=1)
    C = (4.0 / grid.dx ** 2) * (np.swapaxes(wv, 1, 2) @ st.d)
    if config.share_velocity and particles.groups is not None:
        v = share_velocities(v, particles.m, particles.groups)
    x = particles.x + config.dt * v
    F = (np.eye(3) + config.dt * C) @ particles.F
    return ParticleState(x, v, particles.m, particles.V0, F, C, particles.groups)


def particle_stress(state: ParticleState, config: SimConfig) -> Optional[np.ndarray]:
    if config.material is None:
        return None
    try:
        return kirchhoff_stress(state.F, config.material)
    except ValueError as exc:
        raise NumericalDivergenceError(str(exc)) from exc


def _check_cfl(state: ParticleState, config: SimConfig):
    if state.n == 0:
        return
    vmax = float(np.sqrt(np.max(np.sum(state.v ** 2, axis=1))))
    if vmax * config.dt >= config.grid.dx:
        log.warning("CFL violated: max speed %.4g * dt %.4g >= cell size %.4g",
                    vmax, config.dt, config.grid.dx)


def step(particles: ParticleState, config: SimConfig) -> ParticleState:
    """One substep: stress, P2G, grid update, G2P + advection."""
    _check_cfl(particles, config)
    st = build_stencil(particles.x, config.grid)
    tau = particle_stress(particles, config)
    g = p2g(particles, config.grid, tau, config, stencil=st)
    g = grid_update(g, config)
    out = g2p_advect(particles, g, config, stencil=st)
    if not np.all(np.isfinite(out.x)):
        raise NumericalDivergenceError("non-finite particle positions")
    return out


def simulate(particles: ParticleState, config: SimConfig, n_steps: int,
             record: bool = False):
    """Run n_steps substeps.  With ``record`` also return every intermediate state."""
    state = particles
    history = [particles] if record else None
    for _ in range(n_steps):
        state = step(state, config)
        if record:
            history.append(state)
    return (state, history) if record else state


def control_points(positions, resolution: int = 41) -> tuple[np.ndarray, np.ndarray]:
    """Down-sample a point set onto a resolution^3 lattice over its bounding box.

    Returns the per-cell mean positions (ordered by flat cell id) and, for
    every input point, the index of its control point.
    """
    if resolution < 2:
        raise ValueError("control lattice resolution must be >= 2")
    x = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(x) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    lo, hi = x.min(axis=0), x.max(axis=0)
    ext = hi - lo
    safe = np.where(ext > 0, ext, 1.0)
    cell = np.floor((x - lo) / safe * resolution).astype(np.int64)
    cell = np.clip(cell, 0, resolution - 1)
    flat = (cell[:, 0] * resolution + cell[:, 1]) * resolution + cell[:, 2]
    _, assign = np.unique(flat, return_inverse=True)
    assign = assign.reshape(-1)
    count = np.bincount(assign)
    centers = np.stack([np.bincount(assign, weights=x[:, c]) for c in range(3)], axis=1) / count[:, None]
    return centers, assign
