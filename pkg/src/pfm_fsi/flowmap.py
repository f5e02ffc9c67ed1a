"""Particle flow-map state: RK4 trajectories with co-integrated Jacobians and reinitialisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .grid import (MacGrid, OUTFLOW, _sample_vel_grad, apply_velocity_bc, g2p_velocity,
                   semi_lagrangian, solve_projection)

_EYE = np.eye(2)


@dataclass
class FlowMapConfig:
    n_reinit: int = 20
    n_reinit_narrowband: int = 2
    particles_per_cell: int = 16
    cfl: float = 0.5

    def __post_init__(self):
        if self.n_reinit < 1 or self.n_reinit_narrowband < 1:
            raise ValueError("reinit intervals must be >= 1")
        if self.particles_per_cell < 4:
            raise ValueError("particles_per_cell must be >= 4")
        if not 0.0 < self.cfl <= 1.0:
            raise ValueError("cfl must lie in (0, 1]")


@dataclass
class FluidParticles:
    """Structure-of-arrays particle set.

    ``m_a`` is the impulse at the start of the current flow map, ``F``/``T`` the
    forward/backward Jacobians, ``lam``/``ups`` the pressure and force buffers.
    ``vel``/``grad`` hold the per-step velocity and its gradient used for P2G.
    """

    x: np.ndarray
    m_a: np.ndarray
    F: np.ndarray
    T: np.ndarray
    lam: np.ndarray
    ups: np.ndarray
    vel: np.ndarray
    grad: np.ndarray
    rho: np.ndarray
    mass: np.ndarray
    valid: np.ndarray
    ids: np.ndarray
    steps_since_reinit: int = 0
    narrowband: bool = False

    @classmethod
    def empty(cls, n=0, narrowband=False):
        eye = np.broadcast_to(_EYE, (n, 2, 2)).copy()
        return cls(np.zeros((n, 2)), np.zeros((n, 2)), eye, eye.copy(), np.zeros((n, 2)),
                   np.zeros((n, 2)), np.zeros((n, 2)), np.zeros((n, 2, 2)), np.ones(n),
                   np.ones(n), np.ones(n, dtype=bool), np.arange(n, dtype=np.int64),
                   narrowband=narrowband)

    def __len__(self):
        return self.x.shape[0]

    _ARRAYS = ("x", "m_a", "F", "T", "lam", "ups", "vel", "grad", "rho", "mass", "valid", "ids")

    def subset(self, keep):
        out = FluidParticles(*(getattr(self, k)[keep] for k in self._ARRAYS),
                             steps_since_reinit=self.steps_since_reinit,
                             narrowband=self.narrowband)
        return out

    def copy(self):
        return self.subset(np.ones(len(self), dtype=bool))

    @property
    def p2g_mass(self):
        return np.where(self.valid, self.mass, 0.0)

    def det_F(self):
        F = self.F
        return F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]

    def ft_drift(self):
        """max over particles of ||F T - I||_inf (row-sum norm)."""
        if len(self) == 0:
            return 0.0
        E = self.F @ self.T - _EYE
        return float(np.abs(E).sum(axis=2).max())

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if p is not None]
        if not parts:
            return FluidParticles.empty()
        out = FluidParticles(*(np.concatenate([getattr(p, k) for p in parts])
                               for k in FluidParticles._ARRAYS))
        return out


# ---------------------------------------------------------------------------
# deterministic jitter

@njit(inline="always", cache=True)
def _splitmix(z):
    z = (z + np.uint64(0x9E3779B97F4A7C15))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(inline="always", cache=True)
def hash_uniform(seed, step, cell, k):
    """Counter-based uniform in [0, 1) keyed on (seed, step, cell, k)."""
    z = _splitmix(np.uint64(seed))
    z = _splitmix(z ^ np.uint64(step))
    z = _splitmix(z ^ np.uint64(cell))
    z = _splitmix(z ^ np.uint64(k))
    return (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _seed_cells(cells_i, cells_j, ppc, dx, seed, step, nx, out):
    s = int(np.sqrt(ppc) + 0.5)
    stratified = s * s == ppc
    n = 0
    for c in range(cells_i.shape[0]):
        i = cells_i[c]
        j = cells_j[c]
        cid = i * 1000003 + j
        for k in range(ppc):
            r0 = hash_uniform(seed, step, cid, 2 * k)
            r1 = hash_uniform(seed, step, cid, 2 * k + 1)
            if stratified:
                a = k % s
                b = k // s
                out[n, 0] = (i + (a + r0) / s) * dx
                out[n, 1] = (j + (b + r1) / s) * dx
            else:
                out[n, 0] = (i + r0) * dx
                out[n, 1] = (j + r1) * dx
            n += 1


def seed_positions(mask, ppc, dx, seed=0, step=0):
    """Jittered positions, ``ppc`` per cell where ``mask`` is true (cell order i-major)."""
    ci, cj = np.nonzero(mask)
    out = np.empty((len(ci) * ppc, 2))
    _seed_cells(ci.astype(np.int64), cj.astype(np.int64), ppc, dx, np.uint64(seed), step,
                mask.shape[0], out)
    return out


def reinitialize_fluid(grid: MacGrid, config: FlowMapConfig, rho=1.0, solid_cells=None,
                       seed=0, step=0, fluid_cells=None) -> FluidParticles:
    """Fresh particles: identity Jacobians, zero buffers, impulse sampled from the grid.

    ``solid_cells`` marks occupied cells whose fluid is culled; ``fluid_cells``
    optionally restricts seeding further.
    """
    mask = np.ones((grid.nx, grid.ny), dtype=bool)
    if fluid_cells is not None:
        mask &= fluid_cells
    if solid_cells is not None:
        mask &= ~solid_cells
    x = seed_positions(mask, config.particles_per_cell, grid.dx, seed, step)
    p = FluidParticles.empty(len(x))
    p.x = x
    p.m_a = g2p_velocity(grid, x)
    p.vel = p.m_a.copy()
    p.rho[:] = rho
    p.mass[:] = rho * grid.dx ** 2 / config.particles_per_cell
    return p


def cull_fluid_in_solid(p: FluidParticles, solid_cells, dx) -> FluidParticles:
    if solid_cells is None or len(p) == 0 or not solid_cells.any():
        return p
    nx, ny = solid_cells.shape
    i = np.clip((p.x[:, 0] / dx).astype(np.int64), 0, nx - 1)
    j = np.clip((p.x[:, 1] / dx).astype(np.int64), 0, ny - 1)
    return p.subset(~solid_cells[i, j])


# ---------------------------------------------------------------------------
# trajectories and Jacobians

@njit(cache=True)
def _march(x, F, T, valid, u, v, h, dx, perx, pery, nx, ny, Lx, Ly, with_maps):
    inv_dx = 1.0 / dx
    flagged = 0
    for p in range(x.shape[0]):
        x0 = x[p, 0]
        y0 = x[p, 1]
        f00, f01, f10, f11 = F[p, 0, 0], F[p, 0, 1], F[p, 1, 0], F[p, 1, 1]
        t00, t01, t10, t11 = T[p, 0, 0], T[p, 0, 1], T[p, 1, 0], T[p, 1, 1]
        c0, c1, c2, c3 = f00, f01, f10, f11
        d0, d1, d2, d3 = t00, t01, t10, t11
        sx = sy = 0.0
        a0 = a1 = a2 = a3 = 0.0
        b0 = b1 = b2 = b3 = 0.0
        cx, cy = x0, y0
        bad = False
        for stage in range(4):
            if (not perx and (cx < 0.0 or cx > Lx)) or (not pery and (cy < 0.0 or cy > Ly)):
                bad = True
                cx = min(max(cx, 0.0), Lx)
                cy = min(max(cy, 0.0), Ly)
            ux, uy, g00, g01, g10, g11 = _sample_vel_grad(u, v, cx, cy, inv_dx, perx, pery, nx, ny)
            wgt = 1.0 if (stage == 0 or stage == 3) else 2.0
            sx += wgt * ux
            sy += wgt * uy
            # dF/dt = G F, dT/dt = -T G
            k0 = g00 * c0 + g01 * c2
            k1 = g00 * c1 + g01 * c3
            k2 = g10 * c0 + g11 * c2
            k3 = g10 * c1 + g11 * c3
            q0 = -(d0 * g00 + d1 * g10)
            q1 = -(d0 * g01 + d1 * g11)
            q2 = -(d2 * g00 + d3 * g10)
            q3 = -(d2 * g01 + d3 * g11)
            a0 += wgt * k0
            a1 += wgt * k1
            a2 += wgt * k2
            a3 += wgt * k3
            b0 += wgt * q0
            b1 += wgt * q1
            b2 += wgt * q2
            b3 += wgt * q3
            if stage < 3:
                s = 0.5 * h if stage < 2 else h
                cx = x0 + s * ux
                cy = y0 + s * uy
                c0, c1, c2, c3 = f00 + s * k0, f01 + s * k1, f10 + s * k2, f11 + s * k3
                d0, d1, d2, d3 = t00 + s * q0, t01 + s * q1, t10 + s * q2, t11 + s * q3
        nxp = x0 + h * sx / 6.0
        nyp = y0 + h * sy / 6.0
        if perx:
            nxp = nxp % Lx
        if pery:
            nyp = nyp % Ly
        x[p, 0] = nxp
        x[p, 1] = nyp
        if with_maps:
            h6 = h / 6.0
            F[p, 0, 0] = f00 + h6 * a0
            F[p, 0, 1] = f01 + h6 * a1
            F[p, 1, 0] = f10 + h6 * a2
            F[p, 1, 1] = f11 + h6 * a3
            T[p, 0, 0] = t00 + h6 * b0
            T[p, 0, 1] = t01 + h6 * b1
            T[p, 1, 0] = t10 + h6 * b2
            T[p, 1, 1] = t11 + h6 * b3
            if F[p, 0, 0] * F[p, 1, 1] - F[p, 0, 1] * F[p, 1, 0] <= 0.0:
                bad = True
        if bad and valid[p]:
            valid[p] = False
            flagged += 1
    return flagged


def march_particles(p: FluidParticles, grid: MacGrid, dt: float, with_maps=True) -> int:
    """RK4-advance positions (and F, T) through the velocity stored on ``grid``.

    Particles whose stages left the domain or whose map folded (det F <= 0) are
    flagged invalid and drop out of P2G until the next reinit.  Returns the
    number newly flagged.
    """
    if len(p) == 0:
        return 0
    px, py = grid.periodic
    Lx, Ly = grid.size
    p.x = np.ascontiguousarray(p.x)
    return int(_march(p.x, p.F, p.T, p.valid, grid.u, grid.v, dt, grid.dx, px, py,
                      grid.nx, grid.ny, Lx, Ly, with_maps))


def march_positions(p: FluidParticles, grid: MacGrid, dt: float):
    """Positions and validity after an RK4 move, leaving ``p`` untouched."""
    x = np.array(p.x, dtype=np.float64, order="C")
    valid = p.valid.copy()
    if len(x):
        px, py = grid.periodic
        Lx, Ly = grid.size
        _march(x, p.F, p.T, valid, grid.u, grid.v, dt, grid.dx, px, py, grid.nx, grid.ny, Lx, Ly, False)
    return x, valid


def rk4_advect(x, velocity, dt):
    """RK4 position update through a velocity callable ``velocity(x) -> (N, 2)``.

    Plain-numpy reference path used by tests and by analytic fields.
    """
    x = np.asarray(x, dtype=np.float64)
    k1 = velocity(x)
    k2 = velocity(x + 0.5 * dt * k1)
    k3 = velocity(x + 0.5 * dt * k2)
    k4 = velocity(x + dt * k3)
    return x + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0


def evolve_jacobians(F, T, grad_u_stages, dt):
    """RK4 step of dF/dt = G F, dT/dt = -T G with G given at the four RK4 stages.

    ``grad_u_stages`` is a sequence of four (N, 2, 2) (or (2, 2)) gradients evaluated
    at the stage positions of the matching trajectory step.
    """
    G1, G2, G3, G4 = (np.asarray(g, dtype=np.float64) for g in grad_u_stages)
    kF1, kT1 = G1 @ F, -T @ G1
    F2, T2 = F + 0.5 * dt * kF1, T + 0.5 * dt * kT1
    kF2, kT2 = G2 @ F2, -T2 @ G2
    F3, T3 = F + 0.5 * dt * kF2, T + 0.5 * dt * kT2
    kF3, kT3 = G3 @ F3, -T3 @ G3
    F4, T4 = F + dt * kF3, T + dt * kT3
    kF4, kT4 = G4 @ F4, -T4 @ G4
    return (F + dt * (kF1 + 2 * kF2 + 2 * kF3 + kF4) / 6.0,
            T + dt * (kT1 + 2 * kT2 + 2 * kT3 + kT4) / 6.0)


def remove_outflow(p: FluidParticles, grid: MacGrid) -> FluidParticles:
    """Drop particles that left through an outflow side."""
    if len(p) == 0:
        return p
    Lx, Ly = grid.size
    x = p.x
    gone = np.zeros(len(p), dtype=bool)
    bc = grid.bc
    if bc.left.kind == OUTFLOW:
        gone |= x[:, 0] <= 0.0
    if bc.right.kind == OUTFLOW:
        gone |= x[:, 0] >= Lx
    if bc.bottom.kind == OUTFLOW:
        gone |= x[:, 1] <= 0.0
    if bc.top.kind == OUTFLOW:
        gone |= x[:, 1] >= Ly
    if gone.any():
        p = p.subset(~gone)
    if not (grid.bc.periodic_x and grid.bc.periodic_y):
        eps = 1e-9 * grid.dx
        if not grid.bc.periodic_x:
            np.clip(p.x[:, 0], eps, Lx - eps, out=p.x[:, 0])
        if not grid.bc.periodic_y:
            np.clip(p.x[:, 1], eps, Ly - eps, out=p.x[:, 1])
    return p


# ---------------------------------------------------------------------------
# midpoint

def estimate_midpoint_velocity(grid: MacGrid, dt: float, accel=None, forcing=None,
                               solver=None) -> MacGrid:
    """Half-step prediction of the velocity at t + dt/2 for grid-coupled scenes.

    RK4 semi-Lagrangian transport of ``grid`` over dt/2, plus ``accel`` (face
    accelerations ``(au, av)``) times dt/2, plus an optional ``forcing(mid, h)``
    hook that adds coupling forces in place, followed by projection.
    """
    h = 0.5 * dt
    mid = grid.copy()
    mid.u, mid.v = semi_lagrangian(grid, h)
    if accel is not None:
        mid.u += h * accel[0]
        mid.v += h * accel[1]
    if forcing is not None:
        forcing(mid, h)
    apply_velocity_bc(mid)
    solve_projection(mid, h, solver)
    return mid


def particle_snapshot_csv(p: FluidParticles, path):
    """Debug dump: x, y, |m|, det F per particle."""
    data = np.column_stack([p.x, np.linalg.norm(p.m_a, axis=1), p.det_F()])
    np.savetxt(path, data, delimiter=",", header="x,y,m_norm,det_F", comments="", fmt="%.9g")
