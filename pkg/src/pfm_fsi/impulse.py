"""Impulse gauge: flow-map transport of impulse, the pressure/force buffers and conversion to velocity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import MacGrid, g2p_gradient, g2p_velocity


def map_impulse(m_a, T):
    """m_c = T^T m_a, batched over leading axes."""
    return np.einsum("...ji,...j->...i", T, m_a)


def kinetic_gradient(vel, grad):
    """grad(|u|^2 / 2) = G^T u with G[a, b] = du_a/dx_b."""
    return np.einsum("...ji,...j->...i", grad, vel)


def impulse_to_velocity(m_c, lam, ups, T, grad_half_u2, f_c, dt):
    """u* = m_c - T^T (Lambda - Upsilon) + dt grad(|u|^2/2) + dt f."""
    out = m_c - map_impulse(lam - ups, T) + dt * grad_half_u2
    if f_c is not None:
        out = out + dt * f_c
    return out


def update_pressure_buffer(lam, F, grad_p_over_rho, grad_half_u2, dt):
    """Lambda_c = Lambda_b + F^T dt (grad p / rho - grad |u|^2/2)."""
    return lam + dt * map_impulse(grad_p_over_rho - grad_half_u2, F)


def update_force_buffer(ups, F, f_c, dt):
    """Upsilon_c = Upsilon_b + F^T dt f."""
    return ups + dt * map_impulse(f_c, F)


def laplacian_faces(grid: MacGrid, u, v):
    """5-point Laplacian of both face components.

    Periodic sides wrap; other sides use a zero-gradient ghost (the boundary
    face itself is left at zero, its value is owned by the boundary condition).
    """
    px, py = grid.periodic
    out = []
    for arr, per_x, per_y, dup_x, dup_y in ((u, px, py, True, False), (v, px, py, False, True)):
        a = arr[:-1] if (dup_x and per_x) else arr
        a = a[:, :-1] if (dup_y and per_y) else a
        mode_x = "wrap" if per_x else "edge"
        mode_y = "wrap" if per_y else "edge"
        pad = np.pad(a, ((1, 1), (0, 0)), mode=mode_x)
        pad = np.pad(pad, ((0, 0), (1, 1)), mode=mode_y)
        lap = (pad[2:, 1:-1] + pad[:-2, 1:-1] + pad[1:-1, 2:] + pad[1:-1, :-2]
               - 4.0 * pad[1:-1, 1:-1]) / grid.dx ** 2
        if dup_x:
            if per_x:
                lap = np.concatenate([lap, lap[:1]], axis=0)
            else:
                lap[0] = lap[-1] = 0.0
        if dup_y:
            if per_y:
                lap = np.concatenate([lap, lap[:, :1]], axis=1)
            else:
                lap[:, 0] = lap[:, -1] = 0.0
        out.append(lap)
    return out[0], out[1]


def viscosity_force(grid: MacGrid, m_u, m_v, nu, x=None):
    """nu * Laplacian of the grid-transferred impulse.

    Returns face accelerations ``(fu, fv)``, or per-particle values when
    positions ``x`` are given.
    """
    if nu == 0.0:
        fu, fv = np.zeros_like(m_u), np.zeros_like(m_v)
    else:
        lu, lv = laplacian_faces(grid, m_u, m_v)
        fu, fv = nu * lu, nu * lv
    if x is None:
        return fu, fv
    return g2p_velocity(grid, x, fu, fv)


@dataclass
class BufferHistory:
    """Per-step log of F and the buffer integrands, keyed by particle id.

    Replaying ``sum_k F_k^T dt_k q_k`` reproduces the incrementally accumulated
    buffers independently of the solver's bookkeeping.
    """

    steps: list = field(default_factory=list)

    def record(self, ids, F, dt, lam_integrand, ups_integrand):
        self.steps.append((ids.copy(), F.copy(), float(dt), lam_integrand.copy(),
                           ups_integrand.copy()))

    def clear(self):
        self.steps.clear()

    def replay(self, ids):
        """Re-summed (Lambda, Upsilon) for the particles ``ids``."""
        ids = np.asarray(ids)
        lam = np.zeros((len(ids), 2))
        ups = np.zeros((len(ids), 2))
        for sid, F, dt, ql, qu in self.steps:
            order = np.argsort(sid, kind="stable")
            pos = np.searchsorted(sid[order], ids)
            rows = order[np.minimum(pos, len(sid) - 1)] if len(sid) else pos
            if len(sid) == 0 or not np.array_equal(sid[rows], ids):
                raise KeyError("particle ids missing from the logged history")
            Ft = np.transpose(F[rows], (0, 2, 1))
            lam += dt * np.matmul(Ft, ql[rows][:, :, None])[:, :, 0]
            ups += dt * np.matmul(Ft, qu[rows][:, :, None])[:, :, 0]
        return lam, ups


def pressure_acceleration(u_star: MacGrid, u_c: MacGrid, dt):
    """Face field grad p / rho recovered from the projection: (u* - u_c) / dt."""
    return (u_star.u - u_c.u) / dt, (u_star.v - u_c.v) / dt


def convert(particles, u_mid: MacGrid, dt, with_buffers=True, with_kinetic=True, kinetic_grid: MacGrid = None):
    """Fill ``particles.vel``/``grad`` with the divergent velocity u* and grad(u_mid).

    ``with_buffers=False`` and ``with_kinetic=False`` give the direct hybrid
    ablation, where the mapped impulse is used as velocity unchanged.
    ``kinetic_grid`` swaps the field behind the grad 1/2 |u|^2 term (default u_mid).
    """
    if len(particles) == 0:
        return
    vel, grad = g2p_gradient(u_mid, particles.x)
    m_c = map_impulse(particles.m_a, particles.T)
    if with_buffers:
        m_c = m_c - map_impulse(particles.lam - particles.ups, particles.T)
    if with_kinetic:
        if kinetic_grid is None:
            m_c = m_c + dt * kinetic_gradient(vel, grad)
        else:
            m_c = m_c + dt * kinetic_gradient(*g2p_gradient(kinetic_grid, particles.x))
    particles.vel = m_c
    particles.grad = grad


def update_buffers(particles, grid_c: MacGrid, accel_p, force, dt, history: BufferHistory = None,
                   kinetic_grid: MacGrid = None):
    """Accumulate Lambda and Upsilon after projection.

    ``accel_p`` is the face field grad p / rho, ``force`` the face field of
    per-unit-mass forces applied on the grid this step (or None).  The kinetic
    term is taken from ``kinetic_grid`` (the velocity used in the conversion),
    defaulting to ``grid_c``.
    """
    if len(particles) == 0:
        return
    x = particles.x
    gp = g2p_velocity(grid_c, x, *accel_p)
    vel, grad = g2p_gradient(grid_c if kinetic_grid is None else kinetic_grid, x)
    ke = kinetic_gradient(vel, grad)
    q_ups = g2p_velocity(grid_c, x, *force) if force is not None else np.zeros_like(gp)
    particles.lam = update_pressure_buffer(particles.lam, particles.F, gp, ke, dt)
    particles.ups = update_force_buffer(particles.ups, particles.F, q_ups, dt)
    if history is not None:
        history.record(particles.ids, particles.F, dt, gp - ke, q_ups)
