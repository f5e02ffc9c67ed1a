"""Time integration: midpoint estimate, flow-map transport, solid coupling, projection and output."""

from __future__ import annotations

import copy
import logging
import os
import warnings

import numpy as np

from .config import SimConfig, validate
from .diagnostics import (TRACE_COLUMNS, CsvWriter, SolidTracer, frame_row, vorticity, write_pgm)
from .errors import SimulationError, UnderResolved
from .flowmap import (FlowMapConfig, FluidParticles, cull_fluid_in_solid, march_particles,
                      march_positions, reinitialize_fluid, remove_outflow, seed_positions)
from .grid import (INFLOW, MacGrid, PressureSolver, TransferAccumulator, apply_velocity_bc,
                   divergence_stats, dump_grid, g2p_gradient, g2p_velocity, semi_lagrangian,
                   transfer_density)
from .impulse import (BufferHistory, convert, laplacian_faces, map_impulse, update_buffers)
from .mpm import (mpm_substeps, resample_narrowband, sample_solid_velocity, solid_dt_and_substeps)
from .scenarios import Scene, build_scene

log = logging.getLogger(__name__)


def compute_dt(grid: MacGrid, cfl, dt_min=1e-5, dt_max=1.0 / 24.0, u_floor=1e-12, viscosity=0.0):
    """cfl dx / max|u| clamped to [dt_min, dt_max].

    With ``viscosity`` > 0 the explicit diffusion limit dx^2 / (4 nu) also caps dt.
    """
    vmax = max(grid.max_speed(), u_floor)
    dt = cfl * grid.dx / vmax
    if viscosity > 0.0:
        dt = min(dt, 0.25 * grid.dx ** 2 / viscosity)
    return float(min(max(dt, dt_min), dt_max))


class Simulation:
    """One scene advanced by one method.

    ``history`` (a :class:`BufferHistory`) logs the buffer integrands of the
    fluid particles for an independent re-summation check.
    """

    def __init__(self, cfg: SimConfig, scene: Scene = None, history: BufferHistory = None):
        self.cfg = cfg
        self.scene = build_scene(cfg) if scene is None else scene
        self.grid = self.scene.grid
        self.fm = FlowMapConfig(cfg.n_reinit, cfg.n_reinit_narrowband, cfg.particles_per_cell, cfg.cfl)
        self.solver = PressureSolver(cfg.solver_rtol, cfg.solver_maxiter)
        self.history = history
        self.t = 0.0
        self.steps = 0
        self.last_dt = 0.0
        self.substeps = 0
        self.solid = self.scene.solid
        self.coupler = self.scene.ibm
        if self.coupler is not None:
            self.coupler.rho = self.scene.rho_f
            self.coupler.gravity = tuple(self.scene.gravity)
        self.fluid = None
        self.narrowband = None
        self._next_id = 0
        self.method = cfg.method
        self.uses_particles = self.method != "euler_sl"
        self._inflow = any(getattr(self.grid.bc, s).kind == INFLOW for s in ("left", "right", "bottom", "top"))
        apply_velocity_bc(self.grid)
        if self.solid is not None:
            self._update_density(with_fluid=False)
        # the initial state is projected so every written frame is divergence free
        self.solver.project(self.grid, 1.0)
        self.grid.pressure[:] = 0.0
        if self.solid is not None:
            sample_solid_velocity(self.solid, self.grid)

    # ------------------------------------------------------------------
    # particle bookkeeping

    def _ids(self, n):
        ids = np.arange(self._next_id, self._next_id + n, dtype=np.int64)
        self._next_id += n
        return ids

    def _occupancy(self):
        return self.solid.occupancy(self.grid) if self.solid is not None else None

    def _reinit(self):
        occ = self._occupancy()
        p = reinitialize_fluid(self.grid, self.fm, self.scene.rho_f, occ, self.cfg.seed, self.steps)
        p.ids = self._ids(len(p))
        if self.method == "apic_midpoint":
            p.vel, p.grad = g2p_gradient(self.grid, p.x)
        self.fluid = p
        if self.history is not None:
            self.history.clear()

    def _reinit_narrowband(self):
        occ = self._occupancy()
        nb = resample_narrowband(self.solid, self.grid, occ, self.scene.rho_f, self.cfg.particles_per_cell)
        if self.method == "apic_midpoint":
            nb.vel, nb.grad = g2p_gradient(self.grid, nb.x)
        self.narrowband = nb
        self.fluid = cull_fluid_in_solid(self.fluid, occ, self.grid.dx)

    def _refill_empty_cells(self):
        """Seed fresh flow maps into fluid cells left empty (e.g. behind an inflow boundary)."""
        g = self.grid
        count = np.zeros((g.nx, g.ny), dtype=np.int64)
        x = self.fluid.x
        if len(x):
            i = np.clip((x[:, 0] / g.dx).astype(np.int64), 0, g.nx - 1)
            j = np.clip((x[:, 1] / g.dx).astype(np.int64), 0, g.ny - 1)
            np.add.at(count, (i, j), 1)
        empty = count == 0
        occ = self._occupancy()
        if occ is not None:
            empty &= ~occ
        if not empty.any():
            return
        pos = seed_positions(empty, self.cfg.particles_per_cell, g.dx, self.cfg.seed, 1_000_000 + self.steps)
        p = FluidParticles.empty(len(pos))
        p.x = pos
        p.m_a = g2p_velocity(g, pos)
        p.vel = p.m_a.copy()
        if self.method == "apic_midpoint":
            p.vel, p.grad = g2p_gradient(g, pos)
        p.rho[:] = self.scene.rho_f
        p.mass[:] = self.scene.rho_f * g.dx ** 2 / self.cfg.particles_per_cell
        p.ids = self._ids(len(pos))
        self.fluid = FluidParticles.concat([self.fluid, p])

    def _update_density(self, with_fluid=True):
        pops = []
        if with_fluid:
            for p in (self.fluid, self.narrowband):
                if p is not None and len(p):
                    m = p.p2g_mass
                    pops.append((p.x, m, m / p.rho))
        s = self.solid
        if s is not None:
            pops.append((s.x, s.mass, s.vol0))
        transfer_density(self.grid, pops)

    # ------------------------------------------------------------------
    # forces

    def _body_accel(self, grid, fluid_fraction=None):
        """Gravity everywhere, buoyancy on the fluid share of each face."""
        g = self.scene.gravity
        b = self.scene.buoyancy
        au = np.full_like(grid.u, g[0])
        av = np.full_like(grid.v, g[1])
        if np.any(b):
            fu, fv = (1.0, 1.0) if fluid_fraction is None else fluid_fraction
            au += b[0] * fu
            av += b[1] * fv
        return au, av

    def _viscous_accel(self, grid, u, v):
        nu = self.scene.viscosity
        if nu == 0.0:
            return np.zeros_like(u), np.zeros_like(v)
        lu, lv = laplacian_faces(grid, u, v)
        return nu * lu, nu * lv

    # ------------------------------------------------------------------
    # midpoint

    def _midpoint_grid_only(self, dt):
        """Semi-Lagrangian half step plus forces and (for IBM) the first solid half."""
        h = 0.5 * dt
        g = self.grid
        mid = g.copy()
        mid.u, mid.v = semi_lagrangian(g, h)
        au, av = self._body_accel(mid)
        vu, vv = self._viscous_accel(g, g.u, g.v)
        mid.u += h * (au + vu)
        mid.v += h * (av + vv)
        if self.coupler is not None:
            self.coupler.march(g, h)
            self.coupler.apply(mid, h)
        apply_velocity_bc(mid)
        self.solver.project(mid, h)
        return mid

    def _midpoint_mpm(self, dt, nsub, dt_s):
        """First half of the solid substeps, then a joint P2G at the half step.

        Fluid particles are moved to their half-step positions through the
        velocity at the start of the step and carry the values sampled there.
        """
        h = 0.5 * dt
        g = self.grid
        sub = g.copy()
        mpm_substeps(sub, self.solid, self.narrowband, dt_s, nsub // 2, self.t)
        self.substeps += nsub // 2
        acc = TransferAccumulator(g)
        if self.fluid is not None and len(self.fluid):
            f = self.fluid
            vel, grad = g2p_gradient(g, f.x)
            xh, valid = march_positions(f, g, h)
            acc.add(xh, vel, grad, np.where(valid, f.mass, 0.0))
        nb = self.narrowband
        if nb is not None and len(nb):
            v, G = g2p_gradient(sub, nb.x)
            acc.add(nb.x, v, G, nb.p2g_mass)
        s = self.solid
        sample_solid_velocity(s, sub)
        acc.add(s.x, s.v, s.C, s.mass)
        mid = g.copy()
        mid.u, mid.v, _, _ = acc.finish(sub.u, sub.v)
        au, av = self._body_accel(mid)
        vu, vv = self._viscous_accel(mid, mid.u, mid.v)
        mid.u += h * (au + vu)
        mid.v += h * (av + vv)
        apply_velocity_bc(mid)
        self.solver.project(mid, h)
        return mid

    # ------------------------------------------------------------------
    # step

    def step(self, dt=None):
        cfg = self.cfg
        g = self.grid
        backend = cfg.backend
        if self.uses_particles:
            if self.fluid is None or self.steps % cfg.n_reinit == 0:
                self._reinit()
            elif self._inflow:
                self._refill_empty_cells()
            if backend == "mpm" and (self.narrowband is None or self.steps % cfg.n_reinit_narrowband == 0):
                self._reinit_narrowband()
        if dt is None:
            dt = cfg.fixed_dt or compute_dt(g, cfg.cfl, cfg.dt_min, cfg.dt_max,
                                            viscosity=self.scene.viscosity)
        self.last_dt = dt
        nsub, dt_s = 0, 0.0
        if backend == "mpm":
            vmax = float(np.abs(self.solid.v).max(initial=0.0))
            dt_s, nsub = solid_dt_and_substeps(self.solid.material, g.dx, dt, vmax,
                                               cfg.solid_cfl_sound, cfg.solid_cfl_velocity)

        # midpoint velocity
        if backend == "mpm":
            u_mid = self._midpoint_mpm(dt, nsub, dt_s)
        else:
            u_mid = self._midpoint_grid_only(dt)

        # transport
        if self.uses_particles and len(self.fluid):
            march_particles(self.fluid, u_mid, dt, with_maps=self.method != "apic_midpoint")
            # particles past an outflow side are already excluded from P2G; compact now and then
            if self.steps % 5 == 4:
                self.fluid = remove_outflow(self.fluid, g)

        # second solid half
        sub = None
        if backend == "mpm":
            sub = u_mid.copy()
            mpm_substeps(sub, self.solid, self.narrowband, dt_s, nsub - nsub // 2, self.t + 0.5 * dt)
            self.substeps += nsub - nsub // 2
            sample_solid_velocity(self.solid, sub)
            if self.narrowband is not None and len(self.narrowband):
                self.narrowband = remove_outflow(self.narrowband, g)
        elif backend == "ibm":
            self.coupler.march(u_mid, 0.5 * dt)

        # velocity before forces
        acc = None
        fluid_fraction = None
        if self.method == "euler_sl":
            u_b = g.copy()
            g.u, g.v = semi_lagrangian(u_b, dt, velocity=u_mid)
        else:
            pops = [p for p in (self.fluid, self.narrowband) if p is not None and len(p)]
            # g still holds the previous step's velocity here
            ke_grid = u_mid if cfg.kinetic_velocity == "mid" else g
            for p in pops:
                if self.method == "pfm":
                    convert(p, u_mid, dt, kinetic_grid=ke_grid)
                elif self.method == "direct_hfmc":
                    convert(p, u_mid, dt, with_buffers=False, with_kinetic=False)
                # apic_midpoint keeps the vel/grad sampled after the last projection
            acc = TransferAccumulator(g)
            for p in pops:
                acc.add(p.x, p.vel, p.grad, p.p2g_mass)
            if np.any(self.scene.buoyancy) and self.solid is not None:
                fluid_fraction = (acc.wu.copy(), acc.wv.copy())
            if self.solid is not None:
                s = self.solid
                acc.add(s.x, s.v, s.C, s.mass)
            u, v, au_, av_ = acc.finish(u_mid.u, u_mid.v)
            g.u[:] = u
            g.v[:] = v
            if fluid_fraction is not None:
                fluid_fraction = (fluid_fraction[0] / np.maximum(acc.wu, 1e-300),
                                  fluid_fraction[1] / np.maximum(acc.wv, 1e-300))
            self._check_resolution(au_, av_)
            if self.solid is not None:
                self._update_density()

        # external and coupling forces
        fu, fv = self._body_accel(g, fluid_fraction)
        if self.method == "pfm":
            # viscosity acts on the transferred impulse; the gradient part is projected away
            mc = TransferAccumulator(g)
            for p in (self.fluid, self.narrowband):
                if p is not None and len(p):
                    mc.add(p.x, map_impulse(p.m_a, p.T), p.grad, p.p2g_mass)
            mu_, mv_, _, _ = mc.finish(g.u, g.v)
            vu, vv = self._viscous_accel(g, mu_, mv_)
        else:
            vu, vv = self._viscous_accel(g, g.u, g.v)
        fu += vu
        fv += vv
        g.u += dt * fu
        g.v += dt * fv
        apply_velocity_bc(g)
        if backend == "ibm":
            cu, cv = self.coupler.apply(g, dt)
            fu += cu
            fv += cv
        u_star = (g.u.copy(), g.v.copy())

        self.solver.project(g, dt)

        # buffers
        if self.method == "pfm":
            accel_p = ((u_star[0] - g.u) / dt, (u_star[1] - g.v) / dt)
            for p, hist in ((self.fluid, self.history), (self.narrowband, None)):
                if p is not None and len(p):
                    update_buffers(p, g, accel_p, (fu, fv), dt, hist,
                                   kinetic_grid=u_mid if cfg.kinetic_velocity == "mid" else None)
        elif self.method == "apic_midpoint":
            for p in (self.fluid, self.narrowband):
                if p is not None and len(p):
                    p.vel, p.grad = g2p_gradient(g, p.x)

        if self.solid is not None:
            sample_solid_velocity(self.solid, g)
        self.t += dt
        self.steps += 1
        if not (np.isfinite(g.u).all() and np.isfinite(g.v).all()):
            raise SimulationError(f"non-finite velocity at step {self.steps} (t = {self.t:.6g})")
        return dt

    def _check_resolution(self, au, av):
        """Warn when faces away from solids and boundaries got no particle weight."""
        inner_u = ~au[1:-1]
        inner_v = ~av[:, 1:-1]
        if self.solid is not None:
            occ = self._occupancy()
            near = occ.copy()
            near[1:] |= occ[:-1]
            near[:-1] |= occ[1:]
            near[:, 1:] |= occ[:, :-1]
            near[:, :-1] |= occ[:, 1:]
            inner_u &= ~(near[1:] | near[:-1])
            inner_v &= ~(near[:, 1:] | near[:, :-1])
        n = int(inner_u.sum() + inner_v.sum())
        if n:
            warnings.warn(f"{n} interior faces received no particle weight at step {self.steps}",
                          UnderResolved)
        return n

    # ------------------------------------------------------------------
    # measurements

    def solid_com(self):
        if self.solid is not None:
            return self.solid.center_of_mass()
        if self.coupler is not None:
            return self.coupler.mesh.center_of_mass()
        return np.zeros(2)

    def kinetic_energy(self):
        from .diagnostics import kinetic_energy
        return kinetic_energy(self.grid)


def run(cfg: SimConfig, out_dir=None, history=None, callback=None):
    """Run ``cfg.frames`` frames of ``cfg.output.stride`` steps and write artifacts.

    Writes ``trace.csv`` (one row per frame including t = 0), ``divergence.csv``,
    vorticity images and optional MACG dumps.  Returns the :class:`Simulation`.
    ``callback(sim)`` is invoked after every step.
    """
    validate(cfg)
    out = out_dir or cfg.output.directory
    os.makedirs(out, exist_ok=True)
    sim = Simulation(cfg, history=history)
    tracer = SolidTracer()
    vmax = cfg.output.vort_max

    def emit(trace, divs, frame):
        w = vorticity(sim.grid)
        row = tracer.record(sim.t, sim.solid_com())
        trace.write(frame_row(sim.t, row[1:3], row[3:5], sim.grid, w))
        ds = divergence_stats(sim.grid)
        divs.write((frame, sim.t, ds["max_div"], ds["mean_abs_div"], ds["l2_div"]))
        if cfg.output.images:
            write_pgm(os.path.join(out, f"vort_{frame:05d}.pgm"), w, vmax)
        if cfg.output.dump_grids:
            dump_grid(sim.grid, os.path.join(out, f"grid_{frame:05d}.macg"))

    with CsvWriter(os.path.join(out, "trace.csv"), TRACE_COLUMNS) as trace, \
            CsvWriter(os.path.join(out, "divergence.csv"),
                      ("frame", "t", "max_div", "mean_abs_div", "l2_div")) as divs:
        emit(trace, divs, 0)
        for frame in range(1, cfg.frames + 1):
            for _ in range(cfg.output.stride):
                try:
                    sim.step()
                except SimulationError:
                    dump_grid(sim.grid, os.path.join(out, "failure.macg"))
                    raise
                if callback is not None:
                    callback(sim)
            emit(trace, divs, frame)
            log.info("frame %d t=%.4f dt=%.3g", frame, sim.t, sim.last_dt)
    return sim


def clone_config(cfg: SimConfig, **kw) -> SimConfig:
    return validate(copy.deepcopy(cfg).replace(**kw))
