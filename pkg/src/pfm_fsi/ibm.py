"""Immersed-boundary coupling: cosine delta kernel, spreading/interpolation and thin Lagrangian solids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import OutOfDomain, UnstableSubstep
from .grid import MacGrid, U_OFFSET, V_OFFSET


def delta_phi(r):
    """phi(r) = (1 + cos(pi r / 2)) / 4 for |r| <= 2, else 0."""
    r = np.asarray(r, dtype=np.float64)
    out = np.where(np.abs(r) <= 2.0, 0.25 * (1.0 + np.cos(0.5 * np.pi * r)), 0.0)
    return out if out.ndim else float(out)


@njit(inline="always", cache=True)
def _phi(r):
    if abs(r) >= 2.0:
        return 0.0
    return 0.25 * (1.0 + math.cos(0.5 * math.pi * r))


@njit(cache=True)
def _spread(arr, X, f, dV, ox, oy, dx, perx, pery, pnx, pny):
    nxn, nyn = arr.shape
    inv = 1.0 / dx
    scale = inv * inv
    for k in range(X.shape[0]):
        gx = X[k, 0] * inv - ox
        gy = X[k, 1] * inv - oy
        i0 = int(math.floor(gx)) - 1
        j0 = int(math.floor(gy)) - 1
        for a in range(4):
            ii = i0 + a
            wx = _phi(gx - ii)
            if wx == 0.0:
                continue
            if perx:
                ii %= pnx
            elif ii < 0 or ii >= nxn:
                continue
            for b in range(4):
                jj = j0 + b
                wy = _phi(gy - jj)
                if wy == 0.0:
                    continue
                if pery:
                    jj %= pny
                elif jj < 0 or jj >= nyn:
                    continue
                arr[ii, jj] += f[k] * dV[k] * wx * wy * scale


@njit(cache=True)
def _interp(arr, X, out, ox, oy, dx, perx, pery, pnx, pny):
    nxn, nyn = arr.shape
    inv = 1.0 / dx
    for k in range(X.shape[0]):
        gx = X[k, 0] * inv - ox
        gy = X[k, 1] * inv - oy
        i0 = int(math.floor(gx)) - 1
        j0 = int(math.floor(gy)) - 1
        acc = 0.0
        for a in range(4):
            ii = i0 + a
            wx = _phi(gx - ii)
            if wx == 0.0:
                continue
            if perx:
                ii %= pnx
            elif ii < 0 or ii >= nxn:
                continue
            for b in range(4):
                jj = j0 + b
                wy = _phi(gy - jj)
                if wy == 0.0:
                    continue
                if pery:
                    jj %= pny
                elif jj < 0 or jj >= nyn:
                    continue
                acc += arr[ii, jj] * wx * wy
        out[k] = acc


def _check_inside(grid: MacGrid, X):
    Lx, Ly = grid.size
    px, py = grid.periodic
    pad = 2.0 * grid.dx
    X = np.atleast_2d(X)
    bad = np.zeros(len(X), dtype=bool)
    if not px:
        bad |= (X[:, 0] < pad) | (X[:, 0] > Lx - pad)
    if not py:
        bad |= (X[:, 1] < pad) | (X[:, 1] > Ly - pad)
    if bad.any():
        raise OutOfDomain(f"{int(bad.sum())} IBM vertices within 2dx of a non-periodic boundary")


def spread_force(grid: MacGrid, X, f, dV, check=True):
    """Spread vertex forces onto faces: f_grid = sum_k f_k delta_h(x - X_k) dV_k.

    Returns face arrays ``(fu, fv)`` (force per unit area).
    """
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    dV = np.broadcast_to(np.asarray(dV, dtype=np.float64), (len(X),)).copy()
    if check:
        _check_inside(grid, X)
    px, py = grid.periodic
    fu = np.zeros_like(grid.u)
    fv = np.zeros_like(grid.v)
    _spread(fu, X, np.ascontiguousarray(f[:, 0]), dV, *U_OFFSET, grid.dx, px, py, grid.nx, grid.ny)
    _spread(fv, X, np.ascontiguousarray(f[:, 1]), dV, *V_OFFSET, grid.dx, px, py, grid.nx, grid.ny)
    if px:
        fu[-1] = fu[0]
    if py:
        fv[:, -1] = fv[:, 0]
    return fu, fv


def interpolate_to_solid(grid: MacGrid, X, u=None, v=None, check=True):
    """U_k = sum_faces u delta_h(x - X_k) dx^2."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    if check:
        _check_inside(grid, X)
    px, py = grid.periodic
    out = np.empty((len(X), 2))
    tmp = np.empty(len(X))
    _interp(grid.u if u is None else u, X, tmp, *U_OFFSET, grid.dx, px, py, grid.nx, grid.ny)
    out[:, 0] = tmp
    _interp(grid.v if v is None else v, X, tmp, *V_OFFSET, grid.dx, px, py, grid.nx, grid.ny)
    out[:, 1] = tmp
    return out


def coupling_force(u_before, u_after, dt, rho=1.0):
    """f = rho (u_after - u_before) / dt per vertex."""
    return rho * (np.asarray(u_after) - np.asarray(u_before)) / dt


# ---------------------------------------------------------------------------
# Lagrangian mesh

@dataclass
class IbmMesh:
    x: np.ndarray
    v: np.ndarray
    mass: np.ndarray
    edges: np.ndarray           # (m, 2) int
    rest: np.ndarray            # (m,)
    edge_compliance: np.ndarray
    bends: np.ndarray = None    # (k, 3) int, consecutive vertex triples
    bend_rest: np.ndarray = None
    bend_compliance: np.ndarray = None
    pinned: np.ndarray = None   # bool per vertex
    stiffness: float = 0.0      # Hookean spring constant for the mass-spring model
    bend_stiffness: float = 0.0
    damping: float = 0.0
    dV: np.ndarray = None       # quadrature volume per vertex for spreading
    solver: str = "xpbd"

    def __post_init__(self):
        n = len(self.x)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.v = np.zeros((n, 2)) if self.v is None else np.asarray(self.v, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.pinned is None:
            self.pinned = np.zeros(n, dtype=bool)
        if self.bends is None:
            self.bends = np.zeros((0, 3), dtype=np.int64)
            self.bend_rest = np.zeros(0)
            self.bend_compliance = np.zeros(0)
        if np.any(np.asarray(self.rest) <= 0.0):
            raise ValueError("edge rest lengths must be positive")
        if self.dV is None:
            self.dV = np.ones(n)

    def __len__(self):
        return len(self.x)

    @property
    def inv_mass(self):
        return np.where(self.pinned, 0.0, 1.0 / self.mass)

    def edge_lengths(self):
        d = self.x[self.edges[:, 1]] - self.x[self.edges[:, 0]]
        return np.linalg.norm(d, axis=1)

    def bend_angles(self):
        return _angles(self.x, self.bends)

    def center_of_mass(self):
        return (self.x * self.mass[:, None]).sum(0) / self.mass.sum()

    def momentum(self):
        return (self.v * self.mass[:, None]).sum(0)

    def copy(self):
        return IbmMesh(self.x.copy(), self.v.copy(), self.mass.copy(), self.edges.copy(),
                       np.array(self.rest, dtype=np.float64), np.array(self.edge_compliance, dtype=np.float64),
                       self.bends.copy(), np.array(self.bend_rest), np.array(self.bend_compliance),
                       self.pinned.copy(), self.stiffness, self.bend_stiffness, self.damping,
                       self.dV.copy(), self.solver)


def _angles(x, bends):
    if len(bends) == 0:
        return np.zeros(0)
    e1 = x[bends[:, 1]] - x[bends[:, 0]]
    e2 = x[bends[:, 2]] - x[bends[:, 1]]
    return np.arctan2(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0], (e1 * e2).sum(1))


def chain_mesh(points, mass_per_length, pinned=(), compliance=0.0, bend_compliance=1e-4,
               stiffness=0.0, bend_stiffness=0.0, thickness=None, solver="xpbd", damping=0.0):
    """Open polyline with edge and bending constraints; masses from a uniform line density."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    seg = np.linalg.norm(np.diff(x, axis=0), axis=1)
    share = np.zeros(n)
    share[:-1] += 0.5 * seg
    share[1:] += 0.5 * seg
    mass = mass_per_length * share
    bends = np.column_stack([np.arange(n - 2), np.arange(1, n - 1), np.arange(2, n)]) if n > 2 \
        else np.zeros((0, 3), dtype=np.int64)
    pin = np.zeros(n, dtype=bool)
    pin[list(pinned)] = True
    dV = share * (thickness if thickness is not None else 1.0)
    mesh = IbmMesh(x, None, mass, edges, seg, np.full(n - 1, compliance), bends,
                   _angles(x, bends), np.full(len(bends), bend_compliance), pin, stiffness,
                   bend_stiffness, damping, dV, solver)
    return mesh


def ring_mesh(center, radius, n, mass_per_length=1.0, pinned=True, thickness=None,
              compliance=0.0, stiffness=0.0):
    """Closed polygon (e.g. a fixed cylinder boundary)."""
    th = 2.0 * np.pi * np.arange(n) / n
    x = np.asarray(center) + radius * np.column_stack([np.cos(th), np.sin(th)])
    edges = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    seg = np.full(n, 2.0 * radius * np.sin(np.pi / n))
    pin = np.full(n, bool(pinned))
    dV = seg * (thickness if thickness is not None else 1.0)
    return IbmMesh(x, None, mass_per_length * seg, edges, seg, np.full(n, compliance),
                   pinned=pin, stiffness=stiffness, dV=dV)


def merge_meshes(meshes):
    offs = np.cumsum([0] + [len(m) for m in meshes[:-1]])
    cat = np.concatenate
    first = meshes[0]
    return IbmMesh(cat([m.x for m in meshes]), cat([m.v for m in meshes]), cat([m.mass for m in meshes]),
                   cat([m.edges + o for m, o in zip(meshes, offs)]),
                   cat([np.asarray(m.rest, dtype=np.float64) for m in meshes]),
                   cat([np.asarray(m.edge_compliance, dtype=np.float64) for m in meshes]),
                   cat([m.bends + o for m, o in zip(meshes, offs)]),
                   cat([np.asarray(m.bend_rest, dtype=np.float64) for m in meshes]),
                   cat([np.asarray(m.bend_compliance, dtype=np.float64) for m in meshes]),
                   cat([m.pinned for m in meshes]), first.stiffness, first.bend_stiffness,
                   first.damping, cat([m.dV for m in meshes]), first.solver)


def load_mesh(path, mass_per_length=1.0, **kw):
    """Read the line format ``v x y`` / ``e i j`` / ``p i`` (0-based indices)."""
    verts, edges, pins = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag, args = parts[0], parts[1:]
            try:
                if tag == "v":
                    verts.append((float(args[0]), float(args[1])))
                elif tag == "e":
                    edges.append((int(args[0]), int(args[1])))
                elif tag == "p":
                    pins.append(int(args[0]))
                else:
                    raise ValueError(f"unknown record {tag!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    x = np.array(verts, dtype=np.float64)
    e = np.array(edges, dtype=np.int64).reshape(-1, 2)
    rest = np.linalg.norm(x[e[:, 1]] - x[e[:, 0]], axis=1)
    share = np.zeros(len(x))
    np.add.at(share, e[:, 0], 0.5 * rest)
    np.add.at(share, e[:, 1], 0.5 * rest)
    pin = np.zeros(len(x), dtype=bool)
    pin[pins] = True
    return IbmMesh(x, None, mass_per_length * np.maximum(share, 1e-12), e, rest,
                   np.full(len(e), kw.get("compliance", 0.0)), pinned=pin,
                   stiffness=kw.get("stiffness", 0.0), dV=np.maximum(share, 1e-12))


def save_mesh(mesh: IbmMesh, path):
    with open(path, "w") as fh:
        for x, y in mesh.x:
            fh.write(f"v {x:.17g} {y:.17g}\n")
        for i, j in mesh.edges:
            fh.write(f"e {i} {j}\n")
        for i in np.nonzero(mesh.pinned)[0]:
            fh.write(f"p {i}\n")


# ---------------------------------------------------------------------------
# solids

@njit(cache=True)
def _xpbd_project(x, w, edges, rest, alpha_e, bends, bend_rest, alpha_b, iterations, residuals):
    lam_e = np.zeros(edges.shape[0])
    lam_b = np.zeros(bends.shape[0])
    for it in range(iterations):
        for c in range(edges.shape[0]):
            i = edges[c, 0]
            j = edges[c, 1]
            dx = x[j, 0] - x[i, 0]
            dy = x[j, 1] - x[i, 1]
            L = math.sqrt(dx * dx + dy * dy)
            if L < 1e-15:
                continue
            C = L - rest[c]
            wsum = w[i] + w[j]
            if wsum == 0.0:
                continue
            nx_ = dx / L
            ny_ = dy / L
            dlam = (-C - alpha_e[c] * lam_e[c]) / (wsum + alpha_e[c])
            lam_e[c] += dlam
            x[i, 0] -= w[i] * dlam * nx_
            x[i, 1] -= w[i] * dlam * ny_
            x[j, 0] += w[j] * dlam * nx_
            x[j, 1] += w[j] * dlam * ny_
        for c in range(bends.shape[0]):
            a = bends[c, 0]
            b = bends[c, 1]
            d = bends[c, 2]
            e1x = x[b, 0] - x[a, 0]
            e1y = x[b, 1] - x[a, 1]
            e2x = x[d, 0] - x[b, 0]
            e2y = x[d, 1] - x[b, 1]
            l1 = e1x * e1x + e1y * e1y
            l2 = e2x * e2x + e2y * e2y
            if l1 < 1e-30 or l2 < 1e-30:
                continue
            ang = math.atan2(e1x * e2y - e1y * e2x, e1x * e2x + e1y * e2y)
            C = ang - bend_rest[c]
            C = (C + math.pi) % (2.0 * math.pi) - math.pi
            # d(angle)/d(edge) = perp(e) / |e|^2
            g1x = -e1y / l1
            g1y = e1x / l1
            g2x = -e2y / l2
            g2y = e2x / l2
            ga_x, ga_y = g1x, g1y
            gb_x, gb_y = -g1x - g2x, -g1y - g2y
            gd_x, gd_y = g2x, g2y
            wsum = (w[a] * (ga_x * ga_x + ga_y * ga_y) + w[b] * (gb_x * gb_x + gb_y * gb_y)
                    + w[d] * (gd_x * gd_x + gd_y * gd_y))
            if wsum == 0.0:
                continue
            dlam = (-C - alpha_b[c] * lam_b[c]) / (wsum + alpha_b[c])
            lam_b[c] += dlam
            x[a, 0] += w[a] * dlam * ga_x
            x[a, 1] += w[a] * dlam * ga_y
            x[b, 0] += w[b] * dlam * gb_x
            x[b, 1] += w[b] * dlam * gb_y
            x[d, 0] += w[d] * dlam * gd_x
            x[d, 1] += w[d] * dlam * gd_y
        # edge residual after the full sweep
        res = 0.0
        for c in range(edges.shape[0]):
            dx = x[edges[c, 1], 0] - x[edges[c, 0], 0]
            dy = x[edges[c, 1], 1] - x[edges[c, 0], 1]
            res = max(res, abs(math.sqrt(dx * dx + dy * dy) - rest[c]) / rest[c])
        residuals[it] = res


def xpbd_substep(mesh: IbmMesh, dt_s, iterations=50, gravity=(0.0, 0.0), return_residuals=False):
    """Predict with forward Euler, project constraints (Gauss-Seidel XPBD), derive velocities."""
    w = mesh.inv_mass
    free = (w > 0.0)[:, None]
    x_old = mesh.x.copy()
    v = mesh.v + dt_s * np.asarray(gravity) * free
    x = np.ascontiguousarray(np.where(free, x_old + dt_s * v, x_old))
    residuals = np.zeros(iterations)
    _xpbd_project(x, w, mesh.edges, np.asarray(mesh.rest, dtype=np.float64),
                  np.asarray(mesh.edge_compliance, dtype=np.float64) / dt_s ** 2,
                  mesh.bends, np.asarray(mesh.bend_rest, dtype=np.float64),
                  np.asarray(mesh.bend_compliance, dtype=np.float64) / dt_s ** 2,
                  iterations, residuals)
    mesh.v = np.where(free, (x - x_old) / dt_s, 0.0)
    mesh.x = np.where(free, x, x_old)
    if return_residuals:
        return mesh, residuals
    return mesh


def spring_forces(mesh: IbmMesh):
    x = mesh.x
    f = np.zeros_like(x)
    e = mesh.edges
    if len(e) and mesh.stiffness:
        d = x[e[:, 1]] - x[e[:, 0]]
        L = np.linalg.norm(d, axis=1)
        fe = mesh.stiffness * (L - mesh.rest)[:, None] * d / np.maximum(L, 1e-15)[:, None]
        np.add.at(f, e[:, 0], fe)
        np.add.at(f, e[:, 1], -fe)
    if len(mesh.bends) and mesh.bend_stiffness:
        b = mesh.bends
        e1 = x[b[:, 1]] - x[b[:, 0]]
        e2 = x[b[:, 2]] - x[b[:, 1]]
        l1 = (e1 ** 2).sum(1)
        l2 = (e2 ** 2).sum(1)
        C = _angles(x, b) - mesh.bend_rest
        C = (C + np.pi) % (2 * np.pi) - np.pi
        g1 = np.column_stack([-e1[:, 1], e1[:, 0]]) / l1[:, None]
        g2 = np.column_stack([-e2[:, 1], e2[:, 0]]) / l2[:, None]
        k = -mesh.bend_stiffness * C[:, None]
        np.add.at(f, b[:, 0], k * g1)
        np.add.at(f, b[:, 1], k * (-g1 - g2))
        np.add.at(f, b[:, 2], k * g2)
    if mesh.damping and len(e):
        dv = mesh.v[e[:, 1]] - mesh.v[e[:, 0]]
        np.add.at(f, e[:, 0], mesh.damping * dv)
        np.add.at(f, e[:, 1], -mesh.damping * dv)
    return f


def mass_spring_substep(mesh: IbmMesh, dt_s, gravity=(0.0, 0.0), max_speed=1e3):
    """Explicit (symplectic) Euler step of a Hookean spring network; pinned vertices stay put."""
    free = (~mesh.pinned)[:, None]
    a = spring_forces(mesh) / mesh.mass[:, None] + np.asarray(gravity)
    v = np.where(free, mesh.v + dt_s * a, 0.0)
    speed = np.abs(v).max(initial=0.0)
    if not np.isfinite(speed) or speed > max_speed:
        k = max(mesh.stiffness, 1e-300)
        suggested = 0.5 * math.sqrt(mesh.mass.min() / k) if mesh.stiffness else dt_s / 2
        raise UnstableSubstep(f"mass-spring blowup (|v| = {speed:.3g}) at dt_s = {dt_s:g}", suggested)
    mesh.v = v
    mesh.x = np.where(free, mesh.x + dt_s * v, mesh.x)
    return mesh


def march_solid(mesh: IbmMesh, dt, dt_s=5e-4, iterations=50, gravity=(0.0, 0.0)):
    """Advance the mesh by ``dt`` in substeps of at most ``dt_s``."""
    n = max(1, int(math.ceil(dt / dt_s - 1e-12)))
    h = dt / n
    for _ in range(n):
        if mesh.solver == "xpbd":
            xpbd_substep(mesh, h, iterations, gravity)
        else:
            mass_spring_substep(mesh, h, gravity)
    return n


@dataclass
class IbmCoupler:
    """Direct-forcing exchange between a mesh and the grid.

    The solid starts each (half) step from the fluid velocity interpolated at its
    vertices, is marched by its own model, and the velocity mismatch is spread
    back as f = rho (U_solid - interp(u)) / dt.
    """

    mesh: IbmMesh
    dt_s: float = 5e-4
    iterations: int = 50
    gravity: tuple = (0.0, 0.0)
    forcing_iterations: int = 4
    rho: float = 1.0
    last_vertex_force: np.ndarray = None
    last_grid_force: tuple = None

    def march(self, grid: MacGrid, h):
        """Interpolate the fluid velocity onto the vertices, then march the solid by ``h``."""
        U = interpolate_to_solid(grid, self.mesh.x)
        self.mesh.v = np.where(self.mesh.pinned[:, None], 0.0, U)
        return march_solid(self.mesh, h, self.dt_s, self.iterations, self.gravity)

    def apply(self, grid: MacGrid, h, u=None, v=None):
        """Add the spread coupling force for an interval ``h`` into face arrays in place.

        Returns the face acceleration field (force per unit mass) that was applied.
        """
        u = grid.u if u is None else u
        v = grid.v if v is None else v
        au = np.zeros_like(u)
        av = np.zeros_like(v)
        total = np.zeros((len(self.mesh), 2))
        for _ in range(max(1, self.forcing_iterations)):
            U = interpolate_to_solid(grid, self.mesh.x, u, v)
            f = coupling_force(U, self.mesh.v, h, self.rho)
            fu, fv = spread_force(grid, self.mesh.x, f, self.mesh.dV)
            u += h * fu / self.rho
            v += h * fv / self.rho
            au += fu / self.rho
            av += fv / self.rho
            total += f
        self.last_vertex_force = total
        self.last_grid_force = (au * self.rho, av * self.rho)
        return au, av

    def third_law_error(self, grid: MacGrid):
        """|sum grid force - sum vertex force| / |sum vertex force| for the last apply()."""
        fu, fv = self.last_grid_force
        w = grid.dx ** 2
        ux = fu[:-1] if grid.bc.periodic_x else fu
        vy = fv[:, :-1] if grid.bc.periodic_y else fv
        F_grid = np.array([ux.sum() * w, vy.sum() * w])
        F_solid = (self.last_vertex_force * self.mesh.dV[:, None]).sum(0)
        return float(np.linalg.norm(F_grid - F_solid) / max(np.linalg.norm(F_solid), 1e-300))
