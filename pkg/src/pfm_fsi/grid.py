"""Staggered MAC grid, quadratic B-spline transfers and the pressure projection.

Layout: the domain is ``[0, nx*dx] x [0, ny*dx]``.  ``u`` lives on x-faces at
``(i*dx, (j+1/2)*dx)`` with shape ``(nx+1, ny)``, ``v`` on y-faces at
``((i+1/2)*dx, j*dx)`` with shape ``(nx, ny+1)``, pressure at cell centres with
shape ``(nx, ny)``.  All arrays are indexed ``[i, j]`` (x first).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

from .errors import OutOfDomain, SolverDiverged

try:
    import pyamg
except ImportError:  # pragma: no cover - optional accelerator
    pyamg = None

WALL, INFLOW, OUTFLOW, PERIODIC = "wall", "inflow", "outflow", "periodic"
SIDES = ("left", "right", "bottom", "top")

# face offsets in cell units: x-faces, y-faces, cell centres
U_OFFSET = (0.0, 0.5)
V_OFFSET = (0.5, 0.0)
C_OFFSET = (0.5, 0.5)


@dataclass(frozen=True)
class BoundaryCondition:
    kind: str = WALL
    value: float = 0.0  # inflow speed, positive into the domain

    def __post_init__(self):
        if self.kind not in (WALL, INFLOW, OUTFLOW, PERIODIC):
            raise ValueError(f"unknown boundary kind {self.kind!r}")


@dataclass(frozen=True)
class Boundaries:
    left: BoundaryCondition = BoundaryCondition()
    right: BoundaryCondition = BoundaryCondition()
    bottom: BoundaryCondition = BoundaryCondition()
    top: BoundaryCondition = BoundaryCondition()

    def __post_init__(self):
        if (self.left.kind == PERIODIC) != (self.right.kind == PERIODIC):
            raise ValueError("left/right must both be periodic or neither")
        if (self.bottom.kind == PERIODIC) != (self.top.kind == PERIODIC):
            raise ValueError("bottom/top must both be periodic or neither")

    @classmethod
    def periodic(cls):
        p = BoundaryCondition(PERIODIC)
        return cls(p, p, p, p)

    @classmethod
    def walls(cls):
        return cls()

    @property
    def periodic_x(self) -> bool:
        return self.left.kind == PERIODIC

    @property
    def periodic_y(self) -> bool:
        return self.bottom.kind == PERIODIC

    def has_dirichlet(self) -> bool:
        return any(getattr(self, s).kind == OUTFLOW for s in SIDES)


@dataclass
class MacGrid:
    nx: int
    ny: int
    dx: float
    bc: Boundaries = field(default_factory=Boundaries)
    ambient_density: float = 1.0
    u: np.ndarray = None
    v: np.ndarray = None
    rho_u: np.ndarray = None
    rho_v: np.ndarray = None
    pressure: np.ndarray = None

    def __post_init__(self):
        nx, ny = self.nx, self.ny
        if self.u is None:
            self.u = np.zeros((nx + 1, ny))
        if self.v is None:
            self.v = np.zeros((nx, ny + 1))
        if self.rho_u is None:
            self.rho_u = np.full((nx + 1, ny), float(self.ambient_density))
        if self.rho_v is None:
            self.rho_v = np.full((nx, ny + 1), float(self.ambient_density))
        if self.pressure is None:
            self.pressure = np.zeros((nx, ny))
        if self.u.shape != (nx + 1, ny) or self.v.shape != (nx, ny + 1):
            raise ValueError("face arrays do not match MAC staggering")

    @property
    def size(self):
        return self.nx * self.dx, self.ny * self.dx

    @property
    def periodic(self):
        return self.bc.periodic_x, self.bc.periodic_y

    def copy(self) -> "MacGrid":
        return MacGrid(self.nx, self.ny, self.dx, self.bc, self.ambient_density,
                       self.u.copy(), self.v.copy(), self.rho_u.copy(),
                       self.rho_v.copy(), self.pressure.copy())

    def like(self) -> "MacGrid":
        """Empty grid with the same geometry, boundaries and densities."""
        return MacGrid(self.nx, self.ny, self.dx, self.bc, self.ambient_density,
                       rho_u=self.rho_u.copy(), rho_v=self.rho_v.copy())

    def face_positions(self, axis):
        """World coordinates of the faces holding velocity component ``axis``."""
        ox, oy = U_OFFSET if axis == 0 else V_OFFSET
        arr = self.u if axis == 0 else self.v
        i = (np.arange(arr.shape[0]) + ox) * self.dx
        j = (np.arange(arr.shape[1]) + oy) * self.dx
        return np.meshgrid(i, j, indexing="ij")

    def cell_centers(self):
        i = (np.arange(self.nx) + 0.5) * self.dx
        j = (np.arange(self.ny) + 0.5) * self.dx
        return np.meshgrid(i, j, indexing="ij")

    def set_velocity(self, fn):
        """Fill faces from ``fn(x, y) -> (u, v)`` sampled at each face."""
        X, Y = self.face_positions(0)
        self.u[:] = fn(X, Y)[0]
        X, Y = self.face_positions(1)
        self.v[:] = fn(X, Y)[1]
        apply_velocity_bc(self)

    def max_speed(self) -> float:
        return float(max(np.abs(self.u).max(initial=0.0), np.abs(self.v).max(initial=0.0)))


# ---------------------------------------------------------------------------
# quadratic B-spline kernel

def quadratic_weight(r: float) -> float:
    """Quadratic B-spline N(r) with support |r| < 1.5 (r in cell units)."""
    a = abs(r)
    if a < 0.5:
        return 0.75 - a * a
    if a < 1.5:
        return 0.5 * (1.5 - a) ** 2
    return 0.0


@njit(inline="always", cache=True)
def _bspline(g):
    base = int(np.floor(g - 0.5))
    f = g - base
    w = (0.5 * (1.5 - f) ** 2, 0.75 - (f - 1.0) ** 2, 0.5 * (f - 0.5) ** 2)
    dw = (f - 1.5, -2.0 * (f - 1.0), f - 0.5)
    return base, w, dw


@njit(inline="always", cache=True)
def _wrap(i, n, periodic, period):
    if periodic:
        return i % period
    if i < 0:
        return 0
    if i > n - 1:
        return n - 1
    return i


@dataclass
class KernelStencil:
    base: tuple
    weights: np.ndarray    # (3, 3)
    gradients: np.ndarray  # (3, 3, 2), 1/length


def make_stencil(x, axis: int, grid: MacGrid) -> KernelStencil:
    """Quadratic weights and their gradients for the 3x3 face neighbourhood.

    ``axis`` selects x-faces (0), y-faces (1) or cell centres (2).  Positions
    closer than 2*dx to a non-periodic boundary raise :class:`OutOfDomain`.
    """
    ox, oy = (U_OFFSET, V_OFFSET, C_OFFSET)[axis]
    Lx, Ly = grid.size
    px, py = grid.periodic
    pad = 2.0 * grid.dx
    if (not px and not pad <= x[0] <= Lx - pad) or (not py and not pad <= x[1] <= Ly - pad):
        raise OutOfDomain(f"position {tuple(x)} outside padded interior")
    bx, wx, dwx = _bspline(x[0] / grid.dx - ox)
    by, wy, dwy = _bspline(x[1] / grid.dx - oy)
    wx, wy, dwx, dwy = map(np.asarray, (wx, wy, dwx, dwy))
    w = np.outer(wx, wy)
    grad = np.stack([np.outer(dwx, wy), np.outer(wx, dwy)], axis=-1) / grid.dx
    return KernelStencil((bx, by), w, grad)


# ---------------------------------------------------------------------------
# grid -> particle

@njit(inline="always", cache=True)
def _weights(g):
    """Quadratic B-spline base index, weights and derivatives, unrolled."""
    base = int(math.floor(g - 0.5))
    f = g - base
    return (base, 0.5 * (1.5 - f) ** 2, 0.75 - (f - 1.0) ** 2, 0.5 * (f - 0.5) ** 2,
            f - 1.5, -2.0 * (f - 1.0), f - 0.5)


@njit(inline="always", cache=True)
def _gather_index(b, n, periodic, period):
    """Three consecutive indices, wrapped or clamped (one modulo per axis)."""
    if periodic:
        i0 = b % period
        i1 = i0 + 1
        if i1 >= period:
            i1 -= period
        i2 = i1 + 1
        if i2 >= period:
            i2 -= period
        return i0, i1, i2
    return min(max(b, 0), n - 1), min(max(b + 1, 0), n - 1), min(max(b + 2, 0), n - 1)


@njit(inline="always", cache=True)
def _scatter_index(b, n, periodic, period):
    """Three consecutive indices, wrapped, or -1 where they fall off a non-periodic edge."""
    if periodic:
        return _gather_index(b, n, periodic, period)
    i0 = b if 0 <= b < n else -1
    i1 = b + 1 if 0 <= b + 1 < n else -1
    i2 = b + 2 if 0 <= b + 2 < n else -1
    return i0, i1, i2


@njit(inline="always", cache=True)
def _sample(arr, x, y, ox, oy, inv_dx, perx, pery, pnx, pny):
    """Value and gradient of one staggered component at (x, y)."""
    nxn, nyn = arr.shape
    bx, wx0, wx1, wx2, dx0, dx1, dx2 = _weights(x * inv_dx - ox)
    by, wy0, wy1, wy2, dy0, dy1, dy2 = _weights(y * inv_dx - oy)
    i0, i1, i2 = _gather_index(bx, nxn, perx, pnx)
    j0, j1, j2 = _gather_index(by, nyn, pery, pny)
    a00, a01, a02 = arr[i0, j0], arr[i0, j1], arr[i0, j2]
    a10, a11, a12 = arr[i1, j0], arr[i1, j1], arr[i1, j2]
    a20, a21, a22 = arr[i2, j0], arr[i2, j1], arr[i2, j2]
    r0 = wy0 * a00 + wy1 * a01 + wy2 * a02
    r1 = wy0 * a10 + wy1 * a11 + wy2 * a12
    r2 = wy0 * a20 + wy1 * a21 + wy2 * a22
    s0 = dy0 * a00 + dy1 * a01 + dy2 * a02
    s1 = dy0 * a10 + dy1 * a11 + dy2 * a12
    s2 = dy0 * a20 + dy1 * a21 + dy2 * a22
    val = wx0 * r0 + wx1 * r1 + wx2 * r2
    gx = dx0 * r0 + dx1 * r1 + dx2 * r2
    gy = wx0 * s0 + wx1 * s1 + wx2 * s2
    return val, gx * inv_dx, gy * inv_dx


@njit(inline="always", cache=True)
def _sample_value(arr, x, y, ox, oy, inv_dx, perx, pery, pnx, pny):
    nxn, nyn = arr.shape
    bx, wx0, wx1, wx2, _, _, _ = _weights(x * inv_dx - ox)
    by, wy0, wy1, wy2, _, _, _ = _weights(y * inv_dx - oy)
    i0, i1, i2 = _gather_index(bx, nxn, perx, pnx)
    j0, j1, j2 = _gather_index(by, nyn, pery, pny)
    r0 = wy0 * arr[i0, j0] + wy1 * arr[i0, j1] + wy2 * arr[i0, j2]
    r1 = wy0 * arr[i1, j0] + wy1 * arr[i1, j1] + wy2 * arr[i1, j2]
    r2 = wy0 * arr[i2, j0] + wy1 * arr[i2, j1] + wy2 * arr[i2, j2]
    return wx0 * r0 + wx1 * r1 + wx2 * r2


@njit(inline="always", cache=True)
def _sample_vel_grad(u, v, x, y, inv_dx, perx, pery, nx, ny):
    ux, g00, g01 = _sample(u, x, y, 0.0, 0.5, inv_dx, perx, pery, nx, ny)
    uy, g10, g11 = _sample(v, x, y, 0.5, 0.0, inv_dx, perx, pery, nx, ny)
    return ux, uy, g00, g01, g10, g11


@njit(cache=True)
def _g2p_velocity(u, v, pos, inv_dx, perx, pery, nx, ny, out):
    for p in range(pos.shape[0]):
        out[p, 0] = _sample_value(u, pos[p, 0], pos[p, 1], 0.0, 0.5, inv_dx, perx, pery, nx, ny)
        out[p, 1] = _sample_value(v, pos[p, 0], pos[p, 1], 0.5, 0.0, inv_dx, perx, pery, nx, ny)


@njit(cache=True)
def _g2p_vel_grad(u, v, pos, inv_dx, perx, pery, nx, ny, vel, grad):
    for p in range(pos.shape[0]):
        ux, uy, g00, g01, g10, g11 = _sample_vel_grad(u, v, pos[p, 0], pos[p, 1],
                                                      inv_dx, perx, pery, nx, ny)
        vel[p, 0] = ux
        vel[p, 1] = uy
        grad[p, 0, 0] = g00
        grad[p, 0, 1] = g01
        grad[p, 1, 0] = g10
        grad[p, 1, 1] = g11


def _grid_args(grid):
    px, py = grid.periodic
    return 1.0 / grid.dx, px, py, grid.nx, grid.ny


def g2p_velocity(grid: MacGrid, x, u=None, v=None) -> np.ndarray:
    """Quadratic-kernel interpolation of face velocities to positions ``x`` (N, 2)."""
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    out = np.empty_like(x)
    _g2p_velocity(grid.u if u is None else u, grid.v if v is None else v, x,
                  *_grid_args(grid), out)
    return out


def g2p_gradient(grid: MacGrid, x, u=None, v=None):
    """Velocity and velocity gradient ``G[a, b] = d u_a / d x_b`` at positions ``x``."""
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    vel = np.empty_like(x)
    grad = np.empty((x.shape[0], 2, 2))
    _g2p_vel_grad(grid.u if u is None else u, grid.v if v is None else v, x,
                  *_grid_args(grid), vel, grad)
    return vel, grad


# ---------------------------------------------------------------------------
# particle -> grid

@njit(inline="always", cache=True)
def _scatter(arr, wsum, x, y, ox, oy, dx, inv_dx, perx, pery, pnx, pny,
             mass, val, gxx, gxy):
    nxn, nyn = arr.shape
    bx, wx0, wx1, wx2, _, _, _ = _weights(x * inv_dx - ox)
    by, wy0, wy1, wy2, _, _, _ = _weights(y * inv_dx - oy)
    ix = _scatter_index(bx, nxn, perx, pnx)
    iy = _scatter_index(by, nyn, pery, pny)
    wx = (wx0, wx1, wx2)
    wy = (wy0, wy1, wy2)
    for a in range(3):
        i = ix[a]
        if i < 0:
            continue
        xi = (bx + a + ox) * dx - x
        for b in range(3):
            j = iy[b]
            if j < 0:
                continue
            yi = (by + b + oy) * dx - y
            w = wx[a] * wy[b] * mass
            wsum[i, j] += w
            arr[i, j] += w * (val + gxx * xi + gxy * yi)


@njit(cache=True)
def _p2g(pos, vel, grad, mass, dx, perx, pery, nx, ny, u, v, wu, wv):
    inv_dx = 1.0 / dx
    for p in range(pos.shape[0]):
        m = mass[p]
        if m == 0.0:
            continue
        x = pos[p, 0]
        y = pos[p, 1]
        _scatter(u, wu, x, y, 0.0, 0.5, dx, inv_dx, perx, pery, nx, ny,
                 m, vel[p, 0], grad[p, 0, 0], grad[p, 0, 1])
        _scatter(v, wv, x, y, 0.5, 0.0, dx, inv_dx, perx, pery, nx, ny,
                 m, vel[p, 1], grad[p, 1, 0], grad[p, 1, 1])


@njit(cache=True)
def _p2g_cells(pos, mass, volume, dx, perx, pery, nx, ny, msum, vsum):
    inv_dx = 1.0 / dx
    for p in range(pos.shape[0]):
        bx, wx0, wx1, wx2, _, _, _ = _weights(pos[p, 0] * inv_dx - 0.5)
        by, wy0, wy1, wy2, _, _, _ = _weights(pos[p, 1] * inv_dx - 0.5)
        ix = _scatter_index(bx, nx, perx, nx)
        iy = _scatter_index(by, ny, pery, ny)
        wx = (wx0, wx1, wx2)
        wy = (wy0, wy1, wy2)
        for a in range(3):
            if ix[a] < 0:
                continue
            for b in range(3):
                if iy[b] < 0:
                    continue
                w = wx[a] * wy[b]
                msum[ix[a], iy[b]] += w * mass[p]
                vsum[ix[a], iy[b]] += w * volume[p]


class TransferAccumulator:
    """Mass-weighted APIC scatter onto the faces of ``grid``.

    Several particle populations can be added before :meth:`finish`
    normalises; faces that received no weight keep ``fallback`` values.
    """

    def __init__(self, grid: MacGrid):
        self.grid = grid
        self.u = np.zeros_like(grid.u)
        self.v = np.zeros_like(grid.v)
        self.wu = np.zeros_like(grid.u)
        self.wv = np.zeros_like(grid.v)

    def add(self, x, vel, grad=None, mass=None):
        n = len(x)
        if n == 0:
            return self
        if grad is None:
            grad = np.zeros((n, 2, 2))
        if mass is None:
            mass = np.ones(n)
        g = self.grid
        px, py = g.periodic
        _p2g(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(vel, dtype=np.float64),
             np.ascontiguousarray(grad, dtype=np.float64), np.ascontiguousarray(mass, dtype=np.float64),
             g.dx, px, py, g.nx, g.ny, self.u, self.v, self.wu, self.wv)
        return self

    def finish(self, fallback_u=None, fallback_v=None, eps=1e-12):
        """Return ``(u, v, active_u, active_v)`` with normalised face values."""
        g = self.grid
        px, py = g.periodic
        wu, wv = self.wu, self.wv
        if px:
            wu[g.nx] = wu[0]
            self.u[g.nx] = self.u[0]
        if py:
            wv[:, g.ny] = wv[:, 0]
            self.v[:, g.ny] = self.v[:, 0]
        scale = max(wu.max(initial=0.0), wv.max(initial=0.0), 1e-300)
        au = wu > eps * scale
        av = wv > eps * scale
        u = np.where(au, self.u / np.where(au, wu, 1.0), 0.0 if fallback_u is None else fallback_u)
        v = np.where(av, self.v / np.where(av, wv, 1.0), 0.0 if fallback_v is None else fallback_v)
        return u, v, au, av


def p2g(grid: MacGrid, x, vel, grad=None, mass=None, density=None, volume=None,
        fallback=True):
    """Transfer particle velocities (with affine gradients) onto ``grid`` in place.

    Face value = sum_p w m (v_p + G_p (x_i - x_p)) / sum_p w m.  With ``density``
    given, face densities are rebuilt as well (see :func:`transfer_density`).
    Returns the boolean masks of faces that received particle weight.
    """
    acc = TransferAccumulator(grid).add(x, vel, grad, mass)
    u, v, au, av = acc.finish(grid.u if fallback else None, grid.v if fallback else None)
    grid.u[:] = u
    grid.v[:] = v
    if density is not None:
        n = len(x)
        m = np.ones(n) if mass is None else np.asarray(mass, dtype=np.float64)
        vol = m / np.asarray(density, dtype=np.float64) if volume is None else volume
        transfer_density(grid, [(x, m, vol)])
    return au, av


def transfer_density(grid: MacGrid, populations):
    """Rebuild face densities from ``[(x, mass, volume), ...]``.

    Cell density = sum w m / sum w V; a face takes the arithmetic mean of its two
    cells; cells without particles fall back to the ambient density.
    """
    px, py = grid.periodic
    msum = np.zeros((grid.nx, grid.ny))
    vsum = np.zeros((grid.nx, grid.ny))
    for x, m, vol in populations:
        if len(x) == 0:
            continue
        _p2g_cells(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(m, dtype=np.float64),
                   np.ascontiguousarray(vol, dtype=np.float64), grid.dx, px, py, grid.nx, grid.ny, msum, vsum)
    covered = vsum > 1e-12 * max(vsum.max(initial=0.0), 1e-300)
    rho_c = np.where(covered, msum / np.where(covered, vsum, 1.0), grid.ambient_density)
    faces_from_cells(grid, rho_c)
    return rho_c


def faces_from_cells(grid: MacGrid, rho_c):
    px, py = grid.periodic
    ru = np.empty_like(grid.rho_u)
    ru[1:-1] = 0.5 * (rho_c[1:] + rho_c[:-1])
    if px:
        ru[0] = ru[-1] = 0.5 * (rho_c[0] + rho_c[-1])
    else:
        ru[0], ru[-1] = rho_c[0], rho_c[-1]
    rv = np.empty_like(grid.rho_v)
    rv[:, 1:-1] = 0.5 * (rho_c[:, 1:] + rho_c[:, :-1])
    if py:
        rv[:, 0] = rv[:, -1] = 0.5 * (rho_c[:, 0] + rho_c[:, -1])
    else:
        rv[:, 0], rv[:, -1] = rho_c[:, 0], rho_c[:, -1]
    grid.rho_u[:] = ru
    grid.rho_v[:] = rv


# ---------------------------------------------------------------------------
# bilinear sampling and semi-Lagrangian transport (grid-only paths)

@njit(inline="always", cache=True)
def _linear(arr, x, y, ox, oy, inv_dx, perx, pery, pnx, pny):
    nxn, nyn = arr.shape
    gx = x * inv_dx - ox
    gy = y * inv_dx - oy
    i0 = int(np.floor(gx))
    j0 = int(np.floor(gy))
    fx = gx - i0
    fy = gy - j0
    if not perx:
        if i0 < 0:
            i0, fx = 0, 0.0
        elif i0 >= nxn - 1:
            i0, fx = nxn - 2, 1.0
    if not pery:
        if j0 < 0:
            j0, fy = 0, 0.0
        elif j0 >= nyn - 1:
            j0, fy = nyn - 2, 1.0
    i1 = i0 + 1
    j1 = j0 + 1
    if perx:
        i0 %= pnx
        i1 %= pnx
    if pery:
        j0 %= pny
        j1 %= pny
    return ((1 - fx) * (1 - fy) * arr[i0, j0] + fx * (1 - fy) * arr[i1, j0]
            + (1 - fx) * fy * arr[i0, j1] + fx * fy * arr[i1, j1])


@njit(inline="always", cache=True)
def _linear_vel(u, v, x, y, inv_dx, perx, pery, nx, ny):
    return (_linear(u, x, y, 0.0, 0.5, inv_dx, perx, pery, nx, ny),
            _linear(v, x, y, 0.5, 0.0, inv_dx, perx, pery, nx, ny))


@njit(cache=True)
def _sl_component(src, u, v, out, ox, oy, h, dx, perx, pery, nx, ny):
    inv_dx = 1.0 / dx
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            x = (i + ox) * dx
            y = (j + oy) * dx
            k1x, k1y = _linear_vel(u, v, x, y, inv_dx, perx, pery, nx, ny)
            k2x, k2y = _linear_vel(u, v, x - 0.5 * h * k1x, y - 0.5 * h * k1y, inv_dx, perx, pery, nx, ny)
            k3x, k3y = _linear_vel(u, v, x - 0.5 * h * k2x, y - 0.5 * h * k2y, inv_dx, perx, pery, nx, ny)
            k4x, k4y = _linear_vel(u, v, x - h * k3x, y - h * k3y, inv_dx, perx, pery, nx, ny)
            bx = x - h * (k1x + 2 * k2x + 2 * k3x + k4x) / 6.0
            by = y - h * (k1y + 2 * k2y + 2 * k3y + k4y) / 6.0
            out[i, j] = _linear(src, bx, by, ox, oy, inv_dx, perx, pery, nx, ny)


def semi_lagrangian(grid: MacGrid, h: float, velocity: MacGrid = None):
    """RK4-backtraced bilinear advection of ``grid``'s velocity over time ``h``.

    The trajectory field is ``velocity`` (defaults to ``grid`` itself).
    Returns new ``(u, v)`` arrays; ``grid`` is untouched.
    """
    vel = grid if velocity is None else velocity
    px, py = grid.periodic
    u = np.empty_like(grid.u)
    v = np.empty_like(grid.v)
    _sl_component(grid.u, vel.u, vel.v, u, 0.0, 0.5, h, grid.dx, px, py, grid.nx, grid.ny)
    _sl_component(grid.v, vel.u, vel.v, v, 0.5, 0.0, h, grid.dx, px, py, grid.nx, grid.ny)
    return u, v


def sample_linear(grid: MacGrid, x):
    x = np.atleast_2d(x)
    out = np.empty_like(x, dtype=np.float64)
    px, py = grid.periodic
    for p in range(len(x)):
        out[p] = _linear_vel(grid.u, grid.v, x[p, 0], x[p, 1], 1.0 / grid.dx, px, py, grid.nx, grid.ny)
    return out


# ---------------------------------------------------------------------------
# boundary conditions, divergence, projection

def apply_velocity_bc(grid: MacGrid, u=None, v=None):
    """Impose prescribed normal velocities and sync periodic duplicates in place."""
    u = grid.u if u is None else u
    v = grid.v if v is None else v
    bc = grid.bc
    for side, arr, idx, sign in (("left", u, np.s_[0, :], 1.0), ("right", u, np.s_[-1, :], -1.0),
                                 ("bottom", v, np.s_[:, 0], 1.0), ("top", v, np.s_[:, -1], -1.0)):
        b = getattr(bc, side)
        if b.kind == WALL:
            arr[idx] = 0.0
        elif b.kind == INFLOW:
            arr[idx] = sign * b.value
    if bc.periodic_x:
        u[-1] = u[0]
    if bc.periodic_y:
        v[:, -1] = v[:, 0]
    return u, v


def divergence(grid: MacGrid, u=None, v=None) -> np.ndarray:
    u = grid.u if u is None else u
    v = grid.v if v is None else v
    return (u[1:] - u[:-1] + v[:, 1:] - v[:, :-1]) / grid.dx


def divergence_stats(grid: MacGrid) -> dict:
    d = divergence(grid)
    return {"max_div": float(np.abs(d).max()), "mean_abs_div": float(np.abs(d).mean()),
            "l2_div": float(np.sqrt(np.mean(d * d)))}


def _laplacian(grid: MacGrid, beta_u, beta_v):
    """Assemble sum_faces beta (p_c - p_nb) with Dirichlet-zero ghosts at outflows."""
    nx, ny = grid.nx, grid.ny
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, vals = [], [], []
    diag = np.zeros((nx, ny))

    def couple(a, b, beta):
        rows.extend([a.ravel(), b.ravel(), a.ravel(), b.ravel()])
        cols.extend([b.ravel(), a.ravel(), a.ravel(), b.ravel()])
        bt = beta.ravel()
        vals.extend([-bt, -bt, bt, bt])

    couple(idx[:-1, :], idx[1:, :], beta_u[1:-1, :])
    couple(idx[:, :-1], idx[:, 1:], beta_v[:, 1:-1])
    bc = grid.bc
    if bc.periodic_x:
        couple(idx[-1, :], idx[0, :], beta_u[0, :])
    else:
        if bc.left.kind == OUTFLOW:
            diag[0, :] += beta_u[0, :]
        if bc.right.kind == OUTFLOW:
            diag[-1, :] += beta_u[-1, :]
    if bc.periodic_y:
        couple(idx[:, -1], idx[:, 0], beta_v[:, 0])
    else:
        if bc.bottom.kind == OUTFLOW:
            diag[:, 0] += beta_v[:, 0]
        if bc.top.kind == OUTFLOW:
            diag[:, -1] += beta_v[:, -1]
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    n = nx * ny
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


class PressureSolver:
    """Preconditioned CG for the variable-density pressure Poisson problem.

    Matrices (and their AMG preconditioners) are cached per face-density field,
    so constant-density scenes assemble once.
    """

    def __init__(self, rtol=1e-6, maxiter=1000, use_amg=True):
        self.rtol = rtol
        self.maxiter = maxiter
        self.use_amg = use_amg and pyamg is not None
        self._key = None
        self._cache = None
        self.last_iterations = 0
        self.last_residual = 0.0

    def _system(self, grid):
        beta_u = 1.0 / grid.rho_u
        beta_v = 1.0 / grid.rho_v
        key = (grid.nx, grid.ny, grid.bc, beta_u.tobytes(), beta_v.tobytes())
        if key != self._key:
            A = _laplacian(grid, beta_u, beta_v)
            pinned = not grid.bc.has_dirichlet()
            if pinned:
                A = A[1:, 1:].tocsr()
            if self.use_amg:
                # pyamg draws its spectral-radius start vector from the global RNG
                state = np.random.get_state()
                np.random.seed(0)
                try:
                    ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric")
                finally:
                    np.random.set_state(state)
                M = ml.aspreconditioner(cycle="V")
            else:
                M = sp.diags(1.0 / A.diagonal())
            self._key = key
            self._cache = (A, M, pinned, beta_u, beta_v)
        return self._cache

    def project(self, grid: MacGrid, dt: float):
        """Make ``grid`` divergence free in place; returns the pressure."""
        apply_velocity_bc(grid)
        A, M, pinned, beta_u, beta_v = self._system(grid)
        b = (-divergence(grid) * grid.dx ** 2 / dt).ravel()
        x0 = grid.pressure.ravel()
        if pinned:
            b = b - b.mean()
            b, x0 = b[1:], x0[1:] - x0[0]
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            sol = np.zeros_like(b)
            self.last_iterations = 0
        else:
            count = [0]

            def cb(xk):
                count[0] += 1

            # residual of a round-off level divergence (1e-12 |u| / dx per cell) counts as solved
            floor = 1e-12 * grid.max_speed() * grid.dx / dt * math.sqrt(b.size)
            sol, info = spla.cg(A, b, x0=x0, rtol=self.rtol, atol=floor, maxiter=self.maxiter,
                                M=M, callback=cb)
            res = np.linalg.norm(b - A @ sol) / bnorm
            self.last_iterations = count[0]
            self.last_residual = res
            if info != 0 or not np.isfinite(res):
                raise SolverDiverged(f"pressure CG failed after {count[0]} iterations, "
                                     f"relative residual {res:.3e}", res, count[0])
        p = np.concatenate([[0.0], sol]) if pinned else sol
        p = p.reshape(grid.nx, grid.ny)
        _apply_pressure(grid, p, dt, beta_u, beta_v)
        grid.pressure[:] = p
        return p


def _apply_pressure(grid, p, dt, beta_u, beta_v):
    c = dt / grid.dx
    u, v, bc = grid.u, grid.v, grid.bc
    u[1:-1] -= c * beta_u[1:-1] * (p[1:] - p[:-1])
    v[:, 1:-1] -= c * beta_v[:, 1:-1] * (p[:, 1:] - p[:, :-1])
    if bc.periodic_x:
        u[0] -= c * beta_u[0] * (p[0] - p[-1])
        u[-1] = u[0]
    else:
        if bc.left.kind == OUTFLOW:
            u[0] -= c * beta_u[0] * p[0]
        if bc.right.kind == OUTFLOW:
            u[-1] += c * beta_u[-1] * p[-1]
    if bc.periodic_y:
        v[:, 0] -= c * beta_v[:, 0] * (p[:, 0] - p[:, -1])
        v[:, -1] = v[:, 0]
    else:
        if bc.bottom.kind == OUTFLOW:
            v[:, 0] -= c * beta_v[:, 0] * p[:, 0]
        if bc.top.kind == OUTFLOW:
            v[:, -1] += c * beta_v[:, -1] * p[:, -1]


_default_solver = PressureSolver()


def solve_projection(grid: MacGrid, dt: float, solver: PressureSolver = None):
    """Variable-density projection: div(1/rho grad p) = div(u*)/dt, u <- u* - dt/rho grad p.

    Modifies ``grid.u``, ``grid.v`` and ``grid.pressure`` in place and returns
    ``(u, v, pressure)``.  Raises :class:`SolverDiverged` on non-convergence.
    """
    (solver or _default_solver).project(grid, dt)
    return grid.u, grid.v, grid.pressure


# ---------------------------------------------------------------------------
# binary dump

_HEADER = struct.Struct("<4sIIId")
MAGIC = b"MACG"
VERSION = 1


def dump_grid(grid: MacGrid, path):
    """Write the MACG regression dump: header, then u, v, p as f64 with y as the row index."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, grid.nx, grid.ny, grid.dx))
        for arr in (grid.u, grid.v, grid.pressure):
            fh.write(np.ascontiguousarray(arr.T, dtype="<f8").tobytes())


def load_grid(path, bc: Boundaries = None) -> MacGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, version, nx, ny, dx = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a MACG dump")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported MACG version {version}")
    off = _HEADER.size
    arrays = []
    for shape in ((ny, nx + 1), (ny + 1, nx), (ny, nx)):
        n = shape[0] * shape[1]
        arrays.append(np.frombuffer(data, "<f8", n, off).reshape(shape).T.copy())
        off += 8 * n
    return MacGrid(nx, ny, dx, bc or Boundaries(), u=arrays[0], v=arrays[1], pressure=arrays[2])
