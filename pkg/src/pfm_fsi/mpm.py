"""MPM elastic solids: fixed-corotated stress, active strain, substepping and narrowband resampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import InvertedElement
from .flowmap import FluidParticles, hash_uniform
from .grid import (INFLOW, PERIODIC, WALL, MacGrid, _sample_vel_grad, _scatter_index, _weights,
                   g2p_velocity)

_EYE = np.eye(2)


@dataclass(frozen=True)
class Material:
    E: float = 5e3
    nu: float = 0.3
    rho: float = 15.0

    @property
    def lame(self):
        return lame(self.E, self.nu)

    @property
    def sound_speed(self):
        return math.sqrt(self.E / self.rho)


def lame(E, nu):
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def polar_rotation(F):
    """Rotation factor R of F = R S for 2x2 matrices (batched)."""
    F = np.asarray(F, dtype=np.float64)
    th = np.arctan2(F[..., 1, 0] - F[..., 0, 1], F[..., 0, 0] + F[..., 1, 1])
    c, s = np.cos(th), np.sin(th)
    R = np.empty(F.shape)
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    return R


def elastic_stress(F, material: Material):
    """Fixed-corotated first Piola stress P = 2 mu (F - R) + lam (J - 1) J F^-T.

    Inverted elements (det F <= 0) keep only the corotated term and raise an
    :class:`InvertedElement` warning.
    """
    F = np.asarray(F, dtype=np.float64)
    mu, lam = material.lame
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    R = polar_rotation(F)
    P = 2.0 * mu * (F - R)
    ok = J > 0.0
    if not np.all(ok):
        warnings.warn(f"{int(np.size(J) - np.count_nonzero(ok))} inverted element(s)", InvertedElement)
    # J F^-T is the cofactor matrix
    cof = np.empty(F.shape)
    cof[..., 0, 0] = F[..., 1, 1]
    cof[..., 0, 1] = -F[..., 1, 0]
    cof[..., 1, 0] = -F[..., 0, 1]
    cof[..., 1, 1] = F[..., 0, 0]
    scale = np.where(ok, lam * (J - 1.0), 0.0)
    return P + scale[..., None, None] * cof


def corotated_energy(F, material: Material):
    """Energy density mu |F - R|^2 + lam/2 (J - 1)^2 (used as a test oracle)."""
    F = np.asarray(F, dtype=np.float64)
    mu, lam = material.lame
    R = polar_rotation(F)
    J = np.linalg.det(F)
    return mu * np.sum((F - R) ** 2, axis=(-2, -1)) + 0.5 * lam * (J - 1.0) ** 2


# ---------------------------------------------------------------------------
# active strain

@dataclass
class ActiveStrainSchedule:
    """Time-periodic contraction applied through F = F_total F_a^-1.

    ``axis`` is the principal contraction axis; the profile coordinate is the
    material coordinate along that axis measured from ``origin`` over the body
    extent ``h``.  ``activation_range`` is the active interval, as fractions of
    the body's long axis (``long_axis`` from ``long_origin`` over ``length``).
    """

    alpha: float = 0.3
    period: float = 2.0
    h: float = 1.0
    d0: float = None
    mode: str = "swimmer"
    axis: int = 1
    origin: float = 0.0
    activation_range: tuple = (0.0, 1.0)
    long_axis: int = 0
    long_origin: float = 0.0
    length: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.period <= 0.0:
            raise ValueError("period must be positive")
        if self.mode not in ("swimmer", "fish"):
            raise ValueError(f"unknown actuation mode {self.mode!r}")
        if self.d0 is None:
            self.d0 = self.h / 3.0

    def stretch(self, t, y):
        """Contraction ratio lambda at time ``t`` for profile coordinate ``y`` in [0, h]."""
        y = np.asarray(y, dtype=np.float64)
        s = math.sin(2.0 * math.pi * t / self.period)
        if self.mode == "fish":
            s = abs(s)
        phase = t % self.period
        if phase <= 0.5 * self.period:
            prof = np.exp(-(self.h - y) / self.d0)
        else:
            prof = np.exp(-y / self.d0)
        return 1.0 - self.alpha * s * prof

    def active_gradient(self, t, X):
        """F_a per particle from material positions ``X`` (N, 2)."""
        X = np.atleast_2d(X)
        y = X[:, self.axis] - self.origin
        lam = self.stretch(t, y)
        frac = (X[:, self.long_axis] - self.long_origin) / self.length
        lo, hi = self.activation_range
        lam = np.where((frac >= lo) & (frac <= hi), lam, 1.0)
        Fa = np.zeros((len(X), 2, 2))
        Fa[:, self.axis, self.axis] = lam
        Fa[:, 1 - self.axis, 1 - self.axis] = 1.0 / lam
        return Fa


def apply_active_strain(F_total, schedule: ActiveStrainSchedule, t, X):
    """Elastic part F_total F_a^-1 of the deformation gradient."""
    if schedule is None:
        return np.array(F_total, dtype=np.float64)
    Fa = schedule.active_gradient(t, X)
    Fa_inv = np.zeros_like(Fa)
    Fa_inv[:, 0, 0] = 1.0 / Fa[:, 0, 0]
    Fa_inv[:, 1, 1] = 1.0 / Fa[:, 1, 1]
    return np.asarray(F_total) @ Fa_inv


# ---------------------------------------------------------------------------
# solid state

@dataclass
class SurfaceSamples:
    x: np.ndarray
    n0: np.ndarray
    D: np.ndarray
    T: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def create(cls, x, n0, dx, seed=0):
        n = len(x)
        D = np.array([1.5 * dx * (1.0 - hash_uniform(np.uint64(seed), 7919, k, 0)) for k in range(n)])
        n0 = np.asarray(n0, dtype=np.float64)
        n0 = n0 / np.linalg.norm(n0, axis=1, keepdims=True)
        return cls(np.array(x, dtype=np.float64), n0, D, np.broadcast_to(_EYE, (n, 2, 2)).copy())

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("x", "n0", "D", "T")))

    def offset_positions(self):
        """x_s + T^T n0 D."""
        nc = np.einsum("nji,nj->ni", self.T, self.n0)
        return self.x + nc * self.D[:, None]


@dataclass
class MpmSolid:
    x: np.ndarray
    v: np.ndarray
    C: np.ndarray
    F: np.ndarray          # total deformation gradient
    mass: np.ndarray
    vol0: np.ndarray
    X0: np.ndarray         # material (rest) coordinates
    mu: np.ndarray
    lam: np.ndarray
    body: np.ndarray       # body index per particle
    surface: SurfaceSamples = None
    schedule: ActiveStrainSchedule = None
    material: Material = field(default_factory=Material)

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def from_points(cls, x, material: Material, dx, ppc, body=None, surface=None, schedule=None):
        n = len(x)
        mu, lam = material.lame
        vol = dx * dx / ppc
        return cls(np.array(x, dtype=np.float64), np.zeros((n, 2)), np.zeros((n, 2, 2)),
                   np.broadcast_to(_EYE, (n, 2, 2)).copy(), np.full(n, material.rho * vol),
                   np.full(n, vol), np.array(x, dtype=np.float64), np.full(n, mu), np.full(n, lam),
                   np.zeros(n, dtype=np.int64) if body is None else np.asarray(body, dtype=np.int64),
                   surface, schedule, material)

    @classmethod
    def concat(cls, parts):
        keys = ("x", "v", "C", "F", "mass", "vol0", "X0", "mu", "lam", "body")
        arrays = []
        for k in keys:
            arrays.append(np.concatenate([getattr(p, k) for p in parts]))
        surf = [p.surface for p in parts if p.surface is not None]
        out = cls(*arrays, SurfaceSamples.concat(surf) if surf else None, parts[0].schedule,
                  parts[0].material)
        return out

    @property
    def n_bodies(self):
        return int(self.body.max()) + 1 if len(self) else 0

    def elastic_F(self, t):
        return apply_active_strain(self.F, self.schedule, t, self.X0)

    def center_of_mass(self, body=None):
        sel = slice(None) if body is None else self.body == body
        m = self.mass[sel]
        return (self.x[sel] * m[:, None]).sum(0) / m.sum()

    def velocity_of_mass(self, body=None):
        sel = slice(None) if body is None else self.body == body
        m = self.mass[sel]
        return (self.v[sel] * m[:, None]).sum(0) / m.sum()

    def occupancy(self, grid: MacGrid):
        occ = np.zeros((grid.nx, grid.ny), dtype=bool)
        i = np.clip((self.x[:, 0] / grid.dx).astype(np.int64), 0, grid.nx - 1)
        j = np.clip((self.x[:, 1] / grid.dx).astype(np.int64), 0, grid.ny - 1)
        occ[i, j] = True
        return occ


def _regular_points(lo, hi, dx, ppc):
    s = int(round(math.sqrt(ppc)))
    h = dx / s
    xs = np.arange(math.floor(lo[0] / h) * h + 0.5 * h, hi[0], h)
    ys = np.arange(math.floor(lo[1] / h) * h + 0.5 * h, hi[1], h)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def sample_disk(center, radius, dx, ppc=4):
    c = np.asarray(center, dtype=np.float64)
    pts = _regular_points(c - radius, c + radius, dx, ppc)
    pts = pts[np.linalg.norm(pts - c, axis=1) <= radius]
    n = max(8, int(math.ceil(2.0 * math.pi * radius / (0.5 * dx))))
    th = 2.0 * math.pi * np.arange(n) / n
    normals = np.column_stack([np.cos(th), np.sin(th)])
    return pts, c + radius * normals, normals


def sample_box(lo, hi, dx, ppc=4):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    pts = _regular_points(lo, hi, dx, ppc)
    pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
    step = 0.5 * dx
    surf, normals = [], []
    for axis in (0, 1):
        other = 1 - axis
        n = max(2, int(math.ceil((hi[other] - lo[other]) / step)))
        t = lo[other] + (np.arange(n) + 0.5) * (hi[other] - lo[other]) / n
        for side, sign in ((lo[axis], -1.0), (hi[axis], 1.0)):
            p = np.empty((n, 2))
            p[:, axis] = side
            p[:, other] = t
            nrm = np.zeros((n, 2))
            nrm[:, axis] = sign
            surf.append(p)
            normals.append(nrm)
    return pts, np.concatenate(surf), np.concatenate(normals)


def make_solid(kind, params, material: Material, dx, ppc=4, body=0, seed=0, schedule=None):
    """Solid particles plus surface samples for a ``disk`` or ``box`` primitive."""
    if kind == "disk":
        pts, sx, sn = sample_disk(params["center"], params["radius"], dx, ppc)
    elif kind == "box":
        pts, sx, sn = sample_box(params["lo"], params["hi"], dx, ppc)
    elif kind == "capsule":
        pts, sx, sn = sample_capsule(params["center"], params["length"], params["radius"], dx, ppc)
    else:
        raise ValueError(f"unknown solid shape {kind!r}")
    surf = SurfaceSamples.create(sx, sn, dx, seed + 104729 * body)
    return MpmSolid.from_points(pts, material, dx, ppc, np.full(len(pts), body), surf, schedule)


def sample_capsule(center, length, radius, dx, ppc=4):
    """Horizontal capsule: a box of ``length`` capped by two half disks."""
    c = np.asarray(center, dtype=np.float64)
    half = 0.5 * length
    lo = c - [half + radius, radius]
    hi = c + [half + radius, radius]
    pts = _regular_points(lo, hi, dx, ppc)
    dxp = np.clip(pts[:, 0] - c[0], -half, half)
    d = np.hypot(pts[:, 0] - c[0] - dxp, pts[:, 1] - c[1])
    pts = pts[d <= radius]
    step = 0.5 * dx
    n_side = max(2, int(math.ceil(length / step)))
    xs = c[0] - half + (np.arange(n_side) + 0.5) * length / n_side
    top = np.column_stack([xs, np.full(n_side, c[1] + radius)])
    bot = np.column_stack([xs, np.full(n_side, c[1] - radius)])
    n_cap = max(4, int(math.ceil(math.pi * radius / step)))
    th = math.pi * (np.arange(n_cap) + 0.5) / n_cap
    right_n = np.column_stack([np.sin(th), np.cos(th)])
    left_n = -right_n
    right = c + [half, 0.0] + radius * right_n
    left = c - [half, 0.0] + radius * left_n
    surf = np.concatenate([top, bot, right, left])
    normals = np.concatenate([np.tile([0.0, 1.0], (n_side, 1)), np.tile([0.0, -1.0], (n_side, 1)),
                              right_n, left_n])
    return pts, surf, normals


# ---------------------------------------------------------------------------
# substep timing

def solid_dt_and_substeps(material: Material, dx, dt_fluid, vmax=0.0, c_sound=0.3, c_vel=0.5):
    """(dt_s, k_sub): sound and velocity CFL for the solid, substep count even and >= 2."""
    dt_s = c_sound * dx / material.sound_speed
    if vmax > 0.0:
        dt_s = min(dt_s, c_vel * dx / vmax)
    k = max(2, int(math.ceil(dt_fluid / dt_s - 1e-12)))
    if k % 2:
        k += 1
    return dt_fluid / k, k


# ---------------------------------------------------------------------------
# fused substep kernel

_BC_CODES = {WALL: 0, INFLOW: 1, "outflow": 2, PERIODIC: 3}


def bc_arrays(grid: MacGrid):
    kinds = np.array([_BC_CODES[getattr(grid.bc, s).kind] for s in ("left", "right", "bottom", "top")],
                     dtype=np.int64)
    vals = np.array([getattr(grid.bc, s).value for s in ("left", "right", "bottom", "top")])
    return kinds, vals


@njit(cache=True)
def _enforce_bc(u, v, kinds, vals):
    if kinds[0] == 0:
        u[0, :] = 0.0
    elif kinds[0] == 1:
        u[0, :] = vals[0]
    if kinds[1] == 0:
        u[-1, :] = 0.0
    elif kinds[1] == 1:
        u[-1, :] = -vals[1]
    if kinds[2] == 0:
        v[:, 0] = 0.0
    elif kinds[2] == 1:
        v[:, 0] = vals[2]
    if kinds[3] == 0:
        v[:, -1] = 0.0
    elif kinds[3] == 1:
        v[:, -1] = -vals[3]
    if kinds[0] == 3:
        u[-1, :] = u[0, :]
    if kinds[2] == 3:
        v[:, -1] = v[:, 0]


@njit(cache=True)
def corotated_stress_2x2(f00, f01, f10, f11, mu, lam):
    th = math.atan2(f10 - f01, f00 + f11)
    c = math.cos(th)
    s = math.sin(th)
    J = f00 * f11 - f01 * f10
    p00 = 2.0 * mu * (f00 - c)
    p01 = 2.0 * mu * (f01 + s)
    p10 = 2.0 * mu * (f10 - s)
    p11 = 2.0 * mu * (f11 - c)
    inverted = J <= 0.0
    if not inverted:
        k = lam * (J - 1.0)
        p00 += k * f11
        p01 -= k * f10
        p10 -= k * f01
        p11 += k * f00
    return p00, p01, p10, p11, inverted


@njit(inline="always", cache=True)
def _scatter_force(arr, wsum, x, y, ox, oy, dx, inv_dx, perx, pery, pnx, pny,
                   mass, val, gxx, gxy, k0, k1):
    """APIC momentum plus an internal-force term k . grad(w) for one component."""
    nxn, nyn = arr.shape
    bx, wx0, wx1, wx2, dx0, dx1, dx2 = _weights(x * inv_dx - ox)
    by, wy0, wy1, wy2, dy0, dy1, dy2 = _weights(y * inv_dx - oy)
    ix = _scatter_index(bx, nxn, perx, pnx)
    iy = _scatter_index(by, nyn, pery, pny)
    wx = (wx0, wx1, wx2)
    wy = (wy0, wy1, wy2)
    dwx = (dx0, dx1, dx2)
    dwy = (dy0, dy1, dy2)
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
            w = wx[a] * wy[b]
            wsum[i, j] += w * mass
            arr[i, j] += w * mass * (val + gxx * xi + gxy * yi) \
                + (k0 * dwx[a] * wy[b] + k1 * wx[a] * dwy[b]) * inv_dx


@njit(inline="always", cache=True)
def _confine(arr, perx, pery, Lx, Ly, eps):
    for p in range(arr.shape[0]):
        if perx:
            arr[p, 0] = arr[p, 0] % Lx
        else:
            arr[p, 0] = min(max(arr[p, 0], eps), Lx - eps)
        if pery:
            arr[p, 1] = arr[p, 1] % Ly
        else:
            arr[p, 1] = min(max(arr[p, 1], eps), Ly - eps)


@njit(cache=True)
def _substeps(nsub, dt, u, v, mu_acc, mv_acc, wu, wv,
              xs, vs, Cs, Fs, ms, vol0, mus, lams, fa_inv,
              xn, vn, Gn, Fn, Tn, mn, xsf, Tsf,
              dx, perx, pery, nx, ny, Lx, Ly, kinds, vals):
    inv_dx = 1.0 / dx
    inverted = 0
    eps = 1e-9 * dx
    for step in range(nsub):
        # G2P and explicit update of solids
        for p in range(xs.shape[0]):
            ux, uy, g00, g01, g10, g11 = _sample_vel_grad(u, v, xs[p, 0], xs[p, 1], inv_dx, perx, pery, nx, ny)
            vs[p, 0] = ux
            vs[p, 1] = uy
            Cs[p, 0, 0] = g00
            Cs[p, 0, 1] = g01
            Cs[p, 1, 0] = g10
            Cs[p, 1, 1] = g11
            f00 = Fs[p, 0, 0] + dt * (g00 * Fs[p, 0, 0] + g01 * Fs[p, 1, 0])
            f01 = Fs[p, 0, 1] + dt * (g00 * Fs[p, 0, 1] + g01 * Fs[p, 1, 1])
            f10 = Fs[p, 1, 0] + dt * (g10 * Fs[p, 0, 0] + g11 * Fs[p, 1, 0])
            f11 = Fs[p, 1, 1] + dt * (g10 * Fs[p, 0, 1] + g11 * Fs[p, 1, 1])
            Fs[p, 0, 0] = f00
            Fs[p, 0, 1] = f01
            Fs[p, 1, 0] = f10
            Fs[p, 1, 1] = f11
            xs[p, 0] += dt * ux
            xs[p, 1] += dt * uy
        for p in range(xn.shape[0]):
            if mn[p] == 0.0:
                continue
            ux, uy, g00, g01, g10, g11 = _sample_vel_grad(u, v, xn[p, 0], xn[p, 1], inv_dx, perx, pery, nx, ny)
            vn[p, 0] = ux
            vn[p, 1] = uy
            Gn[p, 0, 0] = g00
            Gn[p, 0, 1] = g01
            Gn[p, 1, 0] = g10
            Gn[p, 1, 1] = g11
            f00, f01, f10, f11 = Fn[p, 0, 0], Fn[p, 0, 1], Fn[p, 1, 0], Fn[p, 1, 1]
            Fn[p, 0, 0] = f00 + dt * (g00 * f00 + g01 * f10)
            Fn[p, 0, 1] = f01 + dt * (g00 * f01 + g01 * f11)
            Fn[p, 1, 0] = f10 + dt * (g10 * f00 + g11 * f10)
            Fn[p, 1, 1] = f11 + dt * (g10 * f01 + g11 * f11)
            t00, t01, t10, t11 = Tn[p, 0, 0], Tn[p, 0, 1], Tn[p, 1, 0], Tn[p, 1, 1]
            Tn[p, 0, 0] = t00 - dt * (t00 * g00 + t01 * g10)
            Tn[p, 0, 1] = t01 - dt * (t00 * g01 + t01 * g11)
            Tn[p, 1, 0] = t10 - dt * (t10 * g00 + t11 * g10)
            Tn[p, 1, 1] = t11 - dt * (t10 * g01 + t11 * g11)
            xn[p, 0] += dt * ux
            xn[p, 1] += dt * uy
        for p in range(xsf.shape[0]):
            ux, uy, g00, g01, g10, g11 = _sample_vel_grad(u, v, xsf[p, 0], xsf[p, 1], inv_dx, perx, pery, nx, ny)
            t00, t01, t10, t11 = Tsf[p, 0, 0], Tsf[p, 0, 1], Tsf[p, 1, 0], Tsf[p, 1, 1]
            Tsf[p, 0, 0] = t00 - dt * (t00 * g00 + t01 * g10)
            Tsf[p, 0, 1] = t01 - dt * (t00 * g01 + t01 * g11)
            Tsf[p, 1, 0] = t10 - dt * (t10 * g00 + t11 * g10)
            Tsf[p, 1, 1] = t11 - dt * (t10 * g01 + t11 * g11)
            xsf[p, 0] += dt * ux
            xsf[p, 1] += dt * uy
        # keep everything inside non-periodic walls, wrap periodic sides
        _confine(xs, perx, pery, Lx, Ly, eps)
        _confine(xn, perx, pery, Lx, Ly, eps)
        _confine(xsf, perx, pery, Lx, Ly, eps)
        # P2G with internal forces
        mu_acc[:] = 0.0
        mv_acc[:] = 0.0
        wu[:] = 0.0
        wv[:] = 0.0
        for p in range(xs.shape[0]):
            # elastic part of F with the active strain removed (fa_inv is diagonal)
            e00 = Fs[p, 0, 0] * fa_inv[p, 0]
            e01 = Fs[p, 0, 1] * fa_inv[p, 1]
            e10 = Fs[p, 1, 0] * fa_inv[p, 0]
            e11 = Fs[p, 1, 1] * fa_inv[p, 1]
            p00, p01, p10, p11, inv = corotated_stress_2x2(e00, e01, e10, e11, mus[p], lams[p])
            if inv:
                inverted += 1
            # -dt V0 P F^T
            k = -dt * vol0[p]
            s00 = k * (p00 * e00 + p01 * e01)
            s01 = k * (p00 * e10 + p01 * e11)
            s10 = k * (p10 * e00 + p11 * e01)
            s11 = k * (p10 * e10 + p11 * e11)
            _scatter_force(mu_acc, wu, xs[p, 0], xs[p, 1], 0.0, 0.5, dx, inv_dx, perx, pery, nx, ny,
                           ms[p], vs[p, 0], Cs[p, 0, 0], Cs[p, 0, 1], s00, s01)
            _scatter_force(mv_acc, wv, xs[p, 0], xs[p, 1], 0.5, 0.0, dx, inv_dx, perx, pery, nx, ny,
                           ms[p], vs[p, 1], Cs[p, 1, 0], Cs[p, 1, 1], s10, s11)
        for p in range(xn.shape[0]):
            if mn[p] == 0.0:
                continue
            _scatter_force(mu_acc, wu, xn[p, 0], xn[p, 1], 0.0, 0.5, dx, inv_dx, perx, pery, nx, ny,
                           mn[p], vn[p, 0], Gn[p, 0, 0], Gn[p, 0, 1], 0.0, 0.0)
            _scatter_force(mv_acc, wv, xn[p, 0], xn[p, 1], 0.5, 0.0, dx, inv_dx, perx, pery, nx, ny,
                           mn[p], vn[p, 1], Gn[p, 1, 0], Gn[p, 1, 1], 0.0, 0.0)
        if perx:
            wu[nx, :] = wu[0, :]
            mu_acc[nx, :] = mu_acc[0, :]
        if pery:
            wv[:, ny] = wv[:, 0]
            mv_acc[:, ny] = mv_acc[:, 0]
        for i in range(u.shape[0]):
            for j in range(u.shape[1]):
                if wu[i, j] > 0.0:
                    u[i, j] = mu_acc[i, j] / wu[i, j]
        for i in range(v.shape[0]):
            for j in range(v.shape[1]):
                if wv[i, j] > 0.0:
                    v[i, j] = mv_acc[i, j] / wv[i, j]
        _enforce_bc(u, v, kinds, vals)
    return inverted


def mpm_substeps(grid_sub: MacGrid, solid: MpmSolid, narrowband: FluidParticles, dt_s, nsub, t=0.0):
    """Run ``nsub`` MPM substeps on the velocity in ``grid_sub`` (modified in place).

    Each substep: G2P velocities and gradients, explicit F update, ballistic
    position update of solid, narrowband and surface samples, then P2G of
    momentum with elastic forces.  Faces without solid or narrowband weight keep
    their previous value.
    """
    if nsub == 0:
        return 0
    px, py = grid_sub.periodic
    Lx, Ly = grid_sub.size
    kinds, vals = bc_arrays(grid_sub)
    if solid is not None and len(solid):
        if solid.schedule is not None:
            Fa = solid.schedule.active_gradient(t, solid.X0)
            fa_inv = np.column_stack([1.0 / Fa[:, 0, 0], 1.0 / Fa[:, 1, 1]])
        else:
            fa_inv = np.ones((len(solid), 2))
        xs, vs, Cs, Fs = solid.x, solid.v, solid.C, solid.F
        ms, vol0, mus, lams = solid.mass, solid.vol0, solid.mu, solid.lam
        surf = solid.surface
        xsf = surf.x if surf is not None else np.zeros((0, 2))
        Tsf = surf.T if surf is not None else np.zeros((0, 2, 2))
    else:
        xs = vs = np.zeros((0, 2))
        Cs = Fs = np.zeros((0, 2, 2))
        ms = vol0 = mus = lams = np.zeros(0)
        fa_inv = np.ones((0, 2))
        xsf, Tsf = np.zeros((0, 2)), np.zeros((0, 2, 2))
    if narrowband is not None and len(narrowband):
        nb = narrowband
        xn, vn, Gn, Fn, Tn, mn = nb.x, nb.vel, nb.grad, nb.F, nb.T, nb.p2g_mass
    else:
        xn = vn = np.zeros((0, 2))
        Gn = Fn = Tn = np.zeros((0, 2, 2))
        mn = np.zeros(0)
    acc_u = np.empty_like(grid_sub.u)
    acc_v = np.empty_like(grid_sub.v)
    wu = np.empty_like(grid_sub.u)
    wv = np.empty_like(grid_sub.v)
    inverted = _substeps(nsub, dt_s, grid_sub.u, grid_sub.v, acc_u, acc_v, wu, wv,
                         xs, vs, Cs, Fs, ms, vol0, mus, lams, fa_inv,
                         xn, vn, Gn, Fn, Tn, mn, xsf, Tsf,
                         grid_sub.dx, px, py, grid_sub.nx, grid_sub.ny, Lx, Ly, kinds, vals)
    if inverted:
        warnings.warn(f"{inverted} inverted element evaluations during substeps", InvertedElement)
    return inverted


def mpm_substep(grid_sub, solid, narrowband=None, dt_s=1e-4, t=0.0):
    """Single substep; see :func:`mpm_substeps`."""
    return mpm_substeps(grid_sub, solid, narrowband, dt_s, 1, t)


def sample_solid_velocity(solid: MpmSolid, grid: MacGrid):
    """G2P velocity and affine gradient onto solid particles (before a synchronisation P2G)."""
    from .grid import g2p_gradient
    solid.v, solid.C = g2p_gradient(grid, solid.x)


# ---------------------------------------------------------------------------
# narrowband

def resample_narrowband(solid: MpmSolid, grid: MacGrid, occupancy, rho_f, ppc) -> FluidParticles:
    """Fluid particles offset from the surface samples along their transported normals.

    Samples landing in solid-occupied cells (or outside the domain) are discarded.
    """
    surf = solid.surface
    if surf is None or len(surf) == 0:
        return FluidParticles.empty(0, narrowband=True)
    x = surf.offset_positions()
    Lx, Ly = grid.size
    px, py = grid.periodic
    if px:
        x[:, 0] %= Lx
    if py:
        x[:, 1] %= Ly
    inside = (x[:, 0] > 0) & (x[:, 0] < Lx) & (x[:, 1] > 0) & (x[:, 1] < Ly)
    i = np.clip((x[:, 0] / grid.dx).astype(np.int64), 0, grid.nx - 1)
    j = np.clip((x[:, 1] / grid.dx).astype(np.int64), 0, grid.ny - 1)
    keep = inside & ~occupancy[i, j]
    x = x[keep]
    p = FluidParticles.empty(len(x), narrowband=True)
    p.x = np.ascontiguousarray(x)
    p.m_a = g2p_velocity(grid, x)
    p.vel = p.m_a.copy()
    p.rho[:] = rho_f
    p.mass[:] = rho_f * grid.dx ** 2 / ppc
    p.ids = -1 - np.arange(len(x), dtype=np.int64)
    return p


def narrowband_gaps(fluid: FluidParticles, occupancy, dx):
    """Non-solid cells bordering the solid that hold no fluid particle."""
    nx, ny = occupancy.shape
    count = np.zeros((nx, ny), dtype=np.int64)
    if len(fluid):
        i = np.clip((fluid.x[:, 0] / dx).astype(np.int64), 0, nx - 1)
        j = np.clip((fluid.x[:, 1] / dx).astype(np.int64), 0, ny - 1)
        np.add.at(count, (i, j), 1)
    border = np.zeros_like(occupancy)
    border[1:] |= occupancy[:-1]
    border[:-1] |= occupancy[1:]
    border[:, 1:] |= occupancy[:, :-1]
    border[:, :-1] |= occupancy[:, 1:]
    border &= ~occupancy
    return border & (count == 0)
