"""Built-in scenes: grids, boundary conditions, initial fields and solids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Boundaries, BoundaryCondition, INFLOW, OUTFLOW, WALL, MacGrid, apply_velocity_bc
from .ibm import IbmCoupler, chain_mesh, merge_meshes, ring_mesh
from .mpm import ActiveStrainSchedule, Material, MpmSolid, make_solid


@dataclass
class Scene:
    grid: MacGrid
    rho_f: float = 1.0
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    viscosity: float = 0.0
    buoyancy: np.ndarray = field(default_factory=lambda: np.zeros(2))
    solid: MpmSolid = None
    ibm: IbmCoupler = None
    probes: np.ndarray = None
    info: dict = field(default_factory=dict)


@dataclass
class ScenarioSpec:
    name: str
    backend: str
    nx: int
    ny: int
    defaults: dict
    build: object
    summary: str = ""


def velocity_from_streamfunction(grid: MacGrid, psi_nodes):
    """Discretely divergence-free faces from a node-sampled streamfunction (nx+1, ny+1)."""
    grid.u[:] = (psi_nodes[:, 1:] - psi_nodes[:, :-1]) / grid.dx
    grid.v[:] = -(psi_nodes[1:, :] - psi_nodes[:-1, :]) / grid.dx
    apply_velocity_bc(grid)


def node_coordinates(grid: MacGrid):
    x = np.arange(grid.nx + 1) * grid.dx
    y = np.arange(grid.ny + 1) * grid.dx
    return np.meshgrid(x, y, indexing="ij")


def streamfunction_from_vorticity(grid: MacGrid, omega_nodes):
    """Periodic FFT solve of lap(psi) = -omega on the nx x ny node lattice."""
    w = omega_nodes[:-1, :-1]
    kx = 2 * np.pi * np.fft.fftfreq(grid.nx, grid.dx)
    ky = 2 * np.pi * np.fft.fftfreq(grid.ny, grid.dx)
    # spectrum of the discrete 5-point Laplacian so the node field is consistent
    lx = (2 * np.cos(kx * grid.dx) - 2) / grid.dx ** 2
    ly = (2 * np.cos(ky * grid.dx) - 2) / grid.dx ** 2
    L = lx[:, None] + ly[None, :]
    L[0, 0] = 1.0
    what = np.fft.fft2(w)
    psi_hat = -what / L
    psi_hat[0, 0] = 0.0
    psi = np.real(np.fft.ifft2(psi_hat))
    out = np.empty((grid.nx + 1, grid.ny + 1))
    out[:-1, :-1] = psi
    out[-1, :-1] = psi[0]
    out[:, -1] = out[:, 0]
    return out


def _params(spec, cfg):
    p = dict(spec.defaults)
    p.update(cfg.scene)
    return p


def _forces(scene: Scene, cfg, p):
    f = cfg.forces
    scene.gravity = np.asarray(f.gravity if f.gravity is not None else p.get("gravity", (0.0, 0.0)),
                               dtype=np.float64)
    scene.viscosity = float(f.viscosity if f.viscosity is not None else p.get("viscosity", 0.0))
    scene.buoyancy = np.asarray(f.buoyancy if f.buoyancy is not None else p.get("buoyancy", (0.0, 0.0)),
                                dtype=np.float64)
    return scene


def _walls():
    return Boundaries()


def _channel(inflow):
    return Boundaries(BoundaryCondition(INFLOW, inflow), BoundaryCondition(OUTFLOW),
                      BoundaryCondition(WALL), BoundaryCondition(WALL))


# ---------------------------------------------------------------------------
# fluid-only scenes

def build_taylor_green(cfg, p):
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, Boundaries.periodic())
    X, Y = node_coordinates(g)
    U = p["amplitude"]
    # u = U sin(kx) cos(ky), v = -U cos(kx) sin(ky)
    k = 2 * np.pi * p["modes"]
    psi = U / k * np.sin(k * X) * np.sin(k * Y)
    velocity_from_streamfunction(g, psi)
    return _forces(Scene(g), cfg, p)


def build_free_accel(cfg, p):
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, Boundaries.periodic())
    return _forces(Scene(g), cfg, p)


def build_leapfrog(cfg, p):
    """Two co-moving vortex pairs (Gaussian cores) in a periodic box."""
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, Boundaries.periodic())
    X, Y = node_coordinates(g)
    Lx, Ly = g.size
    w = np.zeros_like(X)
    s = p["core"]
    gamma = p["circulation"]
    x0 = p["x0"] * Lx
    for dxv, half in ((0.0, p["inner"]), (p["gap"], p["outer"])):
        for sign in (1.0, -1.0):
            cx, cy = x0 + dxv, 0.5 * Ly + sign * half
            for ox in (-Lx, 0.0, Lx):
                for oy in (-Ly, 0.0, Ly):
                    r2 = (X - cx - ox) ** 2 + (Y - cy - oy) ** 2
                    w += -sign * gamma / (np.pi * s * s) * np.exp(-r2 / (s * s))
    velocity_from_streamfunction(g, streamfunction_from_vorticity(g, w))
    return _forces(Scene(g, info={"vorticity0": w}), cfg, p)


# ---------------------------------------------------------------------------
# IBM scenes

def _disk_mesh(center, radius, dx, spacing=0.5):
    """Concentric pinned rings filling a disk, vertex spacing ~ spacing * dx."""
    rings = []
    r = radius
    while r > 0.5 * dx:
        n = max(6, int(math.ceil(2 * math.pi * r / (spacing * dx))))
        rings.append(ring_mesh(center, r, n, thickness=dx))
        r -= spacing * dx
    return merge_meshes(rings)


def build_karman(cfg, p):
    U = p["inflow"]
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, _channel(U))
    Lx, Ly = g.size
    c = np.array([p["center_x"] * Ly, 0.5 * Ly])
    r = p["radius"]
    kick = p["kick"]
    X, Y = g.face_positions(0)
    g.u[:] = U
    X, Y = g.face_positions(1)
    # antisymmetric cross-flow kick in the near wake so shedding starts early
    g.v[:] = kick * U * np.exp(-((X - c[0] - 3 * r) ** 2 + (Y - c[1]) ** 2) / (2 * r) ** 2)
    apply_velocity_bc(g)
    mesh = _disk_mesh(c, r, cfg.dx)
    coupler = IbmCoupler(mesh, cfg.ibm_dt, cfg.ibm_iterations, forcing_iterations=cfg.ibm_forcing_iterations)
    probe = np.array([[c[0] + 3 * 2 * r, c[1]]])
    scene = Scene(g, ibm=coupler, probes=probe, info={"diameter": 2 * r, "inflow": U, "center": c})
    return _forces(scene, cfg, p)


def build_flag2d(cfg, p):
    U = p["inflow"]
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, _channel(U))
    Lx, Ly = g.size
    g.u[:] = U
    apply_velocity_bc(g)
    c = np.array([p["pole_x"] * Ly, 0.5 * Ly])
    pole = _disk_mesh(c, p["pole_radius"], cfg.dx)
    n = max(3, int(round(p["length"] / (0.5 * cfg.dx))) + 1)
    start = c + [p["pole_radius"], 0.0]
    pts = start + np.column_stack([np.linspace(0, p["length"], n), np.zeros(n)])
    # slight initial tilt breaks the symmetry of the wake
    pts[:, 1] += p["tilt"] * (pts[:, 0] - start[0])
    flag = chain_mesh(pts, p["mass_per_length"], pinned=(0,), stiffness=p["stiffness"],
                      bend_stiffness=p["bend_stiffness"], thickness=cfg.dx, solver="mass_spring",
                      damping=p["damping"])
    pole.solver = "mass_spring"
    mesh = merge_meshes([flag, pole])
    mesh.solver = "mass_spring"
    mesh.stiffness = flag.stiffness
    mesh.bend_stiffness = flag.bend_stiffness
    mesh.damping = flag.damping
    coupler = IbmCoupler(mesh, cfg.ibm_dt, cfg.ibm_iterations, forcing_iterations=cfg.ibm_forcing_iterations)
    scene = Scene(g, ibm=coupler, info={"inflow": U, "pole": c, "flag_vertices": np.arange(n),
                                       "downstream_x": start[0] + p["length"]})
    return _forces(scene, cfg, p)


# ---------------------------------------------------------------------------
# MPM scenes

def _material(p, ratio_key="density_ratio"):
    return Material(E=p["youngs_modulus"], nu=p["poisson_ratio"], rho=p[ratio_key] * p["fluid_density"])


def build_sediment(cfg, p):
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, _walls(), ambient_density=p["fluid_density"])
    Ly = g.size[1]
    mat = _material(p)
    c = np.array(p["center"], dtype=np.float64) * Ly
    solid = make_solid("disk", {"center": c, "radius": p["radius"]}, mat, cfg.dx, cfg.solid_ppc,
                       seed=cfg.seed)
    scene = Scene(g, rho_f=p["fluid_density"], solid=solid,
                  info={"diameter": 2 * p["radius"], "fall_axis": int(np.argmax(np.abs(p["gravity"])))})
    return _forces(scene, cfg, p)


def build_multi_cylinder(cfg, p):
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, _walls(), ambient_density=p["fluid_density"])
    Lx, Ly = g.size
    mat = _material(p)
    r = p["radius"]
    n = p["count"]
    y0 = p["height"] * Ly
    xs = 0.5 * Lx + (np.arange(n) - 0.5 * (n - 1)) * p["spacing"] * r
    parts = [make_solid("disk", {"center": (x, y0), "radius": r}, mat, cfg.dx, cfg.solid_ppc,
                        body=k, seed=cfg.seed) for k, x in enumerate(xs)]
    scene = Scene(g, rho_f=p["fluid_density"], solid=MpmSolid.concat(parts),
                  info={"diameter": 2 * r, "fall_axis": 1})
    return _forces(scene, cfg, p)


def _actuated_body(cfg, p, g, mode, axis, profile_extent):
    Lx, Ly = g.size
    L, H = p["length"], p["thickness"]
    c = np.array([p["center_x"] * Ly, 0.5 * Ly])
    lo, hi = c - [0.5 * L, 0.5 * H], c + [0.5 * L, 0.5 * H]
    a0, a1 = p["activation"]
    if axis == 0:
        # profile runs across the active band, so lambda reaches 1 - alpha inside it
        origin, h = lo[0] + a0 * L, (a1 - a0) * L
    else:
        origin, h = lo[axis], profile_extent
    sched = ActiveStrainSchedule(alpha=p["alpha"], period=p["period"],
                                 h=h, mode=mode, axis=axis,
                                 origin=origin, activation_range=tuple(p["activation"]),
                                 long_axis=0, long_origin=lo[0], length=L)
    mat = _material(p)
    solid = make_solid("box", {"lo": lo, "hi": hi}, mat, cfg.dx, cfg.solid_ppc, seed=cfg.seed,
                       schedule=sched)
    return solid


def build_swimmer(cfg, p):
    """Flapping swimmer: contraction along the long (first) axis, profile along that axis."""
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, _walls(), ambient_density=p["fluid_density"])
    solid = _actuated_body(cfg, p, g, "swimmer", 0, p["length"])
    scene = Scene(g, rho_f=p["fluid_density"], solid=solid,
                  info={"body_length": p["length"], "axis": np.array([1.0, 0.0]), "period": p["period"]})
    return _forces(scene, cfg, p)


def build_fish2d(cfg, p):
    """Fish: contraction across the thickness (y), active band along the tail."""
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, _walls(), ambient_density=p["fluid_density"])
    solid = _actuated_body(cfg, p, g, "fish", 1, p["thickness"])
    scene = Scene(g, rho_f=p["fluid_density"], solid=solid,
                  info={"body_length": p["length"], "axis": np.array([-1.0, 0.0]), "period": p["period"]})
    return _forces(scene, cfg, p)


def build_falling_sphere(cfg, p):
    g = MacGrid(cfg.nx, cfg.ny, cfg.dx, _walls(), ambient_density=p["fluid_density"])
    Lx, Ly = g.size
    mat = _material(p)
    c = np.array([0.5 * Lx, p["height"] * Ly])
    solid = make_solid("disk", {"center": c, "radius": p["radius"]}, mat, cfg.dx, cfg.solid_ppc,
                       seed=cfg.seed)
    scene = Scene(g, rho_f=p["fluid_density"], solid=solid,
                  info={"diameter": 2 * p["radius"], "fall_axis": 1})
    return _forces(scene, cfg, p)


_SOLID = {"youngs_modulus": 5e3, "poisson_ratio": 0.3, "fluid_density": 1.0}

CATALOG = {
    "taylor_green": ScenarioSpec(
        "taylor_green", "none", 64, 64,
        {"amplitude": 1.0, "modes": 1, "gravity": (0.0, 0.0), "viscosity": 0.0},
        build_taylor_green, "periodic Taylor-Green vortex array"),
    "free_accel": ScenarioSpec(
        "free_accel", "none", 64, 64, {"gravity": (0.0, -3.0), "viscosity": 0.0},
        build_free_accel, "fluid at rest under a uniform body force in a periodic box"),
    "leapfrog": ScenarioSpec(
        "leapfrog", "none", 128, 128,
        {"circulation": 0.1, "core": 0.02, "inner": 0.08, "outer": 0.16, "gap": 0.1, "x0": 0.2,
         "gravity": (0.0, 0.0), "viscosity": 0.0},
        build_leapfrog, "inviscid leapfrogging vortex pairs"),
    "karman": ScenarioSpec(
        "karman", "ibm", 256, 128,
        {"radius": 0.05, "inflow": 0.16, "viscosity": 4e-5, "center_x": 0.5, "kick": 0.5,
         "gravity": (0.0, 0.0)},
        build_karman, "cylinder wake in a channel (viscosity 4e-4 / 4e-5 / 4e-6)"),
    "flag2d": ScenarioSpec(
        "flag2d", "ibm", 256, 128,
        {"inflow": 0.16, "pole_x": 0.4, "pole_radius": 0.025, "length": 0.3, "mass_per_length": 0.05,
         "stiffness": 200.0, "bend_stiffness": 1e-5, "damping": 0.0, "tilt": 0.05,
         "viscosity": 0.0, "gravity": (0.0, 0.0)},
        build_flag2d, "mass-spring flag behind a pole in uniform inflow"),
    "sediment": ScenarioSpec(
        "sediment", "mpm", 192, 96,
        {"radius": 0.03, "center": (0.16, 0.5), "density_ratio": 15.0, "gravity": (3.0, 0.0),
         "viscosity": 8e-5, **_SOLID},
        build_sediment, "single cylinder falling along the long axis"),
    "multi_cylinder": ScenarioSpec(
        "multi_cylinder", "mpm", 256, 256,
        {"radius": 0.02, "spacing": 3.0, "count": 2, "height": 0.8, "density_ratio": 30.0,
         "gravity": (0.0, -9.8), "viscosity": 6e-4, **_SOLID},
        build_multi_cylinder, "side-by-side falling cylinders"),
    "swimmer": ScenarioSpec(
        "swimmer", "mpm", 192, 96,
        {"length": 0.25, "thickness": 0.05, "center_x": 1.0, "alpha": 0.3, "period": 2.0,
         "activation": (0.3, 0.7), "density_ratio": 1.0, "viscosity": 8e-6, "gravity": (0.0, 0.0),
         **_SOLID},
        build_swimmer, "actively contracting flapping swimmer"),
    "fish2d": ScenarioSpec(
        "fish2d", "mpm", 512, 128,
        {"length": 0.25, "thickness": 0.01, "center_x": 2.5, "alpha": 0.25, "period": 2.0,
         "activation": (0.6, 0.9), "density_ratio": 1.0, "viscosity": 8e-6, "gravity": (0.0, 0.0),
         **_SOLID},
        build_fish2d, "undulating thin fish body"),
    "falling_sphere_ablation": ScenarioSpec(
        "falling_sphere_ablation", "mpm", 128, 384,
        {"radius": 0.03, "height": 0.9, "density_ratio": 15.0, "gravity": (0.0, -3.0),
         "viscosity": 8e-5, **_SOLID},
        build_falling_sphere, "falling disk used for the direct-hybrid ablation"),
}


def build_scene(cfg) -> Scene:
    spec = CATALOG[cfg.scenario]
    return spec.build(cfg, _params(spec, cfg))
