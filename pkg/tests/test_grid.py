import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfm_fsi.errors import OutOfDomain
from pfm_fsi.grid import (
    Boundaries,
    MacGrid,
    PressureSolver,
    divergence,
    dump_grid,
    g2p_gradient,
    g2p_velocity,
    load_grid,
    make_stencil,
    p2g,
    quadratic_weight,
    solve_projection,
)

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


def periodic_grid(n=16):
    return MacGrid(n, n, 1.0 / n, Boundaries.periodic())


def wall_grid(n=16):
    return MacGrid(n, n, 1.0 / n, Boundaries.walls())


def random_field(grid, seed=0):
    rng = np.random.default_rng(seed)
    grid.u[:] = rng.standard_normal(grid.u.shape)
    grid.v[:] = rng.standard_normal(grid.v.shape)
    if grid.bc.periodic_x:
        grid.u[-1] = grid.u[0]
    if grid.bc.periodic_y:
        grid.v[:, -1] = grid.v[:, 0]
    return grid


def spectral_projection(grid, dt):
    """Exact discrete projection in a periodic box via the FFT of the 5-point Laplacian."""
    n, m, h = grid.nx, grid.ny, grid.dx
    d = divergence(grid)
    kx = 2 * np.pi * np.fft.fftfreq(n)
    ky = 2 * np.pi * np.fft.fftfreq(m)
    lam = (2 * np.cos(kx)[:, None] - 2) + (2 * np.cos(ky)[None, :] - 2)
    lam[0, 0] = 1.0
    phat = np.fft.fft2(d * h * h / dt) / lam
    phat[0, 0] = 0.0
    p = np.real(np.fft.ifft2(phat))
    u = grid.u.copy()
    v = grid.v.copy()
    u[1:-1] -= dt * (p[1:] - p[:-1]) / h
    u[0] -= dt * (p[0] - p[-1]) / h
    u[-1] = u[0]
    v[:, 1:-1] -= dt * (p[:, 1:] - p[:, :-1]) / h
    v[:, 0] -= dt * (p[:, 0] - p[:, -1]) / h
    v[:, -1] = v[:, 0]
    return u, v


def dense_wall_projection(grid, dt):
    """Independent dense solve of the uniform-density Neumann problem on a closed box."""
    n, m, h = grid.nx, grid.ny, grid.dx
    u = grid.u.copy()
    v = grid.v.copy()
    u[0] = u[-1] = 0.0
    v[:, 0] = v[:, -1] = 0.0
    N = n * m
    A = np.zeros((N, N))
    k = lambda i, j: i * m + j
    for i in range(n):
        for j in range(m):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if 0 <= a < n and 0 <= b < m:
                    A[k(i, j), k(i, j)] += 1.0
                    A[k(i, j), k(a, b)] -= 1.0
    div = (u[1:] - u[:-1] + v[:, 1:] - v[:, :-1]) / h
    rhs = -(div * h * h / dt).ravel()
    p = np.linalg.lstsq(A, rhs, rcond=None)[0].reshape(n, m)
    u[1:-1] -= dt * (p[1:] - p[:-1]) / h
    v[:, 1:-1] -= dt * (p[:, 1:] - p[:, :-1]) / h
    return u, v


class TestQuadraticWeight:
    def test_center(self):
        assert quadratic_weight(0.0) == 0.75

    def test_support_edge(self):
        assert quadratic_weight(1.5) == 0.0
        assert quadratic_weight(-1.5) == 0.0

    def test_half(self):
        # piecewise formula 0.5 (1.5 - r)^2 at r = 0.5, which also equals 0.75 - 0.25
        assert quadratic_weight(0.5) == pytest.approx(0.5 * (1.5 - 0.5) ** 2, abs=0)
        assert quadratic_weight(0.5) == pytest.approx(0.5, abs=1e-15)

    def test_uniform_sweep_sums_to_one(self):
        for s in np.linspace(0.0, 1.0, 101):
            total = sum(quadratic_weight(s - k) for k in range(-2, 3))
            assert total == pytest.approx(1.0, abs=1e-14)

    def test_c1_continuity(self):
        eps = 1e-7
        for r in (0.5, 1.5):
            left = (quadratic_weight(r - eps) - quadratic_weight(r - 2 * eps)) / eps
            right = (quadratic_weight(r + 2 * eps) - quadratic_weight(r + eps)) / eps
            assert left == pytest.approx(right, abs=1e-5)


class TestStencil:
    def test_face_center_weight(self):
        g = periodic_grid(8)
        s = make_stencil(np.array([3 * g.dx, 4.5 * g.dx]), 0, g)
        assert s.weights[1, 1] == pytest.approx(0.75 * 0.75, abs=1e-15)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 2))
    def test_partition_of_unity(self, fx, fy, axis):
        g = periodic_grid(8)
        s = make_stencil(np.array([fx, fy]), axis, g)
        assert s.weights.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.abs(s.gradients.sum(axis=(0, 1))).max() < 1e-10

    def test_gradient_matches_finite_difference(self):
        g = periodic_grid(8)
        x = np.array([0.37, 0.61])
        s = make_stencil(x, 0, g)
        h = 1e-7
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            sp = make_stencil(x + e, 0, g)
            sm = make_stencil(x - e, 0, g)
            assert sp.base == sm.base == s.base
            fd = (sp.weights - sm.weights) / (2 * h)
            np.testing.assert_allclose(s.gradients[..., d], fd, atol=1e-5)

    def test_out_of_padded_interior(self):
        g = wall_grid(16)
        with pytest.raises(OutOfDomain):
            make_stencil(np.array([g.dx, 0.5]), 0, g)


class TestP2G:
    def test_single_particle_constant(self):
        g = periodic_grid(8)
        au, _ = p2g(g, np.array([[0.41, 0.52]]), np.array([[1.0, 0.0]]), fallback=False)
        assert au.sum() == 9
        np.testing.assert_array_equal(g.u[au], 1.0)

    def test_weighted_mean(self):
        g = periodic_grid(8)
        x = np.array([[0.41, 0.52], [0.41, 0.52]])
        au, _ = p2g(g, x, np.array([[0.0, 0.0], [2.0, 0.0]]), fallback=False)
        np.testing.assert_allclose(g.u[au], 1.0, rtol=0, atol=1e-15)

    def test_rigid_rotation_reproduced(self):
        g = wall_grid(16)
        rng = np.random.default_rng(3)
        x = rng.uniform(0.1, 0.9, size=(600, 2))
        w = 1.7
        c = np.array([0.5, 0.5])
        vel = np.stack([-w * (x[:, 1] - c[1]), w * (x[:, 0] - c[0])], axis=1)
        G = np.tile(np.array([[0.0, -w], [w, 0.0]]), (len(x), 1, 1))
        au, av = p2g(g, x, vel, G, fallback=False)
        X, Y = g.face_positions(0)
        np.testing.assert_allclose(g.u[au], (-w * (Y - c[1]))[au], atol=1e-13)
        X, Y = g.face_positions(1)
        np.testing.assert_allclose(g.v[av], (w * (X - c[0]))[av], atol=1e-13)

    @given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
    def test_affine_round_trip(self, coef):
        a0, a1, b0, A00, A01, A10 = coef
        A = np.array([[A00, A01], [A10, -A00]])
        b = np.array([a0, a1])
        g = wall_grid(16)
        rng = np.random.default_rng(1)
        x = rng.uniform(0.05, 0.95, size=(2000, 2))
        p2g(g, x, x @ A.T + b, np.tile(A, (len(x), 1, 1)), fallback=False)
        probe = rng.uniform(0.3, 0.7, size=(20, 2))
        vel, grad = g2p_gradient(g, probe)
        np.testing.assert_allclose(vel, probe @ A.T + b, atol=1e-11)
        np.testing.assert_allclose(grad, np.tile(A, (20, 1, 1)), atol=1e-10)

    def test_density_transfer(self):
        g = periodic_grid(8)
        x = np.array([[0.5, 0.5]])
        p2g(g, x, np.zeros((1, 2)), mass=np.array([3.0]), density=np.array([15.0]))
        assert g.rho_u.max() == pytest.approx(15.0)
        assert g.rho_u.min() == pytest.approx(1.0)


class TestG2P:
    def test_constant(self):
        g = periodic_grid(8)
        g.u[:] = 0.3
        g.v[:] = -1.2
        x = np.random.default_rng(0).uniform(0, 1, size=(50, 2))
        np.testing.assert_allclose(g2p_velocity(g, x), np.tile([0.3, -1.2], (50, 1)), atol=1e-14)
        _, grad = g2p_gradient(g, x)
        assert np.abs(grad).max() < 1e-12

    def test_zero(self):
        g = periodic_grid(8)
        assert np.all(g2p_velocity(g, np.array([[0.2, 0.3]])) == 0.0)

    def test_linear_field(self):
        g = wall_grid(32)
        A = np.array([[0.4, -1.1], [0.7, 0.2]])
        X, Y = g.face_positions(0)
        g.u[:] = A[0, 0] * X + A[0, 1] * Y
        X, Y = g.face_positions(1)
        g.v[:] = A[1, 0] * X + A[1, 1] * Y
        x = np.random.default_rng(2).uniform(0.1, 0.9, size=(40, 2))
        vel, grad = g2p_gradient(g, x)
        np.testing.assert_allclose(vel, x @ A.T, atol=1e-13)
        np.testing.assert_allclose(grad, np.tile(A, (40, 1, 1)), atol=1e-12)

    def test_rotation_gradient(self):
        g = wall_grid(32)
        w = 2.5
        g.set_velocity(lambda X, Y: (-w * (Y - 0.5), w * (X - 0.5)))
        _, grad = g2p_gradient(g, np.array([[0.45, 0.55]]))
        np.testing.assert_allclose(grad[0], [[0.0, -w], [w, 0.0]], atol=1e-12)


class TestProjection:
    def test_divergence_free_unchanged(self):
        g = periodic_grid(16)
        # u depends on y only and v on x only, so the discrete divergence vanishes
        g.set_velocity(lambda X, Y: (np.sin(2 * np.pi * Y), np.cos(2 * np.pi * X)))
        u0, v0 = g.u.copy(), g.v.copy()
        solve_projection(g, 0.1)
        np.testing.assert_allclose(g.u, u0, atol=1e-12)
        np.testing.assert_allclose(g.v, v0, atol=1e-12)
        assert np.ptp(g.pressure) < 1e-12

    def test_uniform_increment_kept(self):
        g = periodic_grid(16)
        g.u[:] = 0.03
        g.v[:] = -0.01
        solve_projection(g, 0.01)
        np.testing.assert_allclose(g.u, 0.03, atol=1e-14)
        np.testing.assert_allclose(g.v, -0.01, atol=1e-14)

    def test_walls_against_dense_solve(self):
        g = wall_grid(8)
        g.u[:] = 1.0
        g.v[:] = 0.5
        u_ref, v_ref = dense_wall_projection(g, 0.1)
        PressureSolver(rtol=1e-12).project(g, 0.1)
        np.testing.assert_allclose(g.u, u_ref, atol=1e-9)
        np.testing.assert_allclose(g.v, v_ref, atol=1e-9)
        assert np.all(g.u[0] == 0) and np.all(g.u[-1] == 0)

    def test_random_walls_against_dense_solve(self):
        g = random_field(wall_grid(8), seed=4)
        u_ref, v_ref = dense_wall_projection(g, 0.05)
        PressureSolver(rtol=1e-12).project(g, 0.05)
        np.testing.assert_allclose(g.u, u_ref, atol=1e-8)
        np.testing.assert_allclose(g.v, v_ref, atol=1e-8)

    @given(st.integers(0, 10_000), st.sampled_from(["periodic", "walls"]))
    def test_divergence_bound_and_idempotence(self, seed, kind):
        g = random_field(periodic_grid(16) if kind == "periodic" else wall_grid(16), seed)
        solver = PressureSolver(rtol=1e-8)
        solver.project(g, 0.1)
        scale = g.max_speed() / g.dx
        assert np.abs(divergence(g)).max() <= 1e-5 * scale
        u1, v1 = g.u.copy(), g.v.copy()
        solver.project(g, 0.1)
        assert np.abs(g.u - u1).max() < 1e-6 * scale * g.dx
        assert np.abs(g.v - v1).max() < 1e-6 * scale * g.dx

    def test_uniform_density_matches_constant_density(self):
        g = random_field(periodic_grid(16), seed=7)
        u_ref, v_ref = spectral_projection(g, 0.1)
        g.rho_u[:] = 2.5
        g.rho_v[:] = 2.5
        PressureSolver(rtol=1e-12).project(g, 0.1)
        np.testing.assert_allclose(g.u, u_ref, atol=1e-9)
        np.testing.assert_allclose(g.v, v_ref, atol=1e-9)

    def test_heavy_region_moves_less(self):
        g = wall_grid(16)
        g.u[1:-1, 4:12] = 1.0
        g.rho_u[8:, :] = 50.0
        g.rho_v[8:, :] = 50.0
        solve_projection(g, 0.1)
        assert np.abs(divergence(g)).max() < 1e-4


class TestDump:
    def test_round_trip(self, tmp_path):
        g = random_field(wall_grid(8), seed=2)
        g.pressure[:] = np.arange(64.0).reshape(8, 8)
        path = tmp_path / "g.macg"
        dump_grid(g, path)
        h = load_grid(path)
        assert (h.nx, h.ny, h.dx) == (8, 8, g.dx)
        np.testing.assert_array_equal(h.u, g.u)
        np.testing.assert_array_equal(h.v, g.v)
        np.testing.assert_array_equal(h.pressure, g.pressure)

    def test_header_layout(self, tmp_path):
        g = wall_grid(8)
        path = tmp_path / "g.macg"
        dump_grid(g, path)
        raw = path.read_bytes()
        assert raw[:4] == b"MACG"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 8
        assert len(raw) == 24 + 8 * (9 * 8 + 8 * 9 + 64)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.macg"
        path.write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(ValueError):
            load_grid(path)
