import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfm_fsi.flowmap import (
    FlowMapConfig,
    FluidParticles,
    cull_fluid_in_solid,
    estimate_midpoint_velocity,
    evolve_jacobians,
    march_particles,
    reinitialize_fluid,
    rk4_advect,
)
from pfm_fsi.grid import Boundaries, MacGrid, g2p_velocity

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


def taylor_green(n=32, amp=1.0):
    g = MacGrid(n, n, 1.0 / n, Boundaries.periodic())
    k = 2 * np.pi
    g.set_velocity(lambda X, Y: (amp * np.sin(k * X) * np.cos(k * Y),
                                 -amp * np.cos(k * X) * np.sin(k * Y)))
    return g


def expm_oracle(A, terms=20, squarings=10):
    """Scaling and squaring with a truncated Taylor series."""
    B = A / 2 ** squarings
    E = np.eye(2)
    term = np.eye(2)
    for k in range(1, terms):
        term = term @ B / k
        E = E + term
    for _ in range(squarings):
        E = E @ E
    return E


def particles_at(x):
    p = FluidParticles.empty(len(x))
    p.x = np.array(x, dtype=np.float64)
    return p


class TestRK4:
    def test_zero_field(self):
        x = np.array([[0.3, 0.4]])
        np.testing.assert_array_equal(rk4_advect(x, np.zeros_like, 0.1), x)

    def test_constant_field(self):
        c = np.array([0.2, -0.7])
        x = np.array([[0.3, 0.4], [0.1, 0.9]])
        out = rk4_advect(x, lambda y: np.broadcast_to(c, y.shape), 0.05)
        np.testing.assert_allclose(out, x + 0.05 * c, atol=1e-15)

    def test_fourth_order_on_circle(self):
        def rot(y):
            return np.stack([-y[:, 1], y[:, 0]], axis=1)

        x0 = np.array([[1.0, 0.0]])
        errs = []
        for n in (16, 32, 64, 128):
            dt = 2 * np.pi / n
            x = x0.copy()
            for _ in range(n):
                x = rk4_advect(x, rot, dt)
            errs.append(np.linalg.norm(x - x0))
        slopes = np.diff(np.log(errs)) / np.log(0.5)
        assert np.all(np.abs(slopes - 4.0) < 0.2), slopes


class TestJacobians:
    def test_zero_gradient(self):
        F = np.array([[1.2, 0.1], [0.0, 0.9]])
        T = np.linalg.inv(F)
        F2, T2 = evolve_jacobians(F, T, [np.zeros((2, 2))] * 4, 0.1)
        np.testing.assert_array_equal(F2, F)
        np.testing.assert_array_equal(T2, T)

    def test_constant_gradient_matches_exponential(self):
        A = np.array([[0.3, -1.2], [0.8, -0.3]])
        errs = []
        for dt in (0.1, 0.05, 0.025):
            F, T = evolve_jacobians(np.eye(2), np.eye(2), [A] * 4, dt)
            E = expm_oracle(A * dt)
            errs.append(max(np.abs(F - E).max(), np.abs(T - expm_oracle(-A * dt)).max()))
        # local error O(dt^5): halving dt divides the error by about 32
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(ratios > 25), ratios

    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.floats(0.001, 0.05))
    def test_product_drift_small(self, a, dt):
        A = np.array(a).reshape(2, 2)
        F, T = evolve_jacobians(np.eye(2), np.eye(2), [A] * 4, dt)
        assert np.abs(F @ T - np.eye(2)).max() < 1e-6

    def test_drift_on_taylor_green(self):
        g = taylor_green(64)
        rng = np.random.default_rng(0)
        p = particles_at(rng.uniform(0, 1, size=(500, 2)))
        dt = 0.5 * g.dx / g.max_speed()
        drift = []
        for _ in range(20):
            before = p.ft_drift()
            march_particles(p, g, dt)
            drift.append(p.ft_drift() - before)
        assert max(drift) < 1e-6
        assert p.ft_drift() < 1e-3

    def test_drift_converges_with_dt(self):
        g = taylor_green(64)
        x0 = np.random.default_rng(1).uniform(0, 1, size=(200, 2))
        t_end = 0.2
        drifts = []
        for n in (10, 20, 40):
            p = particles_at(x0)
            for _ in range(n):
                march_particles(p, g, t_end / n)
            drifts.append(p.ft_drift())
        ratios = np.array(drifts[:-1]) / np.array(drifts[1:])
        assert np.all(ratios >= 2 ** 3 * 0.9), (drifts, ratios)


class TestMarch:
    def test_zero_field(self):
        g = MacGrid(16, 16, 1 / 16, Boundaries.periodic())
        p = particles_at([[0.3, 0.4], [0.8, 0.1]])
        x0 = p.x.copy()
        march_particles(p, g, 0.1)
        np.testing.assert_array_equal(p.x, x0)
        np.testing.assert_array_equal(p.F, np.tile(np.eye(2), (2, 1, 1)))

    def test_uniform_field_wraps(self):
        g = MacGrid(16, 16, 1 / 16, Boundaries.periodic())
        g.u[:] = 1.0
        p = particles_at([[0.95, 0.4]])
        march_particles(p, g, 0.1)
        np.testing.assert_allclose(p.x, [[0.05, 0.4]], atol=1e-12)
        assert p.valid.all()


class TestReinit:
    def test_count_on_small_grid(self):
        g = MacGrid(4, 4, 0.25, Boundaries.periodic())
        p = reinitialize_fluid(g, FlowMapConfig(particles_per_cell=16))
        assert len(p) == 256

    def test_identity_state(self):
        g = taylor_green(16)
        p = reinitialize_fluid(g, FlowMapConfig())
        np.testing.assert_array_equal(p.F, np.tile(np.eye(2), (len(p), 1, 1)))
        np.testing.assert_array_equal(p.T, p.F)
        assert not p.lam.any() and not p.ups.any()
        np.testing.assert_array_equal(p.m_a, g2p_velocity(g, p.x))

    def test_solid_cells_culled(self):
        g = MacGrid(8, 8, 1 / 8, Boundaries.periodic())
        solid = np.zeros((8, 8), dtype=bool)
        solid[2:4, 5] = True
        p = reinitialize_fluid(g, FlowMapConfig(particles_per_cell=9), solid_cells=solid)
        assert len(p) == 9 * (64 - 2)
        i = (p.x[:, 0] / g.dx).astype(int)
        j = (p.x[:, 1] / g.dx).astype(int)
        assert not solid[i, j].any()

    def test_cull_removes_cell_population(self):
        g = MacGrid(8, 8, 1 / 8, Boundaries.periodic())
        p = reinitialize_fluid(g, FlowMapConfig(particles_per_cell=16))
        solid = np.zeros((8, 8), dtype=bool)
        solid[3, 3] = True
        assert len(cull_fluid_in_solid(p, solid, g.dx)) == len(p) - 16
        assert len(cull_fluid_in_solid(p, None, g.dx)) == len(p)

    @given(st.integers(0, 2 ** 32), st.integers(0, 1000), st.sampled_from([4, 9, 16]))
    def test_idempotent_and_count(self, seed, step, ppc):
        g = taylor_green(8)
        rng = np.random.default_rng(seed % 1000)
        solid = rng.uniform(size=(8, 8)) < 0.2
        cfg = FlowMapConfig(particles_per_cell=ppc)
        a = reinitialize_fluid(g, cfg, solid_cells=solid, seed=seed, step=step)
        b = reinitialize_fluid(g, cfg, solid_cells=solid, seed=seed, step=step)
        assert len(a) == ppc * int((~solid).sum())
        for k in FluidParticles._ARRAYS:
            np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
        i = (a.x[:, 0] / g.dx).astype(int)
        j = (a.x[:, 1] / g.dx).astype(int)
        assert not solid[i, j].any()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FlowMapConfig(particles_per_cell=2)
        with pytest.raises(ValueError):
            FlowMapConfig(n_reinit=0)


class TestMidpoint:
    def test_zero(self):
        g = MacGrid(16, 16, 1 / 16, Boundaries.periodic())
        mid = estimate_midpoint_velocity(g, 0.1)
        assert not mid.u.any() and not mid.v.any()

    def test_uniform(self):
        g = MacGrid(16, 16, 1 / 16, Boundaries.periodic())
        g.u[:] = 0.4
        g.v[:] = -0.2
        mid = estimate_midpoint_velocity(g, 0.1)
        np.testing.assert_allclose(mid.u, 0.4, atol=1e-13)
        np.testing.assert_allclose(mid.v, -0.2, atol=1e-13)

    def test_taylor_green_second_order(self):
        # the inviscid Taylor-Green array is a steady Euler solution
        errs = []
        for dt in (0.02, 0.01):
            g = taylor_green(64)
            u0 = g.u.copy()
            mid = estimate_midpoint_velocity(g, dt)
            at_max = np.abs(u0) > 0.95 * np.abs(u0).max()
            errs.append(np.abs(mid.u - u0)[at_max].max())
        assert errs[0] < 5e-3
        assert errs[1] <= errs[0]
