import warnings

import numpy as np
import pytest

from pfm_fsi.cli import main
from pfm_fsi.config import SimConfig, config_from_dict, validate
from pfm_fsi.diagnostics import read_trace
from pfm_fsi.driver import Simulation, compute_dt, run
from pfm_fsi.errors import ConfigError, UnderResolved
from pfm_fsi.grid import Boundaries, MacGrid, load_grid
from pfm_fsi.scenarios import CATALOG


def small(scenario="taylor_green", **kw):
    cfg = SimConfig(scenario=scenario, **kw)
    return validate(cfg)


class TestComputeDt:
    def grid(self, speed):
        g = MacGrid(128, 128, 1 / 128, Boundaries.periodic())
        g.u[3, 4] = speed
        return g

    def test_plug_in(self):
        assert compute_dt(self.grid(0.16), 0.5) == pytest.approx(0.5 / 128 / 0.16)
        assert compute_dt(self.grid(0.16), 0.5) == pytest.approx(0.0244, abs=1e-4)

    def test_zero_field_hits_ceiling(self):
        assert compute_dt(self.grid(0.0), 0.5) == pytest.approx(1 / 24)

    def test_linear_in_cfl(self):
        g = self.grid(0.16)
        assert compute_dt(g, 0.25) == pytest.approx(0.5 * compute_dt(g, 0.5))

    def test_floor(self):
        assert compute_dt(self.grid(1e9), 0.5) == 1e-5


class TestStep:
    def test_fixed_point(self):
        cfg = small(nx=16, ny=16, particles_per_cell=4)
        cfg.scene = {"amplitude": 0.0}
        sim = Simulation(cfg)
        for _ in range(3):
            sim.step()
        assert not sim.grid.u.any() and not sim.grid.v.any()

    @pytest.mark.parametrize("method", ["pfm", "apic_midpoint", "euler_sl"])
    def test_divergence_free_after_step(self, method):
        sim = Simulation(small(nx=32, ny=32, method=method, particles_per_cell=4))
        for _ in range(3):
            sim.step()
        scale = sim.grid.max_speed() / sim.grid.dx
        assert np.abs(np.diff(sim.grid.u, axis=0) + np.diff(sim.grid.v, axis=1)).max() / sim.grid.dx \
            <= 1e-5 * scale

    def test_kinetic_velocity_variants_agree_at_first_step(self):
        # right after reinit both fields start from the same projected state
        sims = []
        for ke in ("mid", "previous"):
            sim = Simulation(small(nx=32, ny=32, particles_per_cell=4, kinetic_velocity=ke))
            sim.step()
            sims.append(sim)
        a, b = sims
        assert np.abs(a.grid.u - b.grid.u).max() < 0.05 * a.grid.max_speed()

    @pytest.mark.parametrize("name", sorted(CATALOG))
    def test_every_scenario_steps(self, name):
        spec = CATALOG[name]
        scale = max(1, min(spec.nx, spec.ny) // 32)
        cfg = small(name, nx=spec.nx // scale, ny=spec.ny // scale, particles_per_cell=4)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnderResolved)
            sim = Simulation(cfg)
            sim.step()
        assert np.isfinite(sim.grid.u).all() and sim.t > 0


class TestConfig:
    def test_unknown_scenario(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"scenario": "nope"})
        assert info.value.field == "scenario"

    def test_unknown_field(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"scenario": "karman", "output": {"strid": 2}})
        assert info.value.field == "output.strid"

    def test_incompatible_method(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"scenario": "karman", "method": "direct_hfmc"})
        assert info.value.field == "method"

    def test_catalog_defaults(self):
        cfg = config_from_dict({"scenario": "falling_sphere_ablation"})
        assert (cfg.nx, cfg.ny, cfg.backend) == (128, 384, "mpm")
        assert (cfg.cfl, cfg.n_reinit, cfg.particles_per_cell) == (0.5, 20, 16)

    def test_bad_kinetic_velocity(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"kinetic_velocity": "end"})
        assert info.value.field == "kinetic_velocity"

    def test_bad_cfl(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"cfl": 1.5})
        assert info.value.field == "cfl"


class TestRun:
    def cfg(self, tmp_path, **kw):
        cfg = small(nx=16, ny=16, particles_per_cell=4, **kw)
        cfg.output.directory = str(tmp_path)
        return cfg

    def test_frames_zero(self, tmp_path):
        run(self.cfg(tmp_path, frames=0))
        _, data = read_trace(tmp_path / "trace.csv")
        assert data.shape[0] == 1 and data[0, 0] == 0.0

    def test_stride_frames(self, tmp_path):
        cfg = self.cfg(tmp_path, frames=10)
        cfg.output.stride = 10
        sim = run(cfg)
        _, data = read_trace(tmp_path / "trace.csv")
        assert sim.steps == 100
        assert data.shape[0] == 11
        assert np.all(np.diff(data[:, 0]) > 0) and np.isfinite(data).all()
        assert len(list(tmp_path.glob("vort_*.pgm"))) == 11

    def test_deterministic(self, tmp_path):
        traces = []
        for k in range(2):
            cfg = self.cfg(tmp_path / str(k), frames=4, seed=11)
            cfg.output.dump_grids = True
            run(cfg)
            traces.append((tmp_path / str(k) / "trace.csv").read_bytes())
        assert traces[0] == traces[1]
        a = load_grid(tmp_path / "0" / "grid_00004.macg")
        b = load_grid(tmp_path / "1" / "grid_00004.macg")
        np.testing.assert_array_equal(a.u, b.u)

    def test_nan_aborts_with_dump(self, tmp_path):
        from pfm_fsi.errors import SimulationError

        def poison(sim):
            sim.grid.u[5, 5] = np.nan

        with pytest.raises(SimulationError):
            run(self.cfg(tmp_path, frames=3), callback=poison)
        assert (tmp_path / "failure.macg").exists()

    def test_frames_pass_divergence_bound(self, tmp_path):
        run(self.cfg(tmp_path, frames=3))
        _, data = read_trace(tmp_path / "divergence.csv")
        assert data[:, 2].max() < 1e-3


class TestCli:
    def write(self, tmp_path, text):
        path = tmp_path / "c.toml"
        path.write_text(text)
        return str(path)

    def test_simulate_and_diff(self, tmp_path, capsys):
        conf = self.write(tmp_path, 'scenario = "taylor_green"\nnx = 16\nny = 16\nparticles_per_cell = 4\n')
        for name in ("a", "b"):
            assert main(["simulate", "--config", conf, "--frames", "2",
                         "--output", str(tmp_path / name), "--seed", "3"]) == 0
        assert main(["diff-trace", str(tmp_path / "a" / "trace.csv"),
                     str(tmp_path / "b" / "trace.csv"), "--tol", "0"]) == 0

    def test_config_error_exit(self, tmp_path, capsys):
        conf = self.write(tmp_path, 'scenario = "unknown"\n')
        assert main(["simulate", "--config", conf]) == 2
        assert "scenario" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "none.toml")]) == 2

    def test_numerical_failure_exit(self, tmp_path):
        conf = self.write(tmp_path, 'scenario = "taylor_green"\nnx = 16\nny = 16\n'
                                    'particles_per_cell = 4\nsolver_maxiter = 1\nsolver_rtol = 1e-14\n')
        assert main(["simulate", "--config", conf, "--frames", "1",
                     "--output", str(tmp_path / "o")]) == 3

    def test_scenarios_list(self, capsys):
        assert main(["scenarios", "list"]) == 0
        out = capsys.readouterr().out
        for name in CATALOG:
            assert name in out
