import numpy as np
import pytest

from koopflow import systems
from koopflow.errors import FactorTooLarge, NonFinite


class TestRhs:
    def test_lorenz_origin_fixed(self):
        assert np.array_equal(systems.lorenz_rhs(np.zeros(3)), np.zeros(3))

    def test_lorenz_nontrivial_fixed_point(self):
        # (sqrt(b(r-1)), sqrt(b(r-1)), r-1) with b(r-1) = (8/3)*27 = 72.
        fp = np.array([np.sqrt(72.0), np.sqrt(72.0), 27.0])
        assert np.allclose(systems.lorenz_rhs(fp), 0.0, atol=1e-12)

    def test_lorenz_direct_substitution(self):
        out = systems.lorenz_rhs(np.array([1.0, 1.0, 1.0]))
        assert np.allclose(out, [0.0, 26.0, -5.0 / 3.0], atol=1e-14)

    def test_pendulum(self):
        assert np.array_equal(systems.pendulum_rhs(np.zeros(2)), np.zeros(2))
        assert np.allclose(systems.pendulum_rhs(np.array([np.pi / 2, 0.0])), [0.0, -1.0])
        assert np.allclose(systems.pendulum_rhs(np.array([0.0, 1.0])), [1.0, 0.0])

    def test_fluidflow(self):
        assert np.array_equal(systems.fluidflow_rhs(np.zeros(3)), np.zeros(3))
        assert np.allclose(systems.fluidflow_rhs(np.array([1.0, 0.0, 1.0])), [0.0, 1.0, 0.0])
        assert np.allclose(systems.fluidflow_rhs(np.array([0.0, 0.0, 1.0])), [0.0, 0.0, -10.0])

    def test_lorenz_jacobian_matches_fd(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=3) * 5
        j = systems.lorenz_jacobian(x)
        h = 1e-6
        for col in range(3):
            e = np.zeros(3)
            e[col] = h
            fd = (systems.lorenz_rhs(x + e) - systems.lorenz_rhs(x - e)) / (2 * h)
            assert np.allclose(j[:, col], fd, atol=1e-6)


class TestRk4:
    def test_zero_rhs_identity(self):
        s = np.array([1.5, -2.0])
        assert np.array_equal(systems.rk4_step(lambda v: np.zeros(2), s, 0.3), s)

    def test_exponential_decay_step(self):
        out = systems.rk4_step(lambda v: -v, np.array([1.0]), 0.1)
        assert out[0] == pytest.approx(0.9048375, abs=1e-12)
        assert abs(out[0] - np.exp(-0.1)) < 1e-7

    def test_pendulum_energy_conservation_one_period(self):
        # Energy oracle E = thetadot^2/2 + (1 - cos theta).
        def energy(s):
            return 0.5 * s[1] ** 2 + (1.0 - np.cos(s[0]))

        s = np.array([0.1, 0.0])
        e0 = energy(s)
        for _ in range(round(2 * np.pi / 0.001)):
            s = systems.rk4_step(systems.pendulum_rhs, s, 0.001)
            assert abs(energy(s) - e0) / e0 < 1e-9

    def test_fourth_order_convergence(self):
        def global_error(dt):
            s = np.array([1.0])
            for _ in range(round(1.0 / dt)):
                s = systems.rk4_step(lambda v: -v, s, dt)
            return abs(s[0] - np.exp(-1.0))

        e1, e2, e3 = (global_error(dt) for dt in (0.1, 0.05, 0.025))
        assert 12.0 <= e1 / e2 <= 20.0
        assert 12.0 <= e2 / e3 <= 20.0

    def test_nonfinite_detected(self):
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFinite):
                systems.rk4_step(lambda v: v**3, np.array([1e100]), 10.0)


class TestSimulate:
    def test_fixed_point_stays(self):
        sysp = systems.get_system("pendulum")
        traj = systems.simulate(sysp, np.zeros(2), 0.1, 10, substeps=3)
        assert traj.n_samples == 11
        assert np.array_equal(traj.states, np.zeros((11, 2)))

    def test_small_angle_matches_linearization(self):
        # theta(t) ~ 0.1 cos(t); the small-angle frequency shift (1 - a^2/16)
        # bounds the deviation near 5e-4 over 10 s (recomputed oracle).
        sysp = systems.get_system("pendulum")
        traj = systems.simulate(sysp, np.array([0.1, 0.0]), 0.01, 1000, substeps=10)
        dev = np.max(np.abs(traj.states[:, 0] - 0.1 * np.cos(traj.times())))
        assert dev < 6e-4
        # And the integration itself is far tighter than the linearization gap.
        ref = systems.simulate(sysp, np.array([0.1, 0.0]), 0.01, 1000, substeps=100)
        assert np.max(np.abs(traj.states - ref.states)) < 1e-9

    def test_lorenz_attractor_bounded(self):
        sysl = systems.get_system("lorenz63")
        traj = systems.simulate(sysl, np.array([1.0, 1.0, 20.0]), 0.01, 10000, substeps=10)
        xyz = traj.states[:, :3]
        assert np.all(np.abs(xyz[:, 0]) < 30.0)
        assert np.all(np.abs(xyz[:, 1]) < 30.0)
        assert np.all((xyz[:, 2] > 0.0) & (xyz[:, 2] < 60.0))

    def test_substeps_equivalence_exact(self):
        sysl = systems.get_system("lorenz63")
        x0 = np.array([0.5, -0.5, 15.0])
        coarse = systems.simulate(sysl, x0, 0.05, 8, substeps=5)
        fine = systems.simulate(sysl, x0, 0.05 / 5, 40, substeps=1)
        assert np.array_equal(coarse.states, fine.states[::5])

    def test_lorenz_observation_contains_exact_derivatives(self):
        sysl = systems.get_system("lorenz63")
        traj = systems.simulate(sysl, np.array([2.0, -1.0, 25.0]), 0.02, 50, substeps=4)
        for row in traj.states:
            assert np.array_equal(row[3:], systems.lorenz_rhs(row[:3]))


class TestSubsample:
    def _traj(self, t_len):
        states = np.arange(t_len * 2, dtype=float).reshape(t_len, 2)
        return systems.Trajectory(t0=0.0, dt=0.01, states=states)

    def test_factor_one_identity(self):
        traj = self._traj(10)
        assert systems.subsample(traj, 1) is traj

    def test_pendulum_lf_shape(self):
        out = systems.subsample(self._traj(1001), 20)
        assert out.n_samples == 51
        assert out.dt == pytest.approx(0.2)

    def test_fluid_lf_shape(self):
        traj = systems.Trajectory(t0=0.0, dt=0.02, states=np.zeros((121, 3)) + np.arange(121)[:, None])
        out = systems.subsample(traj, 20)
        assert out.n_samples == 7
        assert out.dt == pytest.approx(0.4)

    def test_composition(self):
        traj = self._traj(241)
        ab = systems.subsample(systems.subsample(traj, 4), 3)
        direct = systems.subsample(traj, 12)
        assert np.array_equal(ab.states, direct.states)
        assert ab.dt == direct.dt

    def test_factor_too_large(self):
        with pytest.raises(FactorTooLarge):
            systems.subsample(self._traj(10), 10)


class TestGenerateDataset:
    def _config(self, **kw):
        base = dict(system="pendulum", dt=0.05, duration=0.5,
                    counts=(3, 2, 1), seed=42, substeps=2)
        base.update(kw)
        return systems.GenerateConfig(**base)

    def test_fencepost_duration(self):
        ds = systems.generate_dataset(self._config())
        assert all(t.n_samples == 11 for t in ds.split("train"))
        cfg = systems.GenerateConfig(system="pendulum", dt=0.01, duration=10.0,
                                     counts=(1, 0, 0), seed=1, substeps=1)
        assert cfg.samples_per_trajectory() == 1001

    def test_explicit_sample_count(self):
        cfg = self._config(duration=None, n_samples=121)
        assert cfg.samples_per_trajectory() == 121

    def test_counts_and_meta(self):
        ds = systems.generate_dataset(self._config())
        assert [len(ds.split(s)) for s in ("train", "val", "test")] == [3, 2, 1]
        assert ds.meta["seed"] == 42
        assert ds.meta["counts"] == {"train": 3, "val": 2, "test": 1}
        assert "params" in ds.meta

    def test_empty_dataset_valid(self):
        ds = systems.generate_dataset(self._config(counts=(0, 0, 0)))
        assert all(len(trs) == 0 for trs in ds.splits.values())

    def test_pendulum_initial_conditions(self):
        ds = systems.generate_dataset(self._config(counts=(20, 0, 0)))
        for traj in ds.split("train"):
            theta0, thetadot0 = traj.states[0]
            assert -3.0 <= theta0 <= 3.0
            assert thetadot0 == 0.0

    def test_reproducible_bytes(self, tmp_path):
        a = systems.generate_dataset(self._config())
        b = systems.generate_dataset(self._config())
        systems.save_dataset(a, tmp_path / "a")
        systems.save_dataset(b, tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_parallel_generation_identical(self, monkeypatch, tmp_path):
        serial = systems.generate_dataset(self._config())
        monkeypatch.setenv("KOOPFLOW_THREADS", "4")
        parallel = systems.generate_dataset(self._config())
        for split in ("train", "val", "test"):
            for a, b in zip(serial.split(split), parallel.split(split)):
                assert np.array_equal(a.states, b.states)


class TestDiskFormat:
    def test_trajectory_csv_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        traj = systems.Trajectory(t0=0.25, dt=0.01, states=rng.normal(size=(9, 3)))
        path = tmp_path / "t.csv"
        systems.save_trajectory_csv(traj, path)
        header = path.read_text().split("\n")[0]
        assert header == "t,x1,x2,x3"
        loaded = systems.load_trajectory_csv(path)
        assert np.array_equal(loaded.states, traj.states)
        assert loaded.t0 == traj.t0

    def test_dataset_roundtrip(self, tmp_path):
        cfg = systems.GenerateConfig(system="fluidflow", dt=0.05, duration=0.4,
                                     counts=(2, 1, 1), seed=3, substeps=2)
        ds = systems.generate_dataset(cfg)
        systems.save_dataset(ds, tmp_path / "ds")
        loaded = systems.load_dataset(tmp_path / "ds")
        assert loaded.system == "fluidflow"
        assert loaded.meta["dt"] == ds.meta["dt"]
        for split in ("train", "val", "test"):
            for a, b in zip(ds.split(split), loaded.split(split)):
                assert np.array_equal(a.states, b.states)
