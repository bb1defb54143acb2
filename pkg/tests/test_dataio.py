import numpy as np
import pytest

from lcsmooth import dataio, frontend, lie
from lcsmooth.factors import LoopClosureMeasurement
from lcsmooth.trajectory import Trajectory

from conftest import random_pose


class TestQuaternions:
    def test_roundtrip_random(self, rng):
        for _ in range(200):
            C = random_pose(rng)[:3, :3]
            q = dataio.quat_from_rotation(C)
            assert abs(np.linalg.norm(q) - 1.0) < 1e-12
            assert np.abs(dataio.rotation_from_quat(q) - C).max() < 1e-12

    def test_near_pi_rotations(self, rng):
        for axis in (np.eye(3)):
            C = lie.so3_exp((np.pi - 1e-5) * axis)
            q = dataio.quat_from_rotation(C)
            assert np.abs(dataio.rotation_from_quat(q) - C).max() < 1e-12

    def test_scalar_first_hamilton(self):
        # 90 degrees about z
        q = dataio.quat_from_rotation(lie.so3_exp(np.array([0, 0, np.pi / 2])))
        assert np.allclose(q, [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])


class TestTrajectoryCsv:
    def test_roundtrip_exact(self, rng, tmp_path):
        n = 25
        poses = np.stack([random_pose(rng) for _ in range(n)])
        traj = Trajectory(times=np.sort(rng.uniform(0, 100, n)), poses=poses)
        path = tmp_path / "traj.csv"
        dataio.write_trajectory(path, traj)
        back = dataio.read_trajectory(path)
        assert np.array_equal(back.times, traj.times)
        assert np.abs(back.positions - traj.positions).max() == 0.0
        assert np.abs(back.poses - traj.poses).max() < 1e-12

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,rx,ry,rz,qw,qx,qy,qz\n0.0,1.0,nope,3\n")
        with pytest.raises(ValueError, match="malformed|columns"):
            dataio.read_trajectory(path)


class TestProfilesCsv:
    def test_roundtrip(self, rng, tmp_path):
        profiles = [
            frontend.LaserProfile(0.05 * k, rng.normal(size=(rng.integers(1, 6), 3)))
            for k in range(10)
        ]
        path = tmp_path / "profiles.csv"
        dataio.write_profiles(path, profiles)
        back = dataio.read_profiles(path)
        assert len(back) == len(profiles)
        for a, b in zip(profiles, back):
            assert b.timestamp == a.timestamp
            assert np.array_equal(a.points, b.points)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "profiles.csv"
        dataio.write_profiles(path, [])
        assert dataio.read_profiles(path) == []


class TestLoopClosureCsv:
    def test_roundtrip(self, rng, tmp_path):
        times = np.arange(100) * 0.1
        meas = [
            LoopClosureMeasurement(
                3, 77, random_pose(rng),
                np.diag(rng.uniform(1e-6, 1e-2, 6)),
            ),
            LoopClosureMeasurement(
                10, 50, random_pose(rng), np.diag(np.full(6, 1e-4))
            ),
        ]
        path = tmp_path / "lc.csv"
        dataio.write_loop_closures(path, meas, times)
        back = dataio.read_loop_closures(path, times)
        for a, b in zip(meas, back):
            assert (a.idx_l1, a.idx_l2) == (b.idx_l1, b.idx_l2)
            assert np.abs(a.xi_meas - b.xi_meas).max() == 0.0
            assert np.array_equal(np.diag(a.cov), np.diag(b.cov))

    def test_unresolvable_time_raises(self, rng, tmp_path):
        times = np.arange(10) * 1.0
        meas = [LoopClosureMeasurement(0, 5, random_pose(rng), np.eye(6) * 1e-4)]
        path = tmp_path / "lc.csv"
        dataio.write_loop_closures(path, meas, times)
        with pytest.raises(ValueError, match="half a sample period"):
            dataio.read_loop_closures(path, times + 0.7)


class TestPly:
    def test_roundtrip_with_normals(self, rng, tmp_path):
        pts = rng.normal(size=(50, 3))
        nrm = rng.normal(size=(50, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        path = tmp_path / "cloud.ply"
        dataio.write_ply(path, pts, nrm)
        p, n = dataio.read_ply(path)
        assert np.abs(p - pts).max() == 0.0
        assert np.abs(n - nrm).max() == 0.0

    def test_roundtrip_points_only(self, rng, tmp_path):
        pts = rng.normal(size=(5, 3))
        path = tmp_path / "cloud.ply"
        dataio.write_ply(path, pts)
        p, n = dataio.read_ply(path)
        assert n is None
        assert np.array_equal(p, pts)


class TestConfig:
    def test_parse_and_hash(self):
        text = """
        # comment
        wnoa.q_omega = 1e-2
        sim.seed = 7   # trailing comment
        """
        values = dataio.parse_config_text(text)
        assert values == {"wnoa.q_omega": "1e-2", "sim.seed": "7"}
        assert dataio.config_hash(values) == dataio.config_hash(dict(reversed(values.items())))

    def test_bad_line(self):
        with pytest.raises(ValueError, match="line 2"):
            dataio.parse_config_text("a.b = 1\nnot a config line\n")

    def test_file_roundtrip(self, tmp_path):
        values = {"a.x": "1.5", "b.y": "true"}
        path = tmp_path / "c.cfg"
        dataio.write_config(path, values)
        assert dataio.read_config(path) == values
