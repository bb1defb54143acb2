"""File formats: trajectory/profile/loop-closure CSV, PLY clouds, flat config.

Rotations are stored as unit quaternions (Hamilton convention, scalar first)
only at this boundary; everything in memory is matrices.  Floats are written
with 17 significant digits so write-then-read round-trips are exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import lie
from .factors import LoopClosureMeasurement
from .frontend import LaserProfile
from .trajectory import Trajectory

_FMT = "%.17g"


def quat_from_rotation(C):
    """Unit quaternion (w, x, y, z) from a rotation matrix (Shepperd's method)."""
    C = np.asarray(C, dtype=float)
    single = C.ndim == 2
    C = np.atleast_3d(C.reshape(-1, 3, 3))
    q = np.empty((len(C), 4))
    tr = np.trace(C, axis1=-2, axis2=-1)
    choice = np.argmax(
        np.stack([tr, C[:, 0, 0], C[:, 1, 1], C[:, 2, 2]], axis=1), axis=1
    )
    for i, (M, c) in enumerate(zip(C, choice)):
        if c == 0:
            s = np.sqrt(1.0 + tr[i]) * 2.0
            q[i] = [0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s,
                    (M[1, 0] - M[0, 1]) / s]
        elif c == 1:
            s = np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2]) * 2.0
            q[i] = [(M[2, 1] - M[1, 2]) / s, 0.25 * s,
                    (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s]
        elif c == 2:
            s = np.sqrt(1.0 - M[0, 0] + M[1, 1] - M[2, 2]) * 2.0
            q[i] = [(M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s,
                    0.25 * s, (M[1, 2] + M[2, 1]) / s]
        else:
            s = np.sqrt(1.0 - M[0, 0] - M[1, 1] + M[2, 2]) * 2.0
            q[i] = [(M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s,
                    (M[1, 2] + M[2, 1]) / s, 0.25 * s]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    # canonical sign: non-negative scalar part
    q[q[:, 0] < 0] *= -1.0
    return q[0] if single else q


def rotation_from_quat(q):
    """Rotation matrix from a (w, x, y, z) quaternion; normalizes first."""
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    C = np.empty((len(q), 3, 3))
    C[:, 0, 0] = 1 - 2 * (y * y + z * z)
    C[:, 0, 1] = 2 * (x * y - z * w)
    C[:, 0, 2] = 2 * (x * z + y * w)
    C[:, 1, 0] = 2 * (x * y + z * w)
    C[:, 1, 1] = 1 - 2 * (x * x + z * z)
    C[:, 1, 2] = 2 * (y * z - x * w)
    C[:, 2, 0] = 2 * (x * z - y * w)
    C[:, 2, 1] = 2 * (y * z + x * w)
    C[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return C[0] if single else C


# ---------------------------------------------------------------------------
# Trajectory CSV: t, rx, ry, rz, qw, qx, qy, qz


def write_trajectory(path, trajectory: Trajectory):
    q = quat_from_rotation(trajectory.poses[:, :3, :3])
    data = np.hstack(
        [trajectory.times[:, None], trajectory.positions, q]
    )
    header = "t,rx,ry,rz,qw,qx,qy,qz"
    np.savetxt(path, data, fmt=_FMT, delimiter=",", header=header, comments="")


def read_trajectory(path) -> Trajectory:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed trajectory CSV: {exc}") from exc
    if data.shape[1] != 8:
        raise ValueError(f"{path}: expected 8 columns, found {data.shape[1]}")
    C = rotation_from_quat(data[:, 4:8])
    poses = lie.make_pose(C, data[:, 1:4])
    return Trajectory(times=data[:, 0], poses=poses)


# ---------------------------------------------------------------------------
# Profiles CSV: t, x, y, z (one point per row, grouped by timestamp)


def write_profiles(path, profiles):
    rows = []
    for p in profiles:
        stamped = np.hstack(
            [np.full((len(p.points), 1), p.timestamp), p.points]
        )
        rows.append(stamped)
    data = np.vstack(rows) if rows else np.zeros((0, 4))
    np.savetxt(path, data, fmt=_FMT, delimiter=",", header="t,x,y,z", comments="")


def _load_csv(path, what):
    with open(path) as f:
        lines = f.read().splitlines()
    if len(lines) <= 1:
        return np.zeros((0, 0))
    try:
        return np.loadtxt(lines[1:], delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed {what} CSV: {exc}") from exc


def read_profiles(path):
    data = _load_csv(path, "profile")
    if data.size == 0:
        return []
    if data.shape[1] != 4:
        raise ValueError(f"{path}: expected 4 columns, found {data.shape[1]}")
    profiles = []
    # consecutive rows with the same stamp form one profile
    boundaries = np.flatnonzero(np.diff(data[:, 0]) != 0) + 1
    for chunk in np.split(data, boundaries):
        profiles.append(LaserProfile(float(chunk[0, 0]), chunk[:, 1:4]))
    return profiles


# ---------------------------------------------------------------------------
# Loop-closure CSV: t_l1, t_l2, 9 rotation entries (row-major), 3 position
# entries, 6 covariance diagonal entries (phi then rho)


def write_loop_closures(path, measurements, times):
    rows = []
    for m in measurements:
        C = m.xi_meas[:3, :3].reshape(-1)
        r = m.xi_meas[:3, 3]
        var = np.diag(m.cov)
        rows.append(
            np.concatenate([[times[m.idx_l1], times[m.idx_l2]], C, r, var])
        )
    data = np.vstack(rows) if rows else np.zeros((0, 20))
    header = "t_l1,t_l2," + ",".join(
        [f"c{i}{j}" for i in range(3) for j in range(3)]
    ) + ",rx,ry,rz," + ",".join([f"var{i}" for i in range(6)])
    np.savetxt(path, data, fmt=_FMT, delimiter=",", header=header, comments="")


def read_loop_closures(path, times):
    """Read loop closures, resolving timestamps to node indices.

    A timestamp must land within half a sample period of a node; otherwise a
    ValueError asks the caller to insert an interpolated node.
    """
    data = _load_csv(path, "loop-closure")
    if data.size == 0:
        return []
    if data.shape[1] != 20:
        raise ValueError(f"{path}: expected 20 columns, found {data.shape[1]}")
    times = np.asarray(times, dtype=float)
    half_period = 0.5 * np.median(np.diff(times)) if len(times) > 1 else 0.0
    out = []
    for row in data:
        idx = []
        for t in row[:2]:
            i = int(np.argmin(np.abs(times - t)))
            if abs(times[i] - t) > half_period + 1e-12:
                raise ValueError(
                    f"loop-closure time {t} is not within half a sample period "
                    "of any node"
                )
            idx.append(i)
        pose = lie.make_pose(row[2:11].reshape(3, 3), row[11:14])
        cov = np.diag(row[14:20])
        out.append(LoopClosureMeasurement(idx[0], idx[1], pose, cov))
    return out


# ---------------------------------------------------------------------------
# ASCII PLY point clouds: x y z [nx ny nz]


def write_ply(path, points, normals=None):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property double x\nproperty double y\nproperty double z\n")
        if normals is not None:
            f.write(
                "property double nx\nproperty double ny\nproperty double nz\n"
            )
        f.write("end_header\n")
        data = points if normals is None else np.hstack([points, normals])
        np.savetxt(f, data, fmt=_FMT)


def read_ply(path):
    """Read an ASCII PLY; returns (points, normals or None)."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vertex = None
        props = []
        for line in f:
            tok = line.split()
            if tok[0] == "element" and tok[1] == "vertex":
                n_vertex = int(tok[2])
            elif tok[0] == "property":
                props.append(tok[2])
            elif tok[0] == "format" and tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            elif tok[0] == "end_header":
                break
        if n_vertex is None:
            raise ValueError(f"{path}: missing vertex element")
        data = np.loadtxt(f, max_rows=n_vertex, ndmin=2) if n_vertex else np.zeros((0, len(props)))
    has_normals = props[:6] == ["x", "y", "z", "nx", "ny", "nz"]
    points = data[:, :3]
    normals = data[:, 3:6] if has_normals else None
    return points, normals


# ---------------------------------------------------------------------------
# Flat key-value configuration and the dataset manifest


def parse_config_text(text):
    """Flat ``section.key = value`` lines; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def read_config(path):
    return parse_config_text(Path(path).read_text())


def write_config(path, values):
    lines = [f"{k} = {v}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def config_hash(values):
    canonical = "\n".join(f"{k} = {v}" for k, v in sorted(values.items()))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path):
    return json.loads(Path(path).read_text())
