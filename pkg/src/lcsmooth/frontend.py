"""Laser point-cloud front end.

Registers raw line-scanner profiles onto a trajectory estimate, finds
path crossings, extracts body-frame submaps around them, and aligns submap
pairs with a mixed point-to-point / point-to-plane ICP to produce
loop-closure measurements.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import lie
from .factors import LoopClosureMeasurement
from .trajectory import Trajectory


class InsufficientOverlapError(RuntimeError):
    """Too few points in the requested submap region."""


class AlignmentFailureError(RuntimeError):
    """ICP rejected the alignment (diverging or too few inliers)."""


@dataclass
class LaserProfile:
    """One line-scanner return: sensor-frame points captured at a single time."""

    timestamp: float
    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size == 0 or self.points.shape[-1] != 3:
            raise ValueError("profile needs at least one 3D point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("profile points must be finite")


@dataclass
class PointCloud:
    points: np.ndarray
    times: np.ndarray | None = None
    frame: str = "world"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float).reshape(-1)
            if len(self.times) != len(self.points):
                raise ValueError("times must match points")

    def __len__(self):
        return len(self.points)


@dataclass
class Submap:
    """Body-frame point patch around an anchor node, ready for alignment."""

    points: np.ndarray
    normals: np.ndarray | None = None
    variation: np.ndarray | None = None
    normal_valid: np.ndarray | None = None
    frame: str = "body"
    anchor_index: int = -1
    anchor_time: float = np.nan

    def __len__(self):
        return len(self.points)


@dataclass
class Crossing:
    idx1: int
    idx2: int
    t1: float
    t2: float
    distance: float


@dataclass
class IcpParams:
    voxel_cell: float = 0.05
    normal_neighbors: int = 40
    variation_threshold: float = 3e-2
    max_iterations: int = 20
    rot_tol: float = 1e-2
    trans_tol: float = 1e-3
    frmsd_lambda: float = 0.95
    min_inlier_fraction: float = 0.2
    frmsd_step: float = 0.05
    min_points: int = 100
    divergence_limit: int = 3
    sigma_point: float | None = None  # default: voxel_cell / 2

    @property
    def point_sigma(self):
        return self.sigma_point if self.sigma_point is not None else self.voxel_cell / 2.0


@dataclass
class IcpReport:
    iterations: int
    converged: bool
    inlier_fraction: float
    rmsd: float
    objective: float
    num_correspondences: int
    objective_trace: list = field(default_factory=list)
    # per iteration: fixed-correspondence objective (before, after) the update
    step_objectives: list = field(default_factory=list)


def register_profiles(profiles, trajectory: Trajectory, extrinsics=None):
    """Map sensor-frame profiles into the world frame along the trajectory.

    The trajectory is interpolated at each profile timestamp; profiles whose
    timestamps fall outside the trajectory span are rejected.  Returns the
    world-frame cloud (with per-point capture times) and the rejected count.
    """
    extrinsics = np.eye(4) if extrinsics is None else np.asarray(extrinsics, float)
    stamps = np.array([p.timestamp for p in profiles])
    in_span = (stamps >= trajectory.times[0]) & (stamps <= trajectory.times[-1])
    rejected = int(np.sum(~in_span))
    kept = [p for p, ok in zip(profiles, in_span) if ok]
    if not kept:
        return PointCloud(np.zeros((0, 3)), np.zeros(0)), rejected
    sensor_poses = trajectory.pose_at(stamps[in_span]) @ extrinsics
    pts = []
    times = []
    for pose, prof in zip(sensor_poses, kept):
        pts.append(prof.points @ pose[:3, :3].T + pose[:3, 3])
        times.append(np.full(len(prof.points), prof.timestamp))
    return PointCloud(np.vstack(pts), np.concatenate(times)), rejected


def detect_crossings(trajectory: Trajectory, delta_r_star=5.0, min_time_separation=30.0):
    """Path self-crossings: node pairs within a planar radius but far in time.

    Candidate pairs come from a KD-tree radius search on (x, y); one pair per
    crossing event is kept by greedy non-maximum suppression on planar
    distance, where candidates within ``min_time_separation`` of an accepted
    pair at both endpoints belong to the same event.
    """
    xy = trajectory.positions[:, :2]
    t = trajectory.times
    pairs = cKDTree(xy).query_pairs(r=delta_r_star, output_type="ndarray")
    if len(pairs) == 0:
        return []
    dt = t[pairs[:, 1]] - t[pairs[:, 0]]
    pairs = pairs[dt >= min_time_separation]
    if len(pairs) == 0:
        return []
    dist = np.linalg.norm(xy[pairs[:, 0]] - xy[pairs[:, 1]], axis=1)
    order = np.lexsort((t[pairs[:, 1]], t[pairs[:, 0]], dist))
    pairs = pairs[order]
    dist = dist[order]
    t1 = t[pairs[:, 0]]
    t2 = t[pairs[:, 1]]
    crossings = []
    alive = np.ones(len(pairs), bool)
    for i in range(len(pairs)):
        if not alive[i]:
            continue
        crossings.append(
            Crossing(int(pairs[i, 0]), int(pairs[i, 1]), t1[i], t2[i], float(dist[i]))
        )
        same_event = (np.abs(t1 - t1[i]) <= min_time_separation) & (
            np.abs(t2 - t2[i]) <= min_time_separation
        )
        alive &= ~same_event
    crossings.sort(key=lambda c: (c.t1, c.t2))
    return crossings


def extract_submap(
    cloud: PointCloud,
    anchor_pose,
    delta_r_star=5.0,
    anchor_index=-1,
    anchor_time=None,
    time_window=None,
    min_points=100,
):
    """Body-frame submap of the points within a planar radius of the anchor.

    When ``anchor_time``/``time_window`` are given, only points captured
    within the window are kept, so revisited terrain yields one submap per
    pass rather than a mixture.
    """
    anchor_pose = np.asarray(anchor_pose, dtype=float)
    d_xy = np.linalg.norm(cloud.points[:, :2] - anchor_pose[:2, 3], axis=1)
    mask = d_xy <= delta_r_star
    if anchor_time is not None and time_window is not None:
        if cloud.times is None:
            raise ValueError("cloud has no per-point times for time gating")
        mask &= np.abs(cloud.times - anchor_time) <= time_window
    if int(mask.sum()) < min_points:
        raise InsufficientOverlapError(
            f"submap at anchor {anchor_index} has {int(mask.sum())} points "
            f"(minimum {min_points})"
        )
    pts = cloud.points[mask]
    inv = lie.se3_inv(anchor_pose)
    body = pts @ inv[:3, :3].T + inv[:3, 3]
    return Submap(
        points=body,
        anchor_index=anchor_index,
        anchor_time=np.nan if anchor_time is None else float(anchor_time),
    )


def voxel_downsample(points, cell):
    """One centroid per occupied voxel; the rule is independent of point order."""
    if cell <= 0:
        raise ValueError("cell must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points.copy()
    keys = np.floor(points / cell).astype(np.int64)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


def estimate_normals_and_variation(submap: Submap, k=40, viewpoint=(0.0, 0.0, 0.0)):
    """Neighborhood-PCA normals and surface variation for each point.

    The normal is the smallest-eigenvalue direction of the k-nearest-neighbor
    covariance, oriented toward ``viewpoint``; the variation is the smallest
    eigenvalue over the eigenvalue sum (0 on a plane, up to 1/3 for isotropic
    scatter).  Points whose neighborhoods are rank-deficient are flagged and
    excluded from plane errors downstream.
    """
    pts = submap.points
    if len(pts) < k + 1:
        raise InsufficientOverlapError(f"need at least {k + 1} points for normals")
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    total = evals.sum(axis=1)
    variation = np.where(total > 0, evals[:, 0] / np.where(total > 0, total, 1.0), 0.0)
    # rank >= 2 requires a healthy middle eigenvalue
    valid = evals[:, 1] > 1e-8 * np.maximum(evals[:, 2], 1e-300)
    to_view = np.asarray(viewpoint, dtype=float) - pts
    flip = np.einsum("ni,ni->n", normals, to_view) < 0
    normals[flip] *= -1.0
    return replace(
        submap,
        normals=normals,
        variation=variation,
        normal_valid=valid,
    )


def _frmsd_select(distances, params):
    """FRMSD inlier selection: minimize rmsd(f) / f^lambda over the fraction grid."""
    n = len(distances)
    order = np.argsort(distances, kind="stable")
    d_sorted = distances[order]
    cum = np.cumsum(d_sorted**2)
    fractions = np.arange(params.min_inlier_fraction, 1.0 + 1e-9, params.frmsd_step)
    best = None
    for f in fractions:
        m = max(1, int(np.floor(f * n)))
        rmsd = np.sqrt(cum[m - 1] / m)
        score = rmsd / f**params.frmsd_lambda
        if best is None or score < best[0]:
            best = (score, f, m, rmsd)
    score, f, m, rmsd = best
    return order[:m], f, rmsd, score


def _icp_system(src_pts, tgt_pts, tgt_normals, use_plane, sigma):
    """Normal equations and objective of the mixed alignment cost."""
    w = 1.0 / sigma**2
    H = np.zeros((6, 6))
    b = np.zeros(6)
    obj = 0.0
    if np.any(use_plane):
        q = src_pts[use_plane]
        nrm = tgt_normals[use_plane]
        r = np.einsum("ni,ni->n", nrm, q - tgt_pts[use_plane])
        A = np.hstack([np.cross(q, nrm), nrm])
        H += w * A.T @ A
        b += w * A.T @ r
        obj += w * np.sum(r**2)
    if np.any(~use_plane):
        q = src_pts[~use_plane]
        r = q - tgt_pts[~use_plane]
        A = np.zeros((len(q), 3, 6))
        A[:, :, :3] = -lie.skew(q)
        A[:, :, 3:] = np.eye(3)
        H += w * np.einsum("nij,nik->jk", A, A)
        b += w * np.einsum("nij,ni->j", A, r)
        obj += w * np.sum(r**2)
    return H, b, 0.5 * obj


def _mixed_objective(src_pts, tgt_pts, tgt_normals, use_plane, sigma):
    w = 1.0 / sigma**2
    obj = 0.0
    if np.any(use_plane):
        r = np.einsum(
            "ni,ni->n", tgt_normals[use_plane], src_pts[use_plane] - tgt_pts[use_plane]
        )
        obj += w * np.sum(r**2)
    if np.any(~use_plane):
        obj += w * np.sum((src_pts[~use_plane] - tgt_pts[~use_plane]) ** 2)
    return 0.5 * obj


def icp_align(source: Submap, target: Submap, init=None, params: IcpParams | None = None):
    """Align the source submap onto the target with mixed-error ICP.

    Per iteration: single nearest-neighbor association, FRMSD inlier
    selection, error kind chosen by the target point's surface variation,
    then one safeguarded Gauss-Newton update of the pose.  Terminates when
    the pose differential drops below (rot_tol, trans_tol) or at the
    iteration cap.  Raises AlignmentFailureError when the robust alignment
    error grows for ``divergence_limit`` consecutive iterations or the
    inlier set collapses.
    """
    if params is None:
        params = IcpParams()
    if target.normals is None or target.variation is None:
        raise ValueError("target submap needs normals and surface variation")
    if len(source) < 6 or len(target) < 6:
        raise AlignmentFailureError("too few points to align")
    T = np.eye(4) if init is None else np.asarray(init, dtype=float).copy()
    tree = cKDTree(target.points)
    sigma = params.point_sigma
    report = IcpReport(0, False, 0.0, np.inf, np.inf, 0)
    prev_score = np.inf
    diverging = 0

    for it in range(params.max_iterations):
        src = source.points @ T[:3, :3].T + T[:3, 3]
        dist, nn = tree.query(src)
        inliers, frac, rmsd, score = _frmsd_select(dist, params)
        if len(inliers) < 6:
            raise AlignmentFailureError(
                f"inlier set collapsed to {len(inliers)} correspondences"
            )
        if score >= prev_score:
            diverging += 1
            if diverging >= params.divergence_limit:
                raise AlignmentFailureError(
                    f"alignment error increased {diverging} iterations in a row"
                )
        else:
            diverging = 0
        prev_score = score

        q = src[inliers]
        j = nn[inliers]
        tgt_pts = target.points[j]
        tgt_nrm = target.normals[j]
        use_plane = (target.variation[j] < params.variation_threshold) & (
            target.normal_valid[j] if target.normal_valid is not None else True
        )
        H, b, obj0 = _icp_system(q, tgt_pts, tgt_nrm, use_plane, sigma)
        delta = -np.linalg.lstsq(H, b, rcond=None)[0]
        # Safeguard: with correspondences fixed, the update must not
        # increase the mixed objective.
        for _ in range(12):
            q_new = q @ lie.so3_exp(delta[:3]).T + delta[3:]
            obj1 = _mixed_objective(q_new, tgt_pts, tgt_nrm, use_plane, sigma)
            if obj1 <= obj0 * (1.0 + 1e-12) + 1e-15:
                break
            delta = 0.5 * delta
        T = lie.se3_exp(delta) @ T
        report.iterations = it + 1
        report.inlier_fraction = float(frac)
        report.rmsd = float(rmsd)
        report.objective = float(obj1)
        report.num_correspondences = int(len(inliers))
        report.objective_trace.append(float(obj1))
        report.step_objectives.append((float(obj0), float(obj1)))
        if (
            np.linalg.norm(delta[:3]) < params.rot_tol
            and np.linalg.norm(delta[3:]) < params.trans_tol
        ):
            report.converged = True
            break
    return T, report


def preprocess_submap(submap: Submap, params: IcpParams, with_normals: bool):
    """Voxel-downsample a submap; optionally attach normals and variation."""
    pts = voxel_downsample(submap.points, params.voxel_cell)
    out = replace(submap, points=pts, normals=None, variation=None, normal_valid=None)
    if with_normals:
        out = estimate_normals_and_variation(out, k=params.normal_neighbors)
    return out


def make_loop_closure(
    trajectory: Trajectory,
    cloud: PointCloud,
    crossing: Crossing,
    params: IcpParams | None = None,
    delta_r_star=5.0,
    time_window=20.0,
    sigma_phi=np.deg2rad(0.2),
    sigma_rho=0.02,
    min_points=100,
):
    """Loop-closure measurement from one crossing: submaps, ICP, covariance.

    The target submap holds the first visit's points, the source the
    revisit's; ICP is initialized from the trajectory's relative pose and its
    result is the measured relative pose between the two anchor bodies.
    """
    if params is None:
        params = IcpParams()
    window = min(time_window, 0.45 * (crossing.t2 - crossing.t1))
    pose1 = trajectory.poses[crossing.idx1]
    pose2 = trajectory.poses[crossing.idx2]
    target = extract_submap(
        cloud, pose1, delta_r_star, crossing.idx1, crossing.t1, window, min_points
    )
    source = extract_submap(
        cloud, pose2, delta_r_star, crossing.idx2, crossing.t2, window, min_points
    )
    target = preprocess_submap(target, params, with_normals=True)
    source = preprocess_submap(source, params, with_normals=False)
    init = lie.se3_inv(pose1) @ pose2
    xi_meas, report = icp_align(source, target, init=init, params=params)
    cov = np.diag([sigma_phi**2] * 3 + [sigma_rho**2] * 3)
    return (
        LoopClosureMeasurement(crossing.idx1, crossing.idx2, xi_meas, cov),
        report,
    )


def crop_world(cloud: PointCloud, center_xy, radius, t_center=None, window=None):
    """World-frame crop by planar radius and, optionally, capture time."""
    center_xy = np.asarray(center_xy, dtype=float)
    mask = np.linalg.norm(cloud.points[:, :2] - center_xy, axis=1) <= radius
    if t_center is not None and window is not None:
        if cloud.times is None:
            raise ValueError("cloud has no per-point times for time gating")
        mask &= np.abs(cloud.times - t_center) <= window
    return PointCloud(
        cloud.points[mask],
        None if cloud.times is None else cloud.times[mask],
        cloud.frame,
    )
