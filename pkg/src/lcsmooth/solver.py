"""Sparse batch Gauss-Newton smoother over the trajectory factor graph.

The graph couples every consecutive node pair with a constant-velocity
process factor, a relative-pose factor captured from the initializing
trajectory, and a roll/pitch/depth factor, plus one prior factor on node 0
and one factor per loop-closure measurement.  Linearization is vectorized
across the chain.  The normal equations exploit the structure in node
order: the chain part is block-tridiagonal and factorizes with a banded
Cholesky, and each loop closure contributes a PSD rank-6 term applied
through a Woodbury update.  Levenberg-Marquardt damping wraps the
Gauss-Newton step so the objective is non-increasing across accepted
iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import lie
from .factors import LoopClosureMeasurement, PriorBelief, require_spd
from .wnoa import NavState, WnoaPsd, process_weight


class SolverFailureError(RuntimeError):
    """Normal equations remained indefinite/singular after damping escalation."""


@dataclass
class SolverConfig:
    max_iterations: int = 100
    step_tolerance: float = 1e-8
    robust_cost: bool = True
    sigma_phi_out: float = np.deg2rad(1.0)
    sigma_rho_out: float = 1.0
    damping: float = 0.0  # initial LM lambda; 0 = pure Gauss-Newton
    max_damping: float = 1e8
    fix_first_node: bool = False

    def __post_init__(self):
        if self.step_tolerance <= 0 or self.max_iterations < 1:
            raise ValueError("solver tolerances must be positive")
        if self.sigma_phi_out <= 0 or self.sigma_rho_out <= 0:
            raise ValueError("robust-cost sigmas must be positive")


@dataclass
class SolveReport:
    """Solve outcome.

    ``objective_trace`` holds the objective at each iterate with that
    iterate's refreshed weights; ``step_objectives`` holds, per accepted
    step, the (before, after) values under the weights the step was
    computed with, which the solver guarantees to be non-increasing.
    """

    iterations: int
    converged: bool
    objective: float
    objective_trace: list[float]
    loop_weights: np.ndarray
    damping_final: float
    message: str
    step_objectives: list[tuple[float, float]]


@dataclass
class FactorGraph:
    """Node states plus everything needed to evaluate the five factor types.

    ``rel_xi`` holds the relative-pose measurements captured once from the
    initializing trajectory; ``prior_poses`` is that trajectory itself, used
    by the observable-state factors (which skip node 0, anchored by the
    prior factor).
    """

    times: np.ndarray
    poses: np.ndarray
    varpis: np.ndarray
    prior: PriorBelief | None
    loop_closures: list[LoopClosureMeasurement]
    rel_xi: np.ndarray
    prior_poses: np.ndarray
    psd: WnoaPsd
    r_rel: np.ndarray
    r_obs: np.ndarray

    @property
    def num_nodes(self):
        return len(self.times)

    @property
    def nodes(self):
        return [NavState(self.poses[i], self.varpis[i]) for i in range(self.num_nodes)]

    def copy(self):
        return replace(self, poses=self.poses.copy(), varpis=self.varpis.copy())

    def validate(self):
        if self.num_nodes < 1:
            raise ValueError("graph needs at least one node")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.poses.shape != (self.num_nodes, 4, 4):
            raise ValueError("poses shape mismatch")
        if self.varpis.shape != (self.num_nodes, 6):
            raise ValueError("varpis shape mismatch")
        require_spd(self.r_rel, "relative-pose covariance")
        require_spd(self.r_obs, "observable covariance")
        for i, m in enumerate(self.loop_closures):
            if not (0 <= m.idx_l1 < m.idx_l2 < self.num_nodes):
                raise ValueError(f"loop closure {i} references invalid nodes")
            require_spd(m.cov, f"loop closure {i} covariance")
        return self


def initial_velocities(times, poses):
    """Forward-difference body velocities consistent with the pose sequence."""
    times = np.asarray(times, dtype=float)
    poses = np.asarray(poses, dtype=float)
    if len(times) == 1:
        return np.zeros((1, 6))
    dts = np.diff(times)
    v = lie.se3_log(lie.se3_inv(poses[:-1]) @ poses[1:]) / dts[:, None]
    return np.vstack([v, v[-1:]])


def build_graph(
    times,
    prior_poses,
    loop_closures,
    psd: WnoaPsd,
    r_rel,
    r_obs,
    prior_cov=None,
    varpis=None,
) -> FactorGraph:
    """Assemble the smoothing graph, initialized at the prior trajectory."""
    times = np.asarray(times, dtype=float)
    prior_poses = np.asarray(prior_poses, dtype=float)
    if varpis is None:
        varpis = initial_velocities(times, prior_poses)
    varpis = np.asarray(varpis, dtype=float)
    if prior_cov is None:
        prior_cov = np.diag([1e-6] * 3 + [1e-4] * 3 + [1e-4] * 3 + [1e-2] * 3)
    prior = PriorBelief(prior_poses[0], varpis[0], prior_cov)
    rel_xi = (
        lie.se3_inv(prior_poses[:-1]) @ prior_poses[1:]
        if len(times) > 1
        else np.zeros((0, 4, 4))
    )
    graph = FactorGraph(
        times=times,
        poses=prior_poses.copy(),
        varpis=varpis.copy(),
        prior=prior,
        loop_closures=list(loop_closures),
        rel_xi=rel_xi,
        prior_poses=prior_poses.copy(),
        psd=psd,
        r_rel=np.asarray(r_rel, dtype=float),
        r_obs=np.asarray(r_obs, dtype=float),
    )
    return graph.validate()


def robust_weight(error, sigma_phi_out, sigma_rho_out):
    """Redescending weight in (0, 1] from the fixed-covariance Mahalanobis distance.

    Welsch-style form w = 2^(-eps^2), scaled so a unit Mahalanobis distance
    halves the weight.  A quadratic-tail weight (Cauchy 1/(1+eps^2)) leaves a
    constant residual influence per outlier (w * eps^2 saturates), which
    measurably drags the posterior at moderate outlier offsets; the
    exponential tail drives the influence to zero instead.
    """
    error = np.asarray(error, dtype=float)
    eps_sq = (
        np.sum(error[..., :3] ** 2, axis=-1) / sigma_phi_out**2
        + np.sum(error[..., 3:] ** 2, axis=-1) / sigma_rho_out**2
    )
    # floored so the scaled weight matrix stays positive definite
    return np.maximum(np.exp2(-eps_sq), 1e-12)


# ---------------------------------------------------------------------------
# Batched linearization


@dataclass
class _Blocks:
    """Per-factor errors, Jacobian blocks, and weights, stacked by type."""

    e_prior: np.ndarray | None
    F_prior: np.ndarray | None
    W_prior: np.ndarray | None
    e_wnoa: np.ndarray
    F_km1: np.ndarray
    F_k: np.ndarray
    W_wnoa: np.ndarray
    e_loop: np.ndarray
    H_l1: np.ndarray
    H_l2: np.ndarray
    W_loop: np.ndarray
    loop_idx: np.ndarray
    e_rel: np.ndarray
    Hr_km1: np.ndarray
    Hr_k: np.ndarray
    W_rel: np.ndarray
    e_obs: np.ndarray
    H_obs: np.ndarray
    W_obs: np.ndarray


def _loop_errors(graph):
    if not graph.loop_closures:
        return (
            np.zeros((0, 6)),
            np.zeros((0, 4, 4)),
            np.zeros(0, dtype=int),
            np.zeros(0, dtype=int),
            np.zeros((0, 6, 6)),
        )
    i1 = np.array([m.idx_l1 for m in graph.loop_closures])
    i2 = np.array([m.idx_l2 for m in graph.loop_closures])
    xi = np.stack([m.xi_meas for m in graph.loop_closures])
    cov = np.stack([m.cov for m in graph.loop_closures])
    e = lie.se3_log(lie.se3_inv(graph.poses[i2]) @ graph.poses[i1] @ xi)
    return e, xi, i1, i2, cov


def _observable_errors(graph, inv_next):
    # D E log(T^-1 Tcheck)^v: roll/pitch of the attitude error plus the
    # world-frame down-component of the position difference.
    e_xi = lie.se3_log(inv_next @ graph.prior_poses[1:])
    C = graph.poses[1:, :3, :3]
    Jphi = lie.so3_left_jacobian(e_xi[:, :3])
    world_rho = (C @ Jphi @ e_xi[:, 3:, None])[..., 0]
    return e_xi, np.stack([e_xi[:, 0], e_xi[:, 1], world_rho[:, 2]], axis=-1)


def _linearize(graph) -> _Blocks:
    n = graph.num_nodes
    k = n - 1

    if graph.prior is not None:
        e0_xi = lie.se3_log(lie.se3_inv(graph.poses[0]) @ graph.prior.pose)
        e_prior = np.concatenate([e0_xi, graph.varpis[0] - graph.prior.varpi])
        F_prior = np.zeros((12, 12))
        F_prior[:6, :6] = lie.left_jacobian_inv(e0_xi)
        F_prior[6:, 6:] = np.eye(6)
        M0 = np.zeros((12, 12))
        M0[:6, :6] = -lie.right_jacobian_inv(e0_xi)
        M0[6:, 6:] = -np.eye(6)
        W_prior = np.linalg.inv(M0 @ graph.prior.cov @ M0.T)
    else:
        e_prior = F_prior = W_prior = None

    if k > 0:
        dts = np.diff(graph.times)
        inv_next = lie.se3_inv(graph.poses[1:])
        tv = dts[:, None] * graph.varpis[:-1]
        predicted = graph.poses[:-1] @ lie.se3_exp(tv)
        e_xi = lie.se3_log(inv_next @ predicted)
        e_wnoa = np.concatenate([e_xi, graph.varpis[1:] - graph.varpis[:-1]], axis=-1)
        Jr_inv = lie.right_jacobian_inv(e_xi)
        F_km1 = np.zeros((k, 12, 12))
        F_km1[:, :6, :6] = -Jr_inv @ lie.adjoint(lie.se3_exp(-tv))
        F_km1[:, :6, 6:] = dts[:, None, None] * (Jr_inv @ lie.right_jacobian(tv))
        F_km1[:, 6:, 6:] = -np.eye(6)
        F_k = np.zeros((k, 12, 12))
        F_k[:, :6, :6] = lie.left_jacobian_inv(e_xi)
        F_k[:, 6:, 6:] = np.eye(6)
        W_wnoa = process_weight(graph.varpis[:-1], graph.psd, dts)

        e_rel = lie.se3_log(inv_next @ graph.poses[:-1] @ graph.rel_xi)
        Jr_inv_r = lie.right_jacobian_inv(e_rel)
        Hr_km1 = -Jr_inv_r @ lie.adjoint(lie.se3_inv(graph.rel_xi))
        Hr_k = lie.left_jacobian_inv(e_rel)
        W_rel = np.broadcast_to(np.linalg.inv(graph.r_rel), (k, 6, 6))

        e_obs_xi, e_obs = _observable_errors(graph, inv_next)
        H_obs = np.zeros((k, 3, 6))
        H_obs[:, :2, :3] = lie.so3_left_jacobian_inv(e_obs_xi[:, :3])[:, :2, :]
        H_obs[:, 2, 3:] = graph.poses[1:, 2, :3]
        W_obs = np.broadcast_to(np.linalg.inv(graph.r_obs), (k, 3, 3))
    else:
        e_wnoa = np.zeros((0, 12))
        F_km1 = F_k = W_wnoa = np.zeros((0, 12, 12))
        e_rel = np.zeros((0, 6))
        Hr_km1 = Hr_k = W_rel = np.zeros((0, 6, 6))
        e_obs = np.zeros((0, 3))
        H_obs = np.zeros((0, 3, 6))
        W_obs = np.zeros((0, 3, 3))

    e_loop, xi_loop, i1, i2, cov_loop = _loop_errors(graph)
    Jr_inv_l = lie.right_jacobian_inv(e_loop)
    H_l1 = -Jr_inv_l @ lie.adjoint(lie.se3_inv(xi_loop))
    H_l2 = lie.left_jacobian_inv(e_loop)
    # Measurement-noise Jacobian folded into the weight: R_l = M R_Xi M^T
    # with M = -Jr_inv, so the sign drops out of the product.
    W_loop = np.linalg.inv(Jr_inv_l @ cov_loop @ np.swapaxes(Jr_inv_l, -1, -2))

    return _Blocks(
        e_prior=e_prior,
        F_prior=F_prior,
        W_prior=W_prior,
        e_wnoa=e_wnoa,
        F_km1=F_km1,
        F_k=F_k,
        W_wnoa=W_wnoa,
        e_loop=e_loop,
        H_l1=H_l1,
        H_l2=H_l2,
        W_loop=W_loop,
        loop_idx=np.stack([i1, i2], axis=-1) if len(i1) else np.zeros((0, 2), int),
        e_rel=e_rel,
        Hr_km1=Hr_km1,
        Hr_k=Hr_k,
        W_rel=W_rel,
        e_obs=e_obs,
        H_obs=H_obs,
        W_obs=W_obs,
    )


# ---------------------------------------------------------------------------
# Sparse assembly


def _block_coo(data_blocks, row0, col0):
    """COO triplets for stacked (M, a, b) blocks at given row/col offsets."""
    m, a, b = data_blocks.shape
    rows = np.broadcast_to(
        (row0[:, None, None] + np.arange(a)[None, :, None]), (m, a, b)
    )
    cols = np.broadcast_to(
        (col0[:, None, None] + np.arange(b)[None, None, :]), (m, a, b)
    )
    return np.ascontiguousarray(data_blocks).ravel(), rows.ravel(), cols.ravel()


def assemble(graph: FactorGraph, robust_weights=None):
    """Stacked error vector, block-sparse Jacobian, and block-diagonal weight.

    Block-row ordering: prior, WNOA (k = 1..K), loop closures, relative pose,
    observable states.  Pose-only factor blocks occupy the first six columns
    of their node's 12-wide block.  ``robust_weights`` scales the
    loop-closure weight blocks when given.
    """
    graph.validate()
    blocks = _linearize(graph)
    n = graph.num_nodes
    k = n - 1
    nl = len(blocks.e_loop)

    err_parts = []
    gamma_parts = []
    w_parts = []
    row = 0

    if blocks.e_prior is not None:
        err_parts.append(blocks.e_prior)
        gamma_parts.append(
            _block_coo(blocks.F_prior[None], np.array([row]), np.array([0]))
        )
        w_parts.append(
            _block_coo(blocks.W_prior[None], np.array([row]), np.array([row]))
        )
        row += 12

    if k > 0:
        r0 = row + 12 * np.arange(k)
        c_km1 = 12 * np.arange(k)
        err_parts.append(blocks.e_wnoa.ravel())
        gamma_parts.append(_block_coo(blocks.F_km1, r0, c_km1))
        gamma_parts.append(_block_coo(blocks.F_k, r0, c_km1 + 12))
        w_parts.append(_block_coo(blocks.W_wnoa, r0, r0))
        row += 12 * k

    if nl > 0:
        r0 = row + 6 * np.arange(nl)
        err_parts.append(blocks.e_loop.ravel())
        gamma_parts.append(_block_coo(blocks.H_l1, r0, 12 * blocks.loop_idx[:, 0]))
        gamma_parts.append(_block_coo(blocks.H_l2, r0, 12 * blocks.loop_idx[:, 1]))
        w_loop = blocks.W_loop
        if robust_weights is not None:
            w_loop = w_loop * np.asarray(robust_weights)[:, None, None]
        w_parts.append(_block_coo(w_loop, r0, r0))
        row += 6 * nl

    if k > 0:
        c_km1 = 12 * np.arange(k)
        r0 = row + 6 * np.arange(k)
        err_parts.append(blocks.e_rel.ravel())
        gamma_parts.append(_block_coo(blocks.Hr_km1, r0, c_km1))
        gamma_parts.append(_block_coo(blocks.Hr_k, r0, c_km1 + 12))
        w_parts.append(_block_coo(np.ascontiguousarray(blocks.W_rel), r0, r0))
        row += 6 * k

        r0 = row + 3 * np.arange(k)
        err_parts.append(blocks.e_obs.ravel())
        gamma_parts.append(_block_coo(blocks.H_obs, r0, c_km1 + 12))
        w_parts.append(_block_coo(np.ascontiguousarray(blocks.W_obs), r0, r0))
        row += 3 * k

    e = np.concatenate(err_parts) if err_parts else np.zeros(0)
    gamma = sp.coo_matrix(
        (
            np.concatenate([p[0] for p in gamma_parts]),
            (
                np.concatenate([p[1] for p in gamma_parts]),
                np.concatenate([p[2] for p in gamma_parts]),
            ),
        ),
        shape=(row, 12 * n),
    ).tocsr()
    weight = sp.coo_matrix(
        (
            np.concatenate([p[0] for p in w_parts]),
            (
                np.concatenate([p[1] for p in w_parts]),
                np.concatenate([p[2] for p in w_parts]),
            ),
        ),
        shape=(row, row),
    ).tocsr()
    return e, gamma, weight


@dataclass
class _Errors:
    e_prior: np.ndarray | None
    e_wnoa: np.ndarray
    e_loop: np.ndarray
    e_rel: np.ndarray
    e_obs: np.ndarray


def _errors(graph) -> _Errors:
    """Factor errors at the current states, without Jacobians or weights."""
    if graph.prior is not None:
        e0_xi = lie.se3_log(lie.se3_inv(graph.poses[0]) @ graph.prior.pose)
        e_prior = np.concatenate([e0_xi, graph.varpis[0] - graph.prior.varpi])
    else:
        e_prior = None
    k = graph.num_nodes - 1
    if k > 0:
        dts = np.diff(graph.times)
        inv_next = lie.se3_inv(graph.poses[1:])
        predicted = graph.poses[:-1] @ lie.se3_exp(dts[:, None] * graph.varpis[:-1])
        e_xi = lie.se3_log(inv_next @ predicted)
        e_wnoa = np.concatenate([e_xi, graph.varpis[1:] - graph.varpis[:-1]], axis=-1)
        e_rel = lie.se3_log(inv_next @ graph.poses[:-1] @ graph.rel_xi)
        e_obs = _observable_errors(graph, inv_next)[1]
    else:
        e_wnoa = np.zeros((0, 12))
        e_rel = np.zeros((0, 6))
        e_obs = np.zeros((0, 3))
    return _Errors(e_prior, e_wnoa, _loop_errors(graph)[0], e_rel, e_obs)


def _quadratic(errs: _Errors, blocks: _Blocks, w_loop):
    """0.5 * e^T W e with the weight blocks held fixed."""
    total = 0.0
    if errs.e_prior is not None:
        total += errs.e_prior @ blocks.W_prior @ errs.e_prior
    total += np.einsum("ki,kij,kj->", errs.e_wnoa, blocks.W_wnoa, errs.e_wnoa)
    total += np.einsum("ki,kij,kj->", errs.e_rel, blocks.W_rel, errs.e_rel)
    total += np.einsum("ki,kij,kj->", errs.e_obs, blocks.W_obs, errs.e_obs)
    if len(errs.e_loop):
        q = np.einsum("ki,kij,kj->k", errs.e_loop, blocks.W_loop, errs.e_loop)
        total += np.sum(w_loop * q)
    return 0.5 * total


def _robust_weights_for(blocks, config):
    if config.robust_cost and len(blocks.e_loop):
        return robust_weight(blocks.e_loop, config.sigma_phi_out, config.sigma_rho_out)
    return np.ones(len(blocks.e_loop))


def objective(graph: FactorGraph, config: SolverConfig):
    """Objective with weights evaluated at the graph's current states.

    Process-noise and measurement-fold weights are those of the current
    linearization point, and loop-closure factors carry their robust weight
    when enabled.  Returns the objective value and the loop weights.
    """
    blocks = _linearize(graph)
    w_loop = _robust_weights_for(blocks, config)
    errs = _Errors(
        blocks.e_prior, blocks.e_wnoa, blocks.e_loop, blocks.e_rel, blocks.e_obs
    )
    return _quadratic(errs, blocks, w_loop), w_loop


def _normal_equations(blocks, n, robust_weights):
    """Normal equations of the damped Gauss-Newton step, in structured form.

    The chain factors (prior, WNOA, relative pose, observable) produce a
    block-tridiagonal matrix, returned as stacked diagonal blocks ``Hdiag``
    (n, 12, 12) and upper off-diagonal blocks ``Hoff`` (n-1, 12, 12).  Each
    loop closure contributes a PSD rank-6 term U_l U_l^T; the stacked square
    roots are returned as the dense skinny matrix ``U`` (12n, 6L).  The
    right-hand side ``g = Gamma^T W e`` covers all factors.
    """
    k = n - 1
    Hdiag = np.zeros((n, 12, 12))
    Hoff = np.zeros((max(k, 0), 12, 12))
    g = np.zeros((n, 12))

    if blocks.e_prior is not None:
        FtW = blocks.F_prior.T @ blocks.W_prior
        Hdiag[0] += FtW @ blocks.F_prior
        g[0] += FtW @ blocks.e_prior

    if k > 0:
        chain = (
            (blocks.e_wnoa, blocks.F_km1, blocks.F_k, blocks.W_wnoa),
            (blocks.e_rel, blocks.Hr_km1, blocks.Hr_k, blocks.W_rel),
            (blocks.e_obs, None, blocks.H_obs, blocks.W_obs),
        )
        for err, J1, J2, W in chain:
            c = J2.shape[-1]
            J2tW = np.swapaxes(J2, -1, -2) @ W
            Hdiag[1:, :c, :c] += J2tW @ J2
            g[1:, :c] += (J2tW @ err[..., None])[..., 0]
            if J1 is not None:
                J1tW = np.swapaxes(J1, -1, -2) @ W
                Hdiag[:-1, :c, :c] += J1tW @ J1
                Hoff[:, :c, :c] += J1tW @ J2
                g[:-1, :c] += (J1tW @ err[..., None])[..., 0]

    nl = len(blocks.e_loop)
    if nl:
        Wl = blocks.W_loop * np.asarray(robust_weights)[:, None, None]
        Lw = np.linalg.cholesky(Wl)
        U = np.zeros((12 * n, 6 * nl))
        for li in range(nl):
            i1, i2 = blocks.loop_idx[li]
            U[12 * i1 : 12 * i1 + 6, 6 * li : 6 * li + 6] = blocks.H_l1[li].T @ Lw[li]
            U[12 * i2 : 12 * i2 + 6, 6 * li : 6 * li + 6] = blocks.H_l2[li].T @ Lw[li]
        H1tW = np.swapaxes(blocks.H_l1, -1, -2) @ Wl
        H2tW = np.swapaxes(blocks.H_l2, -1, -2) @ Wl
        np.add.at(
            g[:, :6], blocks.loop_idx[:, 0], (H1tW @ blocks.e_loop[..., None])[..., 0]
        )
        np.add.at(
            g[:, :6], blocks.loop_idx[:, 1], (H2tW @ blocks.e_loop[..., None])[..., 0]
        )
    else:
        U = None

    return Hdiag, Hoff, U, g.ravel()


def _to_lower_band(Hdiag, Hoff, lam):
    """Lower-banded storage of the block-tridiagonal part plus lam on the diagonal."""
    n = Hdiag.shape[0]
    band = np.zeros((24, 12 * n))
    for c in range(12):
        band[: 12 - c, c::12] = Hdiag[:, c:, c].T
        if n > 1:
            band[12 - c : 24 - c, c : 12 * (n - 1) : 12] = Hoff[:, c, :].T
    band[0] += lam
    return band


def update_states(graph: FactorGraph, delta_x) -> FactorGraph:
    """Apply the stacked correction: T <- T exp(-dxi^), varpi <- varpi + dvarpi."""
    delta_x = np.asarray(delta_x, dtype=float)
    n = graph.num_nodes
    if delta_x.shape != (12 * n,):
        raise ValueError("delta_x dimension mismatch")
    d = delta_x.reshape(n, 12)
    out = graph.copy()
    out.poses = graph.poses @ lie.se3_exp(-d[:, :6])
    out.varpis = graph.varpis + d[:, 6:]
    return out


def _solve_normal(Hdiag, Hoff, U, g, lam, fix_first_node):
    """Solve (H + lam I) delta = -g via banded Cholesky plus a Woodbury update.

    The chain part factorizes in place with a banded Cholesky; the
    loop-closure term U U^T enters through the Woodbury identity with a small
    (6L x 6L) capacitance system.  Raises RuntimeError when the damped chain
    matrix is not positive definite.
    """
    band = _to_lower_band(Hdiag, Hoff, lam)
    if fix_first_node:
        band = band[:, 12:]
        g = g[12:]
        U = U[12:] if U is not None else None
    try:
        cb = scipy.linalg.cholesky_banded(band, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"chain matrix not positive definite: {exc}") from exc
    except ValueError as exc:
        raise RuntimeError(f"banded factorization failed: {exc}") from exc
    y = scipy.linalg.cho_solve_banded((cb, True), g, check_finite=False)
    if U is not None and U.shape[1] > 0:
        Z = scipy.linalg.cho_solve_banded((cb, True), U, check_finite=False)
        S = np.eye(U.shape[1]) + U.T @ Z
        delta = -(y - Z @ np.linalg.solve(S, U.T @ y))
    else:
        delta = -y
    if not np.all(np.isfinite(delta)):
        raise RuntimeError("non-finite normal-equation solution")
    if fix_first_node:
        delta = np.concatenate([np.zeros(12), delta])
    return delta


def gauss_newton_step(graph: FactorGraph, config: SolverConfig):
    """One Gauss-Newton step at the given damping; (delta_x, predicted objective)."""
    blocks = _linearize(graph)
    w = _robust_weights_for(blocks, config)
    Hdiag, Hoff, U, g = _normal_equations(blocks, graph.num_nodes, w)
    try:
        delta = _solve_normal(Hdiag, Hoff, U, g, config.damping, config.fix_first_node)
    except RuntimeError as exc:
        raise SolverFailureError(f"normal equations not solvable: {exc}") from exc
    e, gamma, weight = assemble(graph, robust_weights=w)
    r = e + gamma @ delta
    return delta, 0.5 * r @ (weight @ r)


def solve(graph: FactorGraph, config: SolverConfig | None = None):
    """Iterate linearize/step/update until the step norm falls below tolerance.

    Weights (process-noise discretization, measurement folds, robust
    loop-closure weights) are refreshed at each iteration's linearization
    point and held fixed while the step is evaluated.  A trial step is
    accepted only if the fixed-weight objective does not increase; otherwise
    the damping factor escalates by 10x up to the cap, after which the best
    iterate so far is returned with ``converged=False``.
    """
    if config is None:
        config = SolverConfig()
    graph.validate()
    cur = graph.copy()
    lam = config.damping
    iterations = 0
    converged = False
    message = "max iterations reached"
    trace = []
    step_objectives = []
    blocks = _linearize(cur)
    w_cur = _robust_weights_for(blocks, config)

    for _ in range(config.max_iterations):
        errs = _Errors(
            blocks.e_prior, blocks.e_wnoa, blocks.e_loop, blocks.e_rel, blocks.e_obs
        )
        j_base = _quadratic(errs, blocks, w_cur)
        trace.append(float(j_base))
        Hdiag, Hoff, U, g = _normal_equations(blocks, cur.num_nodes, w_cur)
        accepted = False
        while True:
            try:
                delta = _solve_normal(Hdiag, Hoff, U, g, lam, config.fix_first_node)
            except RuntimeError:
                lam = lam * 10.0 if lam > 0 else 1e-6
                if lam > config.max_damping:
                    raise SolverFailureError(
                        "normal equations singular at maximum damping "
                        f"({cur.num_nodes} nodes, "
                        f"{len(cur.loop_closures)} loop closures)"
                    ) from None
                continue
            trial = update_states(cur, delta)
            j_trial = _quadratic(_errors(trial), blocks, w_cur)
            if j_trial <= j_base * (1.0 + 1e-12) + 1e-15:
                accepted = True
                break
            lam = lam * 10.0 if lam > 0 else 1e-6
            if lam > config.max_damping:
                break
        if not accepted:
            message = "damping limit reached without objective decrease"
            break
        step_objectives.append((float(j_base), float(j_trial)))
        cur = trial
        iterations += 1
        lam = lam / 10.0
        if lam < 1e-12:
            lam = 0.0
        blocks = _linearize(cur)
        w_cur = _robust_weights_for(blocks, config)
        if np.max(np.abs(delta)) < config.step_tolerance:
            converged = True
            message = "converged"
            break

    errs = _Errors(
        blocks.e_prior, blocks.e_wnoa, blocks.e_loop, blocks.e_rel, blocks.e_obs
    )
    j_final = _quadratic(errs, blocks, w_cur)
    trace.append(float(j_final))
    report = SolveReport(
        iterations=iterations,
        converged=converged,
        objective=float(j_final),
        objective_trace=trace,
        loop_weights=w_cur,
        damping_final=lam,
        message=message,
        step_objectives=step_objectives,
    )
    return cur, report
