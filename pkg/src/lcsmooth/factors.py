"""Error terms of the trajectory-smoothing objective and their Jacobians.

Each factor exposes an evaluate-and-linearize function returning a
:class:`Linearization`: the stacked error vector, Jacobian blocks keyed by
node index, and the factor's weight (information) matrix.  Pose errors are
left-invariant, so Jacobians are taken with respect to the perturbation
``T = T_bar @ exp(-delta_xi^)``, ``varpi = varpi_bar + delta_varpi``.

Pose/velocity factors (prior, constant-velocity process) carry 12-column
blocks per node; pose-only factors (loop closure, relative pose, observable
states) carry blocks acting on ``delta_xi`` alone, with the velocity block
implicitly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lie
from .wnoa import NavState, WnoaPsd, process_weight


@dataclass(frozen=True)
class PriorBelief:
    """Prior on the first navigation state: pose, velocity, 12x12 covariance."""

    pose: np.ndarray
    varpi: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=float))
        object.__setattr__(self, "varpi", np.asarray(self.varpi, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        if self.cov.shape != (12, 12):
            raise ValueError("prior covariance must be 12x12")
        require_spd(self.cov, "prior covariance")


@dataclass(frozen=True)
class LoopClosureMeasurement:
    """Relative pose between two trajectory nodes with 6x6 covariance."""

    idx_l1: int
    idx_l2: int
    xi_meas: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi_meas", np.asarray(self.xi_meas, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        if not self.idx_l1 < self.idx_l2:
            raise ValueError("loop closure requires idx_l1 < idx_l2")
        if self.cov.shape != (6, 6):
            raise ValueError("loop closure covariance must be 6x6")
        require_spd(self.cov, "loop closure covariance")


@dataclass
class Linearization:
    error: np.ndarray
    jacobians: dict[int, np.ndarray] = field(default_factory=dict)
    weight: np.ndarray | None = None


def require_spd(M, name):
    M = np.asarray(M, dtype=float)
    if not np.allclose(M, M.T, atol=1e-9):
        raise ValueError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None
    return M


def prior_error(state0: NavState, prior: PriorBelief) -> Linearization:
    """Prior factor on node 0; error [log(T0^-1 Y0)^v; varpi0 - psi0]."""
    e_xi = lie.se3_log(lie.se3_inv(state0.pose) @ prior.pose)
    e = np.concatenate([e_xi, state0.varpi - prior.varpi])
    F = np.zeros((12, 12))
    F[:6, :6] = lie.left_jacobian_inv(e_xi)
    F[6:, 6:] = np.eye(6)
    # Prior-noise Jacobian folded into the weight: R0 = M0 S0 M0^T.
    M = np.zeros((12, 12))
    M[:6, :6] = -lie.right_jacobian_inv(e_xi)
    M[6:, 6:] = -np.eye(6)
    weight = np.linalg.inv(M @ prior.cov @ M.T)
    return Linearization(error=e, jacobians={0: F}, weight=weight)


def wnoa_error(
    state_km1: NavState, state_k: NavState, dt: float, psd: WnoaPsd, k: int = 1
) -> Linearization:
    """Constant-velocity process factor between nodes k-1 and k."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    predicted = state_km1.pose @ lie.se3_exp(dt * state_km1.varpi)
    e_xi = lie.se3_log(lie.se3_inv(state_k.pose) @ predicted)
    e = np.concatenate([e_xi, state_k.varpi - state_km1.varpi])
    Jr_inv = lie.right_jacobian_inv(e_xi)
    F_km1 = np.zeros((12, 12))
    F_km1[:6, :6] = -Jr_inv @ lie.adjoint(lie.se3_exp(-dt * state_km1.varpi))
    F_km1[:6, 6:] = dt * Jr_inv @ lie.right_jacobian(dt * state_km1.varpi)
    F_km1[6:, 6:] = -np.eye(6)
    F_k = np.zeros((12, 12))
    F_k[:6, :6] = lie.left_jacobian_inv(e_xi)
    F_k[6:, 6:] = np.eye(6)
    weight = process_weight(state_km1.varpi, psd, dt)
    return Linearization(error=e, jacobians={k - 1: F_km1, k: F_k}, weight=weight)


def _relative_pose_linearization(pose_l1, pose_l2, xi_meas):
    e = lie.se3_log(lie.se3_inv(pose_l2) @ pose_l1 @ xi_meas)
    Jr_inv = lie.right_jacobian_inv(e)
    H_l1 = -Jr_inv @ lie.adjoint(lie.se3_inv(xi_meas))
    H_l2 = lie.left_jacobian_inv(e)
    M = -Jr_inv
    return e, H_l1, H_l2, M


def loop_closure_error(
    state_l1: NavState, state_l2: NavState, meas: LoopClosureMeasurement
) -> Linearization:
    """Loop-closure factor; error log(T_l2^-1 T_l1 Xi)^v, 6x6 pose blocks."""
    e, H_l1, H_l2, M = _relative_pose_linearization(
        state_l1.pose, state_l2.pose, meas.xi_meas
    )
    weight = np.linalg.inv(M @ meas.cov @ M.T)
    return Linearization(
        error=e, jacobians={meas.idx_l1: H_l1, meas.idx_l2: H_l2}, weight=weight
    )


def relative_pose_error(
    state_km1: NavState, state_k: NavState, xi_rel, cov, k: int = 1
) -> Linearization:
    """Relative-pose factor between consecutive nodes.

    Same functional form as the loop-closure factor; xi_rel is captured once
    from the initializing trajectory and cov is a direct hyperparameter, so
    no noise-Jacobian fold is applied to the weight.
    """
    e, H_km1, H_k, _ = _relative_pose_linearization(
        state_km1.pose, state_k.pose, np.asarray(xi_rel, dtype=float)
    )
    weight = np.linalg.inv(require_spd(cov, "relative pose covariance"))
    return Linearization(error=e, jacobians={k - 1: H_km1, k: H_k}, weight=weight)


# Rows of the observable-state selector: roll and pitch of the attitude
# error, and the third (down) component of the world-frame position error.
_D = np.zeros((3, 6))
_D[0, 0] = 1.0
_D[1, 1] = 1.0
_D[2, 5] = 1.0


def observable_error(state_k: NavState, prior_pose_k, cov, k: int) -> Linearization:
    """Roll/pitch/depth factor tying node k to the black-box prior pose.

    The error is D E_k log(T_k^-1 Tcheck_k)^v with E_k mapping the body-frame
    translation error into the world frame; the depth row reduces exactly to
    the world-frame down-component of the position difference.  The Jacobian
    uses that reduction, which makes it exact at the linearization point
    (the e_rho -> 0 approximation would leave an O(|e|) residual in the depth
    row's rotation columns).
    """
    prior_pose_k = np.asarray(prior_pose_k, dtype=float)
    e_xi = lie.se3_log(lie.se3_inv(state_k.pose) @ prior_pose_k)
    C = state_k.pose[:3, :3]
    E = np.zeros((6, 6))
    E[:3, :3] = np.eye(3)
    E[3:, 3:] = C @ lie.so3_left_jacobian(e_xi[:3])
    e = _D @ E @ e_xi
    H = np.zeros((3, 6))
    H[:2, :3] = lie.so3_left_jacobian_inv(e_xi[:3])[:2, :]
    H[2, 3:] = C[2, :]
    weight = np.linalg.inv(require_spd(cov, "observable covariance"))
    return Linearization(error=e, jacobians={k: H}, weight=weight)
