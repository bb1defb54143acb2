"""SO(3)/SE(3) group and algebra operations.

Conventions used throughout the package:

- Twists are ordered rotation-first, ``xi = (phi, rho)``, with ``phi`` in
  radians and ``rho`` in meters.  Every 6x6 block matrix in the package
  follows this ordering.
- Poses are 4x4 homogeneous matrices ``[[C, r], [0, 1]]`` with ``C`` a
  3x3 direction-cosine matrix.
- All functions broadcast over leading batch dimensions, e.g. ``se3_exp``
  accepts ``(..., 6)`` and returns ``(..., 4, 4)``.

Rotations are represented as matrices internally; quaternions appear only
at the file-format boundary (see ``dataio``).
"""

from __future__ import annotations

import numpy as np

# Below this rotation angle the trigonometric coefficient functions switch
# to truncated even-power series.  The closed forms suffer catastrophic
# cancellation well before the angle becomes "small" (the worst, the fifth
# order coefficient of the Jacobian coupling block, is unusable below about
# 0.3 rad), so each coefficient switches at its own threshold chosen to keep
# the relative error near 1e-12 on both sides.
SMALL_ANGLE = 1e-6

_NEAR_PI_ERROR = 1e-9
_NEAR_PI_STABLE = 1e-6


class BranchAmbiguityError(ValueError):
    """Rotation angle at (or numerically indistinguishable from) pi."""


class JacobianSingularityError(ValueError):
    """Jacobian inverse requested at a singular rotation angle."""


def _eye(n, shape):
    out = np.zeros(shape + (n, n))
    out[...] = np.eye(n)
    return out


def skew(v):
    """Map (...,3) vectors to (...,3,3) skew-symmetric matrices."""
    v = np.asarray(v, dtype=float)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def unskew(S):
    """Inverse of :func:`skew`; uses the antisymmetric part of the input."""
    S = np.asarray(S, dtype=float)
    return 0.5 * np.stack(
        [
            S[..., 2, 1] - S[..., 1, 2],
            S[..., 0, 2] - S[..., 2, 0],
            S[..., 1, 0] - S[..., 0, 1],
        ],
        axis=-1,
    )


def se3_wedge(xi):
    """Map (...,6) twists (phi, rho) to (...,4,4) Lie algebra matrices."""
    xi = np.asarray(xi, dtype=float)
    X = np.zeros(xi.shape[:-1] + (4, 4))
    X[..., :3, :3] = skew(xi[..., :3])
    X[..., :3, 3] = xi[..., 3:]
    return X


def se3_vee(X):
    X = np.asarray(X, dtype=float)
    return np.concatenate([unskew(X[..., :3, :3]), X[..., :3, 3]], axis=-1)


def _angle(phi):
    return np.linalg.norm(phi, axis=-1)


def _series_or(t, threshold, coeffs, exact_fn):
    """Even-power series below the threshold, closed form above."""
    small = t < threshold
    ts = np.where(small, 1.0, t)
    t2 = t * t
    series = np.zeros_like(t)
    for c in reversed(coeffs):
        series = series * t2 + c
    return np.where(small, series, exact_fn(ts))


def _coef_sinc(t):
    # sin(t)/t
    return _series_or(
        t, 0.05, (1.0, -1.0 / 6.0, 1.0 / 120.0, -1.0 / 5040.0),
        lambda x: np.sin(x) / x,
    )


def _coef_one_minus_cos(t):
    # (1 - cos t)/t^2
    return _series_or(
        t, 0.05, (0.5, -1.0 / 24.0, 1.0 / 720.0, -1.0 / 40320.0),
        lambda x: (1.0 - np.cos(x)) / (x * x),
    )


def _coef_t_minus_sin(t):
    # (t - sin t)/t^3
    return _series_or(
        t, 0.05, (1.0 / 6.0, -1.0 / 120.0, 1.0 / 5040.0, -1.0 / 362880.0),
        lambda x: (x - np.sin(x)) / x**3,
    )


def _coef_jinv(t):
    # 1/t^2 - (1 + cos t)/(2 t sin t), singular at 2*pi
    return _series_or(
        t, 0.1, (1.0 / 12.0, 1.0 / 720.0, 1.0 / 30240.0, 1.0 / 1209600.0),
        lambda x: (1.0 - (x * (1.0 + np.cos(x))) / (2.0 * np.sin(x))) / (x * x),
    )


def _coef_q2(t):
    # (t^2/2 + cos t - 1)/t^4
    return _series_or(
        t, 0.25, (1.0 / 24.0, -1.0 / 720.0, 1.0 / 40320.0, -1.0 / 3628800.0),
        lambda x: (x * x / 2.0 + np.cos(x) - 1.0) / x**4,
    )


def _coef_q3(t):
    # (t - sin t - t^3/6)/t^5
    return _series_or(
        t,
        0.35,
        (
            -1.0 / 120.0,
            1.0 / 5040.0,
            -1.0 / 362880.0,
            1.0 / 39916800.0,
            -1.0 / 6227020800.0,
        ),
        lambda x: (x - np.sin(x) - x**3 / 6.0) / x**5,
    )


def so3_exp(phi):
    """Rodrigues form of exp(phi^x), with series fallback at small angles."""
    phi = np.asarray(phi, dtype=float)
    t = _angle(phi)
    a = _coef_sinc(t)
    b = _coef_one_minus_cos(t)
    P = skew(phi)
    return (
        _eye(3, phi.shape[:-1])
        + a[..., None, None] * P
        + b[..., None, None] * (P @ P)
    )


def _so3_log_near_pi(C):
    # Axis from the dominant diagonal of the symmetric part; the sign is
    # recovered from the (small but nonzero) antisymmetric part.
    t = np.arccos(np.clip((np.trace(C) - 1.0) / 2.0, -1.0, 1.0))
    B = 0.5 * (C + C.T) - np.cos(t) * np.eye(3)
    one_m_cos = 1.0 - np.cos(t)
    i = int(np.argmax(np.diag(B)))
    n = np.empty(3)
    n[i] = np.sqrt(max(B[i, i] / one_m_cos, 0.0))
    for j in range(3):
        if j != i:
            n[j] = B[i, j] / (one_m_cos * n[i])
    n /= np.linalg.norm(n)
    w = unskew(C)
    if np.dot(n, w) < 0.0:
        n = -n
    return t * n


def so3_log(C):
    """Principal-branch rotation vector of C in SO(3).

    Raises :class:`BranchAmbiguityError` when the rotation angle is
    numerically indistinguishable from pi.
    """
    C = np.asarray(C, dtype=float)
    tr = np.trace(C, axis1=-2, axis2=-1)
    t = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    if np.any(t >= np.pi - _NEAR_PI_ERROR):
        raise BranchAmbiguityError("rotation angle indistinguishable from pi")
    t2 = t * t
    small = t < SMALL_ANGLE
    ts = np.where(small, 1.0, t)
    coef = np.where(small, 0.5 + t2 / 12.0, ts / (2.0 * np.sin(ts)))
    phi = coef[..., None] * np.stack(
        [
            C[..., 2, 1] - C[..., 1, 2],
            C[..., 0, 2] - C[..., 2, 0],
            C[..., 1, 0] - C[..., 0, 1],
        ],
        axis=-1,
    )
    near_pi = t > np.pi - _NEAR_PI_STABLE
    if np.any(near_pi):
        flat_phi = phi.reshape(-1, 3)
        flat_C = C.reshape(-1, 3, 3)
        for k in np.flatnonzero(near_pi.reshape(-1)):
            flat_phi[k] = _so3_log_near_pi(flat_C[k])
        phi = flat_phi.reshape(phi.shape)
    return phi


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    t = _angle(phi)
    b = _coef_one_minus_cos(t)
    c = _coef_t_minus_sin(t)
    P = skew(phi)
    return (
        _eye(3, phi.shape[:-1])
        + b[..., None, None] * P
        + c[..., None, None] * (P @ P)
    )


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    t = _angle(phi)
    if np.any(t > 2.0 * np.pi - SMALL_ANGLE):
        raise JacobianSingularityError("left Jacobian inverse singular near 2*pi")
    d = _coef_jinv(t)
    P = skew(phi)
    return (
        _eye(3, phi.shape[:-1])
        - 0.5 * P
        + d[..., None, None] * (P @ P)
    )


def make_pose(C, r):
    """Assemble (...,4,4) poses from rotations (...,3,3) and positions (...,3)."""
    C = np.asarray(C, dtype=float)
    r = np.asarray(r, dtype=float)
    shape = np.broadcast_shapes(C.shape[:-2], r.shape[:-1])
    T = np.zeros(shape + (4, 4))
    T[..., :3, :3] = C
    T[..., :3, 3] = r
    T[..., 3, 3] = 1.0
    return T


def rotation_of(T):
    return np.asarray(T, dtype=float)[..., :3, :3]


def position_of(T):
    return np.asarray(T, dtype=float)[..., :3, 3]


def se3_identity():
    return np.eye(4)


def se3_inv(T):
    T = np.asarray(T, dtype=float)
    Ct = np.swapaxes(T[..., :3, :3], -1, -2)
    return make_pose(Ct, -(Ct @ T[..., :3, 3:4])[..., 0])


def se3_exp(xi):
    """Closed-form exponential map from (...,6) twists to (...,4,4) poses."""
    xi = np.asarray(xi, dtype=float)
    phi = xi[..., :3]
    rho = xi[..., 3:]
    C = so3_exp(phi)
    r = (so3_left_jacobian(phi) @ rho[..., None])[..., 0]
    return make_pose(C, r)


def se3_log(T):
    """Principal-branch twist of a pose; inverse of :func:`se3_exp`."""
    T = np.asarray(T, dtype=float)
    phi = so3_log(T[..., :3, :3])
    rho = (so3_left_jacobian_inv(phi) @ T[..., :3, 3:4])[..., 0]
    return np.concatenate([phi, rho], axis=-1)


def adjoint(T):
    """Adjoint matrix [[C, 0], [r^x C, C]] of a pose."""
    T = np.asarray(T, dtype=float)
    C = T[..., :3, :3]
    A = np.zeros(T.shape[:-2] + (6, 6))
    A[..., :3, :3] = C
    A[..., 3:, 3:] = C
    A[..., 3:, :3] = skew(T[..., :3, 3]) @ C
    return A


def small_adjoint(xi):
    """Algebra adjoint [[phi^x, 0], [rho^x, phi^x]] of a twist."""
    xi = np.asarray(xi, dtype=float)
    P = skew(xi[..., :3])
    A = np.zeros(xi.shape[:-1] + (6, 6))
    A[..., :3, :3] = P
    A[..., 3:, 3:] = P
    A[..., 3:, :3] = skew(xi[..., 3:])
    return A


def _left_jacobian_coupling(xi):
    # Coupling block of the SE(3) left Jacobian (translation response to
    # rotation), closed form with series fallbacks at small angles.
    phi = xi[..., :3]
    rho = xi[..., 3:]
    t = _angle(phi)
    m1 = _coef_t_minus_sin(t)
    m2 = _coef_q2(t)
    m3 = _coef_q3(t)
    P = skew(phi)
    R = skew(rho)
    PR = P @ R
    RP = R @ P
    PP = P @ P
    m1 = m1[..., None, None]
    m2 = m2[..., None, None]
    m3 = m3[..., None, None]
    return (
        0.5 * R
        + m1 * (PR + RP + P @ RP)
        + m2 * (PP @ R + R @ PP - 3.0 * (PR @ P))
        + 0.5 * (m2 + 3.0 * m3) * (PR @ PP + PP @ RP)
    )


def left_jacobian(xi):
    """SE(3) left Jacobian in the (phi, rho) block ordering."""
    xi = np.asarray(xi, dtype=float)
    J = so3_left_jacobian(xi[..., :3])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = _left_jacobian_coupling(xi)
    return out


def left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    Ji = so3_left_jacobian_inv(xi[..., :3])
    Q = _left_jacobian_coupling(xi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., 3:, :3] = -Ji @ Q @ Ji
    return out


def right_jacobian(xi):
    """SE(3) right Jacobian; equals the left Jacobian at the negated twist."""
    return left_jacobian(-np.asarray(xi, dtype=float))


def right_jacobian_inv(xi):
    return left_jacobian_inv(-np.asarray(xi, dtype=float))


def interpolate(Ti, Tk, alpha):
    """Geodesic interpolation Ti * exp(alpha * log(Ti^-1 Tk)).

    ``alpha`` may be scalar or batched; 0 returns Ti, 1 returns Tk.
    """
    Ti = np.asarray(Ti, dtype=float)
    Tk = np.asarray(Tk, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    xi = se3_log(se3_inv(Ti) @ Tk)
    return Ti @ se3_exp(alpha[..., None] * xi)


def is_rotation(C, tol=1e-9):
    C = np.asarray(C, dtype=float)
    ortho = np.abs(C @ np.swapaxes(C, -1, -2) - np.eye(3)).max() <= tol
    return bool(ortho and np.abs(np.linalg.det(C) - 1.0).max() <= tol)
