import numpy as np
import pytest

from lcsmooth import lie


def random_twist(rng, max_angle=np.pi - 0.1, trans_scale=1.0):
    phi = rng.normal(size=3)
    phi *= rng.uniform(0.0, max_angle) / np.linalg.norm(phi)
    return np.concatenate([phi, rng.normal(size=3) * trans_scale])


def random_pose(rng, max_angle=np.pi - 0.1, trans_scale=1.0):
    return lie.se3_exp(random_twist(rng, max_angle, trans_scale))


def series_matrix_exp(X, terms=30):
    out = np.eye(X.shape[0])
    term = np.eye(X.shape[0])
    for k in range(1, terms):
        term = term @ X / k
        out = out + term
    return out


def series_left_jacobian(xi, terms=30):
    A = lie.small_adjoint(xi)
    out = np.eye(6)
    term = np.eye(6)
    for k in range(1, terms):
        term = term @ A / (k + 1)
        out = out + term
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
