"""Shared constructions: rotation matrices, ReLU-pair identity networks, and
synthetic linear models/datasets used across the test modules."""

import numpy as np

from koopflow.koopman import KoopmanModel
from koopflow.net import Mlp
from koopflow.systems import Trajectory


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def identity_mlp(n: int) -> Mlp:
    """Two affine layers computing ReLU(x) - ReLU(-x) = x exactly."""
    eye = np.eye(n)
    w1 = np.concatenate([eye, -eye], axis=0)
    w2 = np.concatenate([eye, -eye], axis=1)
    return Mlp([w1, w2], [np.zeros(2 * n), np.zeros(n)])


def linear_rotation_model(theta: float) -> KoopmanModel:
    """phi = psi = identity (via ReLU pairs), K = 2-D rotation by theta."""
    return KoopmanModel(identity_mlp(2), identity_mlp(2), rotation(theta))


def rotation_trajectory(x0, step_angle: float, n_samples: int, dt: float, t0: float = 0.0) -> Trajectory:
    states = np.empty((n_samples, 2))
    states[0] = x0
    r = rotation(step_angle)
    for k in range(1, n_samples):
        states[k] = r @ states[k - 1]
    return Trajectory(t0=t0, dt=dt, states=states)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def near_orthogonal_no_neg(d: int, rng: np.random.Generator, eps: float = 0.1) -> np.ndarray:
    """Q exp(eps*S) with no eigenvalue within 1e-3 of -1 (checked on the product)."""
    import scipy.linalg

    while True:
        q = random_orthogonal(d, rng)
        if np.min(np.abs(np.linalg.eigvals(q) + 1.0)) <= 1e-3:
            continue
        a = rng.normal(size=(d, d))
        s = (a - a.T) / 2.0
        k = q @ scipy.linalg.expm(eps * rng.uniform(0.0, 1.0) * s)
        if np.min(np.abs(np.linalg.eigvals(k) + 1.0)) > 1e-3:
            return k
