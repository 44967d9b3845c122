"""Dynamic-obstacle estimation and sample-based forward prediction.

The obstacle follows chi_{t+1} = E_t chi_t + F_t + w_t with measurements
y_t = H_t chi_t + v_t. The planner never sees the true noise moments: the
filter uses sample moments of the noise sample sets, and predictions are made
by pushing state samples through the dynamics with paired noise samples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from . import stats
from .errors import CoverageError, DomainError

PRIOR = "prior"
POSTERIOR = "posterior"
FACE_RIDGE = 1e-9


@dataclass(frozen=True)
class FaceTemplate:
    """Face {x | a @ x + c @ chi + d = 0}; safe side a @ x + c @ chi + d > 0."""

    a: np.ndarray
    c: np.ndarray
    d: float


@dataclass
class ObstacleModel:
    e_mats: list
    f_vecs: list
    h_mats: list
    init_belief: stats.GaussianBelief | None
    process_noise: stats.GaussianBelief | None
    measurement_noise: stats.GaussianBelief | None
    faces: list
    length: float = 0.0
    width: float = 0.0

    @property
    def n_states(self):
        return self.e_mats[0].shape[0]

    def planner_view(self):
        """Copy with the dynamics and shape only; the noise laws are dropped."""
        return replace(self, init_belief=None, process_noise=None, measurement_noise=None)

    def e(self, t):
        return self.e_mats[min(t, len(self.e_mats) - 1)]

    def f(self, t):
        return self.f_vecs[min(t, len(self.f_vecs) - 1)]

    def h(self, t):
        return self.h_mats[min(t, len(self.h_mats) - 1)]


@dataclass(frozen=True)
class FilterState:
    chi_hat: np.ndarray
    sigma_hat: np.ndarray
    kind: str = POSTERIOR
    t: int = 0

    def __post_init__(self):
        sig = stats.symmetrize(self.sigma_hat)
        if np.linalg.eigvalsh(sig).min() < -stats.PSD_TOL * max(1.0, np.abs(sig).max()):
            raise DomainError("filter covariance lost positive semidefiniteness")
        object.__setattr__(self, "chi_hat", np.asarray(self.chi_hat, float))
        object.__setattr__(self, "sigma_hat", sig)

    @property
    def belief(self):
        return stats.GaussianBelief(self.chi_hat, self.sigma_hat)


def plain_moments(samples):
    """Sample mean and unbiased covariance without the definiteness check."""
    d = np.asarray(samples.samples if isinstance(samples, stats.SampleSet) else samples, float)
    mean = d.mean(axis=0)
    c = d - mean
    return mean, stats.symmetrize(c.T @ c / (d.shape[0] - 1))


def kf_predict(fs, model, t, noise_cov):
    """Prior at t from the posterior at t - 1, with an estimated process covariance."""
    e = model.e(t - 1)
    chi = e @ fs.chi_hat + model.f(t - 1)
    sig = e @ fs.sigma_hat @ e.T + noise_cov
    return FilterState(chi, stats.symmetrize(sig), PRIOR, t)


def kalman_gain(sigma_prior, h, meas_cov):
    s = stats.symmetrize(meas_cov + h @ sigma_prior @ h.T)
    try:
        factor = linalg.cho_factor(s)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular innovation covariance") from exc
    return linalg.cho_solve(factor, h @ sigma_prior).T


def kf_update(fs, model, y, meas_cov):
    """Posterior from the prior and measurement ``y`` (standard Kalman gain)."""
    h = model.h(fs.t)
    k = kalman_gain(fs.sigma_hat, h, meas_cov)
    chi = fs.chi_hat + k @ (np.asarray(y, float) - h @ fs.chi_hat)
    sig = (np.eye(fs.chi_hat.size) - k @ h) @ fs.sigma_hat
    return FilterState(chi, stats.symmetrize(sig), POSTERIOR, fs.t)


def joseph_update(fs, model, meas_cov):
    """Posterior covariance in Joseph form (reference for the short form)."""
    h = model.h(fs.t)
    k = kalman_gain(fs.sigma_hat, h, meas_cov)
    a = np.eye(fs.chi_hat.size) - k @ h
    return stats.symmetrize(a @ fs.sigma_hat @ a.T + k @ meas_cov @ k.T)


def propagate_samples(chi_samples, model, tau, horizon, noise_samples):
    """Per-step state samples for t = tau+1 .. tau+horizon.

    ``noise_samples[t]`` is the (N_s, n) array of w_t draws; draw i always
    pairs with state sample i. Returns an array of shape (horizon, N_s, n).
    """
    chi = np.asarray(chi_samples.samples if isinstance(chi_samples, stats.SampleSet) else chi_samples, float)
    if tau + horizon > len(noise_samples):
        raise CoverageError(f"noise samples cover {len(noise_samples)} steps, need {tau + horizon}")
    out = np.empty((horizon,) + chi.shape)
    for k in range(horizon):
        t = tau + k
        w = np.asarray(noise_samples[t], float)
        if w.shape[0] != chi.shape[0]:
            raise CoverageError("noise and state sample counts differ")
        chi = chi @ model.e(t).T + model.f(t) + w
        out[k] = chi
    return out


def face_samples(chi_set, face):
    """Rows d = [a; c @ chi + d] for every state sample."""
    chi = np.asarray(chi_set, float)
    b = chi @ face.c + face.d
    return np.hstack([np.broadcast_to(face.a, (chi.shape[0], face.a.size)), b[:, None]])


def predicted_face_estimates(chi_sets, faces, ridge=FACE_RIDGE):
    """{(k, i): MomentEstimate} for every prediction step k (0-based) and face i.

    The a-block of a dynamic face is deterministic, so its samples have zero
    spread; a small ridge keeps the estimate positive definite and those
    coordinates are flagged as fixed.
    """
    out = {}
    for k, chi in enumerate(chi_sets):
        for i, face in enumerate(faces):
            out[(k, i)] = stats.sample_moments(face_samples(chi, face), ridge=ridge)
    return out


def car_faces(length, width):
    """Four faces of an axis-aligned box of size length x width centred at (chi_1, chi_2)."""
    n = 4
    c1, c2 = np.eye(n)[0], np.eye(n)[1]
    return [
        FaceTemplate(np.array([1.0, 0.0]), -c1, -length / 2.0),
        FaceTemplate(np.array([-1.0, 0.0]), c1, -length / 2.0),
        FaceTemplate(np.array([0.0, 1.0]), -c2, -width / 2.0),
        FaceTemplate(np.array([0.0, -1.0]), c2, -width / 2.0),
    ]


def inside_box(points, centers, length, width):
    """True where a point lies in the closed box (all faces <= 0)."""
    p = np.asarray(points, float)
    c = np.asarray(centers, float)
    return (np.abs(p[..., 0] - c[..., 0]) <= length / 2.0) & (np.abs(p[..., 1] - c[..., 1]) <= width / 2.0)


def dlqr(a, b, q, r, tol=1e-10, max_iter=100_000):
    """Discrete LQR gain by fixed-point iteration of the Riccati recursion."""
    p = np.array(q, float)
    for _ in range(max_iter):
        k = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
        p_new = q + a.T @ p @ (a - b @ k)
        p_new = stats.symmetrize(p_new)
        if np.max(np.abs(p_new - p)) <= tol * max(1.0, np.max(np.abs(p))):
            p = p_new
            break
        p = p_new
    else:
        raise np.linalg.LinAlgError("Riccati iteration did not converge")
    return np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a), p


def merging_car_model(ts, init_belief, process_noise, measurement_noise, length, width,
                      lane_center=2.0, horizon=50, q=None, r=None):
    """Constant-velocity longitudinal motion with an LQR lateral pull to ``lane_center``.

    State (chi_1, chi_2, chi_3, chi_4) = (x, y, vx, vy); measurements are the
    two positions.
    """
    from .model import discretize

    a_c = np.zeros((4, 4))
    a_c[0, 2] = a_c[1, 3] = 1.0
    b_c = np.zeros((4, 2))
    b_c[2, 0] = b_c[3, 1] = 1.0
    a_d, b_d = discretize(a_c, b_c, ts)
    lat = [1, 3]
    a_lat = a_d[np.ix_(lat, lat)]
    b_lat = b_d[lat, 1:2]
    q = np.eye(2) if q is None else np.asarray(q, float)
    r = np.eye(1) if r is None else np.asarray(r, float)
    k, _ = dlqr(a_lat, b_lat, q, r)
    gain = np.zeros((2, 4))
    gain[1, lat] = k[0]
    ref = np.array([0.0, lane_center, 0.0, 0.0])
    e = a_d - b_d @ gain
    f = b_d @ gain @ ref
    h = np.hstack([np.eye(2), np.zeros((2, 2))])
    return ObstacleModel([e] * horizon, [f] * horizon, [h] * horizon, init_belief, process_noise,
                         measurement_noise, car_faces(length, width), length, width)


def simulate_obstacle(model, rng, steps):
    """True trajectory chi_0..chi_steps and measurements y_0..y_steps."""
    chi = stats.draw_array(model.init_belief, rng, 1)[0]
    traj = [chi]
    for t in range(steps):
        w = stats.draw_array(model.process_noise, rng, 1)[0]
        chi = model.e(t) @ chi + model.f(t) + w
        traj.append(chi)
    traj = np.array(traj)
    meas = np.array([model.h(t) @ traj[t] + stats.draw_array(model.measurement_noise, rng, 1)[0]
                     for t in range(steps + 1)])
    return traj, meas


def open_loop_velocity_std(fs, model, noise_cov, steps, index=2):
    """Std of one state coordinate under pure prediction for 1..steps lead times."""
    out = []
    for t in range(1, steps + 1):
        fs = kf_predict(fs, model, fs.t + 1, noise_cov)
        out.append(float(np.sqrt(max(fs.sigma_hat[index, index], 0.0))))
    return np.array(out)
