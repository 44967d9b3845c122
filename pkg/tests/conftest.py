import numpy as np
import pytest

from ccplan import model, stats

WALLS = (np.array([-1.0, 0.0, 2.0]), np.array([0.0, -1.0, 6.0]))


def corridor_problem(rng, horizon=10, n_samples=1259, cov_scale=1e-3, eps=0.05, with_samples=True):
    """Single integrator from (1,1) to (8,7) past one two-faced wall obstacle."""
    sys = model.lti_system(*model.single_integrator(1.0), horizon, np.array([1.0, 1.0]), -np.ones(2), np.ones(2))
    faces = []
    for t in range(1, horizon + 1):
        for i, m in enumerate(WALLS):
            b = stats.GaussianBelief(m, cov_scale * np.eye(3))
            s = stats.gaussian_draw(b, rng, n_samples) if with_samples else None
            faces.append(model.UncertainFace(t, 0, i, belief=b, samples=s))
    cost = model.QuadraticCost((0, 1), (8.0, 7.0))
    return model.PlanningProblem(sys, faces, eps, cost, state_lb=[0, 0], state_ub=[9, 9])


def random_problem(rng, horizon=None, n_obs=None, n_faces=None, cov=1e-3):
    """Small single-integrator instance with random box-shaped obstacles (≤ 2^12 assignments)."""
    while True:
        h = horizon or int(rng.integers(2, 5))
        no = n_obs or int(rng.integers(1, 3))
        nf = n_faces or int(rng.integers(2, 5))
        if nf ** (h * no) <= 2 ** 12:
            break
    x0 = rng.uniform(0, 2, 2)
    sys = model.lti_system(*model.single_integrator(1.0), h, x0, -1.5 * np.ones(2), 1.5 * np.ones(2))
    normals = [np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.0, -1.0])]
    faces = []
    for j in range(no):
        c = rng.uniform(1, 4, 2)
        half = rng.uniform(0.3, 1.0, 2)
        for i in range(nf):
            a = normals[i]
            # safe side a @ x > a @ c + half along a
            off = -(a @ c) - half[i // 2]
            for t in range(1, h + 1):
                b = stats.GaussianBelief(np.append(a, off), cov * np.eye(3))
                faces.append(model.UncertainFace(t, j, i, belief=b))
    cost = model.QuadraticCost((0, 1), tuple(rng.uniform(3, 5, 2)), (), (), float(rng.uniform(0, 0.5)))
    return model.PlanningProblem(sys, faces, 0.05, cost, state_lb=[-5, -5], state_ub=[10, 10])


@pytest.fixture
def corridor():
    return corridor_problem(np.random.default_rng(0))
