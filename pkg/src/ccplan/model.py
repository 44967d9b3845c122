"""Planning problem data: dynamics, uncertain obstacle faces, risk and big-M."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from . import stats
from .concentration import exact_halfspace, plug_in_halfspace, robustify_halfspace
from .errors import CertificateError, DegenerateSamplesError, DomainError, RiskDomainError

BIG_M_SAFETY = 1.2
RISK_FLOOR = 1e-6
FACE_RIDGE = 1e-9


@dataclass(frozen=True)
class LtvSystem:
    """x_{t+1} = A_t x_t + B_t u_t for t = 0..N-1 with u_t in a box."""

    a_mats: tuple
    b_mats: tuple
    initial_state: np.ndarray
    input_lb: np.ndarray
    input_ub: np.ndarray

    def __post_init__(self):
        a = tuple(np.atleast_2d(np.asarray(m, float)) for m in self.a_mats)
        b = tuple(np.atleast_2d(np.asarray(m, float)) for m in self.b_mats)
        x0 = np.atleast_1d(np.asarray(self.initial_state, float))
        if len(a) != len(b) or not a:
            raise DomainError("a_mats and b_mats must be non-empty lists of equal length")
        nx, nu = x0.size, b[0].shape[1]
        for am, bm in zip(a, b):
            if am.shape != (nx, nx) or bm.shape != (nx, nu):
                raise DomainError("inconsistent dynamics dimensions")
        lb = np.broadcast_to(np.asarray(self.input_lb, float), (nu,)).copy()
        ub = np.broadcast_to(np.asarray(self.input_ub, float), (nu,)).copy()
        if np.any(lb > ub):
            raise DomainError("input box is empty")
        object.__setattr__(self, "a_mats", a)
        object.__setattr__(self, "b_mats", b)
        object.__setattr__(self, "initial_state", x0)
        object.__setattr__(self, "input_lb", lb)
        object.__setattr__(self, "input_ub", ub)

    @property
    def horizon(self):
        return len(self.a_mats)

    @property
    def nx(self):
        return self.initial_state.size

    @property
    def nu(self):
        return self.b_mats[0].shape[1]

    def with_initial_state(self, x0):
        return replace(self, initial_state=np.asarray(x0, float))


def lti_system(a, b, horizon, x0, input_lb, input_ub):
    return LtvSystem((a,) * horizon, (b,) * horizon, x0, input_lb, input_ub)


def discretize(a_c, b_c, ts):
    """Zero-order-hold discretization of continuous dynamics."""
    a_c, b_c = np.atleast_2d(a_c), np.atleast_2d(b_c)
    nx, nu = b_c.shape
    big = np.zeros((nx + nu, nx + nu))
    big[:nx, :nx] = a_c
    big[:nx, nx:] = b_c
    e = expm(big * ts)
    return e[:nx, :nx], e[:nx, nx:]


def single_integrator(ts, dim=2):
    return np.eye(dim), ts * np.eye(dim)


def double_integrator(ts, dim=2):
    a_c = np.block([[np.zeros((dim, dim)), np.eye(dim)], [np.zeros((dim, dim)), np.zeros((dim, dim))]])
    b_c = np.vstack([np.zeros((dim, dim)), np.eye(dim)])
    return discretize(a_c, b_c, ts)


def affine_map(sys):
    """(Phi, phi) with the stacked states [x_1; ...; x_N] = Phi u + phi."""
    n, nx, nu = sys.horizon, sys.nx, sys.nu
    phi_mat = np.zeros((n * nx, n * nu))
    phi = np.zeros(n * nx)
    x = sys.initial_state
    block = np.zeros((nx, n * nu))
    for t in range(n):
        a, b = sys.a_mats[t], sys.b_mats[t]
        x = a @ x
        block = a @ block
        block[:, t * nu:(t + 1) * nu] = b
        phi_mat[t * nx:(t + 1) * nx] = block
        phi[t * nx:(t + 1) * nx] = x
    return phi_mat, phi


def rollout(sys, u_seq):
    """States x_0..x_N (shape (N+1, nx)) under the input sequence (shape (N, nu))."""
    u_seq = np.asarray(u_seq, float).reshape(-1, sys.nu) if np.size(u_seq) else np.zeros((0, sys.nu))
    if u_seq.shape[0] != sys.horizon:
        raise DomainError(f"expected {sys.horizon} inputs, got {u_seq.shape[0]}")
    xs = [sys.initial_state]
    for t in range(sys.horizon):
        xs.append(sys.a_mats[t] @ xs[-1] + sys.b_mats[t] @ u_seq[t])
    return np.array(xs)


@dataclass(frozen=True)
class QuadraticCost:
    """Terminal and/or stage tracking plus an input penalty.

    J = ||x_N[terminal_idx] - terminal_target||^2
        + sum_{t=1..N} ||x_t[stage_idx] - stage_target||^2
        + input_weight * sum_t ||u_{t-1}||^2
    """

    terminal_idx: tuple = ()
    terminal_target: tuple = ()
    stage_idx: tuple = ()
    stage_target: tuple = ()
    input_weight: float = 0.0

    def evaluate(self, x_traj, u_seq):
        x_traj = np.asarray(x_traj, float)
        j = 0.0
        if self.terminal_idx:
            j += float(np.sum((x_traj[-1, list(self.terminal_idx)] - np.asarray(self.terminal_target)) ** 2))
        if self.stage_idx:
            j += float(np.sum((x_traj[1:, list(self.stage_idx)] - np.asarray(self.stage_target)) ** 2))
        return j + self.input_weight * float(np.sum(np.asarray(u_seq, float) ** 2))


@dataclass(frozen=True)
class UncertainFace:
    """Face i of obstacle j at plan step t (1-based) with d = [a; b].

    ``belief`` holds exact moments, ``samples``/``estimate`` the sampled view.
    """

    t: int
    j: int
    i: int
    belief: stats.GaussianBelief | None = None
    samples: stats.SampleSet | None = None
    estimate: stats.MomentEstimate | None = None

    @property
    def key(self):
        return (self.t, self.j, self.i)

    def moment_estimate(self):
        if self.estimate is not None:
            return self.estimate
        if self.samples is None:
            raise DomainError(f"face {self.key} has neither an estimate nor samples")
        try:
            return stats.sample_moments(self.samples)
        except DegenerateSamplesError:
            # deterministic coordinates (dynamic faces): ridge them and mark fixed
            return stats.sample_moments(self.samples, ridge=FACE_RIDGE)

    def halfspace(self, method, eps, beta):
        if method == "ema":
            if self.belief is None:
                raise DomainError(f"face {self.key} has no exact moments")
            return exact_halfspace(self.belief, eps)
        if method == "mra":
            return robustify_halfspace(self.moment_estimate(), beta, eps)
        if method == "plugin":
            return plug_in_halfspace(self.moment_estimate(), eps)
        raise DomainError(f"no half-space form for method {method!r}")


@dataclass(frozen=True)
class RiskAllocation:
    eps_total: float
    per_constraint: dict

    def __post_init__(self):
        for key, e in self.per_constraint.items():
            if not (0.0 < e < 0.5):
                raise RiskDomainError(f"risk {e!r} for {key} outside (0, 0.5)")

    def total(self):
        return float(sum(self.per_constraint.values()))

    def __getitem__(self, key):
        return self.per_constraint[key]


@dataclass
class PlanningProblem:
    system: LtvSystem
    faces: list
    eps: float
    cost: QuadraticCost
    beta: float = 1e-3
    state_lb: np.ndarray | None = None
    state_ub: np.ndarray | None = None
    face_states: tuple | None = None
    big_m: float | None = None
    allocation: str = "improved"
    risk: RiskAllocation | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.eps < 1.0):
            raise RiskDomainError(f"eps must lie in (0, 1), got {self.eps!r}")
        nx = self.system.nx
        if self.face_states is None:
            self.face_states = tuple(range(nx))
        self.face_states = tuple(int(i) for i in self.face_states)
        for f in self.faces:
            if not 1 <= f.t <= self.system.horizon:
                raise DomainError(f"face {f.key} outside the horizon")
        if self.state_lb is not None:
            self.state_lb = np.broadcast_to(np.asarray(self.state_lb, float), (nx,)).copy()
        if self.state_ub is not None:
            self.state_ub = np.broadcast_to(np.asarray(self.state_ub, float), (nx,)).copy()
        if self.risk is None:
            self.risk = allocate_risk(self)

    @property
    def horizon(self):
        return self.system.horizon

    def groups(self):
        """{(t, j): [faces sorted by i]} in (t, j) order."""
        out = {}
        for f in sorted(self.faces, key=lambda f: f.key):
            out.setdefault((f.t, f.j), []).append(f)
        return out

    @property
    def n_obstacles(self):
        return len({f.j for f in self.faces})

    def faces_per_obstacle(self):
        per = {}
        for f in self.faces:
            per.setdefault(f.j, set()).add(f.i)
        return {j: len(v) for j, v in per.items()}

    def augmented(self, x):
        """[x[face_states]; 1] for one state or a stack of states."""
        x = np.asarray(x, float)
        sel = x[..., list(self.face_states)]
        return np.concatenate([sel, np.ones(sel.shape[:-1] + (1,))], axis=-1)


def risk_alloc_uniform(problem):
    """eps / (N * sum_j F_j) for every face."""
    total_faces = sum(problem.faces_per_obstacle().values())
    if total_faces == 0:
        return RiskAllocation(problem.eps, {})
    e = problem.eps / (problem.horizon * total_faces)
    return RiskAllocation(problem.eps, {f.key: e for f in problem.faces})


def risk_alloc_improved(problem):
    """eps / (N * N_o) for every face (valid with exactly one active face per group)."""
    n_o = problem.n_obstacles
    if n_o == 0:
        return RiskAllocation(problem.eps, {})
    e = problem.eps / (problem.horizon * n_o)
    return RiskAllocation(problem.eps, {f.key: e for f in problem.faces})


def allocate_risk(problem):
    if problem.allocation == "uniform":
        return risk_alloc_uniform(problem)
    if problem.allocation == "improved":
        return risk_alloc_improved(problem)
    raise DomainError(f"unknown risk allocation {problem.allocation!r}")


# --------------------------------------------------------------------------
# Big-M


def _box_vertices(lb, ub):
    lb, ub = np.asarray(lb, float), np.asarray(ub, float)
    if lb.shape != ub.shape or np.any(~np.isfinite(lb)) or np.any(~np.isfinite(ub)):
        raise CertificateError("big-M needs a bounded state box")
    if np.any(lb > ub):
        raise CertificateError("state box is empty")
    return np.array(list(itertools.product(*zip(lb, ub))))


def face_worst_violation(face, vertices, eps_min=RISK_FLOOR, beta=1e-3):
    """max over box vertices of (left-hand side - right-hand side) at z = 0.

    Both the cone and the sampled forms are convex in x, so the maximum over a
    box is attained at a vertex. Every representation the face carries is
    covered, at the smallest risk the planner may assign.
    """
    xt = np.hstack([vertices, np.ones((len(vertices), 1))])
    worst = -np.inf
    forms = []
    if face.belief is not None:
        forms.append(face.halfspace("ema", eps_min, beta))
    if face.samples is not None or face.estimate is not None:
        forms.append(face.halfspace("mra", eps_min, beta))
    for hs in forms:
        worst = max(worst, max(hs.tightening(v) - hs.mean_hat @ v for v in xt))
    if face.samples is not None:
        worst = max(worst, float((-(face.samples.samples @ xt.T)).max()))
    return worst


def big_m_value(problem, state_lb, state_ub, eps_min=RISK_FLOOR, faces=None):
    """Certified big-M: with z = 1 every face constraint holds over the box.

    The box is over the face coordinates ``problem.face_states``.
    """
    verts = _box_vertices(state_lb, state_ub)
    faces = problem.faces if faces is None else faces
    worst = max((face_worst_violation(f, verts, eps_min, problem.beta) for f in faces), default=0.0)
    return float(max(BIG_M_SAFETY * worst, 1e-3))


def reachable_box(problem):
    """Per-step interval hull of the states reachable under the input box.

    Intersected with the problem's state box; rows are steps 1..N.
    """
    sys = problem.system
    phi_mat, phi = affine_map(sys)
    lb_u = np.tile(sys.input_lb, sys.horizon)
    ub_u = np.tile(sys.input_ub, sys.horizon)
    center = phi_mat @ (0.5 * (lb_u + ub_u)) + phi
    radius = np.abs(phi_mat) @ (0.5 * (ub_u - lb_u))
    lo = (center - radius).reshape(sys.horizon, sys.nx)
    hi = (center + radius).reshape(sys.horizon, sys.nx)
    if problem.state_lb is not None:
        lo = np.maximum(lo, problem.state_lb)
    if problem.state_ub is not None:
        hi = np.minimum(hi, problem.state_ub)
    return lo, hi


def face_big_m(problem, box=None):
    """{(t, j, i): M} certified per face over the reachable box at step t.

    A face only has to be deactivated by its own binary, so each face gets the
    smallest certified constant; with ``problem.big_m`` set, every face uses it.
    ``box`` overrides the per-step state box (rows are steps 1..N).
    """
    if problem.big_m is not None:
        return {f.key: float(problem.big_m) for f in problem.faces}
    lo, hi = reachable_box(problem) if box is None else box
    fs = list(problem.face_states)
    out = {}
    for f in problem.faces:
        l, h = lo[f.t - 1, fs], hi[f.t - 1, fs]
        out[f.key] = big_m_value(problem, l, np.maximum(h, l), faces=[f])
    return out


def group_big_m(problem, box=None):
    """{(t, j): M} certified over the reachable box at step t (or the fixed M)."""
    groups = problem.groups()
    if problem.big_m is not None:
        return {key: float(problem.big_m) for key in groups}
    lo, hi = reachable_box(problem) if box is None else box
    fs = list(problem.face_states)
    out = {}
    for (t, j), faces in groups.items():
        l, h = lo[t - 1, fs], hi[t - 1, fs]
        h = np.maximum(h, l)
        out[(t, j)] = big_m_value(problem, l, h, faces=faces)
    return out


# --------------------------------------------------------------------------
# Risk-allocation equivalence


def _required_risk(spread, margin):
    """Smallest eps with Psi^-1(1 - eps) * spread <= margin (0 when free, 1 when impossible)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = stats.norm_cdf(-margin / np.where(spread > 0, spread, 1.0))
    r = np.where(spread > 0, r, np.where(margin >= 0, 0.0, 1.0))
    return r


def improved_vs_full_equivalence_check(problem, grid_points=9, big_m=None, return_sets=False):
    """Exhaustively compare the two binary/risk encodings on a grid of inputs.

    P : exactly one active face per group, every face at eps / (N N_o).
    P': at least one active face per group, any allocation with total <= eps.
    Returns True when both encodings accept exactly the same grid inputs, or
    the two boolean acceptance masks over the grid with ``return_sets``.
    """
    sys = problem.system
    faces = sorted(problem.faces, key=lambda f: f.key)
    if len(faces) > 16:
        raise DomainError("too many faces for exhaustive enumeration")
    groups = problem.groups()
    n_o = problem.n_obstacles
    eps_imp = problem.eps / (problem.horizon * max(n_o, 1))
    if big_m is None:
        lo, hi = reachable_box(problem)
        fs = list(problem.face_states)
        big_m = big_m_value(problem, lo[:, fs].min(axis=0), hi[:, fs].max(axis=0), eps_min=1e-12)

    axes = [np.linspace(l, h, grid_points) for l, h in zip(np.tile(sys.input_lb, sys.horizon),
                                                          np.tile(sys.input_ub, sys.horizon))]
    u_grid = np.array(list(itertools.product(*axes)))
    phi_mat, phi = affine_map(sys)
    states = (u_grid @ phi_mat.T + phi).reshape(len(u_grid), sys.horizon, sys.nx)
    if problem.state_lb is not None or problem.state_ub is not None:
        lb = problem.state_lb if problem.state_lb is not None else -np.inf
        ub = problem.state_ub if problem.state_ub is not None else np.inf
        in_box = np.all((states >= lb - 1e-12) & (states <= ub + 1e-12), axis=(1, 2))
    else:
        in_box = np.ones(len(u_grid), dtype=bool)

    # per face: spread sigma(x) and mean margin mu @ xt
    spread = np.zeros((len(u_grid), len(faces)))
    margin = np.zeros((len(u_grid), len(faces)))
    for k, f in enumerate(faces):
        xt = problem.augmented(states[:, f.t - 1])
        root = stats.psd_sqrt(f.belief.covariance)
        spread[:, k] = np.linalg.norm(xt @ root.T, axis=1)
        margin[:, k] = xt @ f.belief.mean
    q_imp = stats.norm_inv_cdf(1.0 - eps_imp)

    member = [[faces.index(f) for f in g] for g in groups.values()]
    feas_p = np.zeros(len(u_grid), dtype=bool)
    feas_full = np.zeros(len(u_grid), dtype=bool)
    for z in itertools.product((0, 1), repeat=len(faces)):
        z = np.array(z)
        sums = [z[m].sum() for m in member]
        exact_one = all(s == len(m) - 1 for s, m in zip(sums, member))
        at_least_one = all(s < len(m) for s, m in zip(sums, member))
        if not at_least_one:
            continue
        m_eff = margin + big_m * z
        if exact_one:
            ok = np.all(q_imp * spread <= m_eff + 1e-12, axis=1)
            feas_p |= ok
        need = _required_risk(spread, m_eff)
        ok_full = np.all(need < 0.5, axis=1) & (need.sum(axis=1) <= problem.eps)
        feas_full |= ok_full
    feas_p &= in_box
    feas_full &= in_box
    if return_sets:
        return feas_p, feas_full
    return bool(np.array_equal(feas_p, feas_full))
