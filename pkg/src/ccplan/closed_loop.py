"""Chance-constrained receding-horizon driver.

The run keeps a strict information barrier: the planner side only receives
sample sets (initial state, process noise, measurement noise) and the
measurements; the true distributions are used by the world simulator alone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model, planner, prediction, stats
from .errors import DomainError, InfeasibleError, NodeLimitError

log = logging.getLogger(__name__)

ABORT = "abort"
FALLBACK = "fallback"


@dataclass
class CcrhScenario:
    """Ego double integrator among one merging obstacle."""

    ts: float
    horizon: int
    x0: np.ndarray
    input_lb: np.ndarray
    input_ub: np.ndarray
    state_lb: np.ndarray
    state_ub: np.ndarray
    stage_idx: tuple
    stage_target: tuple
    input_weight: float
    eps: float
    beta: float
    n_samples: int
    obstacle: prediction.ObstacleModel
    ego_length: float = 0.0
    ego_width: float = 0.0
    method: str = "mra"
    policy: str = ABORT
    node_limit: int = 100_000
    gap_tol: float = 1e-9
    # a node-limited search still returns a feasible (chance-constrained) plan
    accept_incumbent: bool = True

    def __post_init__(self):
        if self.policy not in (ABORT, FALLBACK):
            raise DomainError(f"unknown infeasibility policy {self.policy!r}")
        if self.method not in ("mra", "sa"):
            raise DomainError("the receding-horizon loop plans with sampled data (mra or sa)")

    def ego_system(self, x0):
        a, b = model.double_integrator(self.ts)
        return model.lti_system(a, b, self.horizon, x0, self.input_lb, self.input_ub)

    def cost(self):
        return model.QuadraticCost((), (), tuple(self.stage_idx), tuple(self.stage_target), self.input_weight)

    def planning_faces(self):
        """Obstacle faces grown by the ego footprint (the ego is then a point)."""
        return prediction.car_faces(self.obstacle.length + self.ego_length, self.obstacle.width + self.ego_width)


@dataclass
class PlannerData:
    """Everything the planner may see: samples, never distributions."""

    chi0_samples: stats.SampleSet
    noise_samples: list
    meas_noise_samples: stats.SampleSet


@dataclass
class CcrhRun:
    records: list
    ego_states: np.ndarray
    inputs: np.ndarray
    obstacle_states: np.ndarray
    closed_loop_cost: float
    initial_open_loop_cost: float | None
    status: str
    collided: bool
    step_violations: np.ndarray
    open_loop_velocity_std: np.ndarray = field(default_factory=lambda: np.zeros(0))
    closed_loop_velocity_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def feasible(self):
        return self.status == "ok"

    def dumps(self):
        """Line-delimited JSON; bit-identical for identical seeds."""
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        summary = {
            "kind": "summary",
            "status": self.status,
            "closed_loop_cost": _r(self.closed_loop_cost),
            "initial_open_loop_cost": _r(self.initial_open_loop_cost),
            "collided": bool(self.collided),
            "ego_states": _r(self.ego_states),
            "obstacle_states": _r(self.obstacle_states),
            "open_loop_velocity_std": _r(self.open_loop_velocity_std),
            "closed_loop_velocity_std": _r(self.closed_loop_velocity_std),
        }
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"


def _r(x):
    if x is None:
        return None
    return np.round(np.asarray(x, float), 10).tolist()


def planner_data(scn, rng):
    """Sample sets standing in for past data (drawn once per run)."""
    n_s, n = scn.n_samples, 2 * scn.horizon
    obs = scn.obstacle
    chi0 = stats.gaussian_draw(obs.init_belief, rng, n_s)
    noise = [stats.draw_array(obs.process_noise, rng, n_s) for _ in range(n)]
    meas = stats.gaussian_draw(obs.measurement_noise, rng, n_s)
    return PlannerData(chi0, noise, meas)


def closed_loop_cost(scn, x_traj, u_seq):
    """Stage cost of the realized trajectory x_1..x_N and inputs u_0..u_{N-1}."""
    return scn.cost().evaluate(x_traj, u_seq)


def _build_problem(scn, x_now, estimates):
    sys = scn.ego_system(x_now)
    faces = [
        model.UncertainFace(k + 1, 0, i, estimate=est)
        for (k, i), est in sorted(estimates.items())
    ]
    return model.PlanningProblem(
        sys, faces, scn.eps, scn.cost(), beta=scn.beta, state_lb=scn.state_lb, state_ub=scn.state_ub,
        face_states=(0, 1), allocation="improved",
    )


def _build_sa_problem(scn, x_now, chi_sets, faces_tpl):
    sys = scn.ego_system(x_now)
    faces = []
    for k, chi in enumerate(chi_sets):
        for i, tpl in enumerate(faces_tpl):
            faces.append(model.UncertainFace(k + 1, 0, i, samples=stats.SampleSet(prediction.face_samples(chi, tpl))))
    return model.PlanningProblem(
        sys, faces, scn.eps, scn.cost(), beta=scn.beta, state_lb=scn.state_lb, state_ub=scn.state_ub,
        face_states=(0, 1), allocation="improved",
    )


def shift_assignment(z, horizon):
    """Previous plan's faces moved one step earlier; the last step repeats."""
    if not z:
        return None
    out = {(t - 1, j): i for (t, j), i in z.items() if t > 1}
    for (t, j), i in z.items():
        if t == horizon:
            out[(horizon, j)] = i
    return out


def run_ccrh(scn, seed):
    """One closed-loop run; ``seed`` (int or SeedSequence) fixes the world and planner streams."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    world_ss, plan_ss = ss.spawn(2)
    world_rng = np.random.default_rng(world_ss)
    plan_rng = np.random.default_rng(plan_ss)
    data = planner_data(scn, plan_rng)
    n = scn.horizon
    chi_true, meas = prediction.simulate_obstacle(scn.obstacle, world_rng, n)
    # from here on the planner side only sees dynamics, shape and samples
    obs = scn.obstacle.planner_view()

    faces_tpl = scn.planning_faces()
    w_cov = [prediction.plain_moments(w)[1] for w in data.noise_samples]
    v_cov = prediction.plain_moments(data.meas_noise_samples)[1]
    mean0, cov0 = prediction.plain_moments(data.chi0_samples)

    x = np.asarray(scn.x0, float)
    xs, us, records = [x], [], []
    status = "ok"
    initial_cost = None
    prev_plan = None
    prev_z = None
    fs = None
    post_std = []
    for tau in range(n):
        if tau == 0:
            fs = prediction.FilterState(mean0, cov0, prediction.POSTERIOR, 0)
            chi_now = data.chi0_samples.samples
        else:
            prior = prediction.kf_predict(fs, obs, tau, w_cov[tau - 1])
            fs = prediction.kf_update(prior, obs, meas[tau], v_cov)
            chi_now = stats.draw_array(fs.belief, plan_rng, scn.n_samples)
        post_std.append(float(np.sqrt(max(fs.sigma_hat[2, 2], 0.0))))
        chi_sets = prediction.propagate_samples(chi_now, obs, tau, n, data.noise_samples)
        if scn.method == "mra":
            estimates = prediction.predicted_face_estimates(chi_sets, faces_tpl)
            problem = _build_problem(scn, x, estimates)
        else:
            problem = _build_sa_problem(scn, x, chi_sets, faces_tpl)
        rec = {"kind": "step", "tau": tau, "x": _r(x), "y": _r(meas[tau]) if tau > 0 else None,
               "chi_hat": _r(fs.chi_hat), "sigma_hat": _r(fs.sigma_hat)}
        try:
            try:
                sol = planner.plan(problem, scn.method, node_limit=scn.node_limit, gap_tol=scn.gap_tol,
                                   hint=shift_assignment(prev_z, n))
            except NodeLimitError as exc:
                if not (scn.accept_incumbent and exc.incumbent is not None):
                    raise
                sol = exc.incumbent
        except (InfeasibleError, NodeLimitError) as exc:
            rec["plan"] = None
            rec["error"] = type(exc).__name__
            if scn.policy == ABORT or prev_plan is None or tau == 0:
                records.append(rec)
                status = "infeasible"
                break
            u = prev_plan[0]
            prev_plan = prev_plan[1:] if len(prev_plan) > 1 else prev_plan
            rec["fallback"] = True
        else:
            plan_rec = sol.to_record()
            for key in ("wall_time",):
                plan_rec.pop(key, None)
            rec["plan"] = plan_rec
            rec["fallback"] = False
            if tau == 0:
                initial_cost = sol.objective
            u = sol.u_seq[0]
            prev_plan = sol.u_seq[1:]
            prev_z = sol.z_assignment
            log.debug("tau=%d objective=%.4f nodes=%d", tau, sol.objective, sol.solver_stats["nodes"])
        rec["u"] = _r(u)
        records.append(rec)
        sys = scn.ego_system(x)
        x = sys.a_mats[0] @ x + sys.b_mats[0] @ u
        xs.append(x)
        us.append(u)

    xs = np.array(xs)
    us = np.array(us).reshape(-1, scn.input_lb.size)
    steps = len(us)
    grown_l = obs.length + scn.ego_length
    grown_w = obs.width + scn.ego_width
    step_viol = prediction.inside_box(xs[1:steps + 1, :2], chi_true[1:steps + 1, :2], grown_l, grown_w)
    cl_cost = closed_loop_cost(scn, xs[1:], us) if steps == n else float("nan")

    fs0 = prediction.FilterState(mean0, cov0, prediction.POSTERIOR, 0)
    ol_std = [prediction.kf_predict(fs0, obs, 1, w_cov[0])]
    for t in range(2, n + 1):
        ol_std.append(prediction.kf_predict(ol_std[-1], obs, t, w_cov[t - 1]))
    ol_std = np.array([np.sqrt(max(f.sigma_hat[2, 2], 0.0)) for f in ol_std])

    return CcrhRun(records, xs, us, chi_true, cl_cost, initial_cost, status, bool(step_viol.any()),
                   step_viol, ol_std, np.array(post_std))


def ccrh_safety_estimate(runs):
    """Joint safety over independent runs; infeasible runs are counted separately.

    Returns (safe fraction over feasible runs, binomial stderr, n_feasible,
    n_infeasible).
    """
    feas = [r for r in runs if r.feasible]
    n_inf = len(runs) - len(feas)
    if not feas:
        return float("nan"), float("nan"), 0, n_inf
    safe = np.mean([not r.collided for r in feas])
    se = np.sqrt(max(safe * (1 - safe), 0.0) / len(feas))
    return float(safe), float(se), len(feas), n_inf


def merging_scenario(n_samples=1000, method="mra", policy=ABORT, horizon=25, ts=0.2,
                     lane_center=2.0, ego_y_bounds=(-3.0, 3.0), **kw):
    """The highway merging case: ego in the left lane, obstacle merging from the right."""
    init = stats.GaussianBelief(np.array([0.0, -2.0, 19.44, 0.0]), np.diag([0.0, 0.0, 1.23, 0.08]))
    wn = stats.GaussianBelief(np.zeros(4), np.diag([0.0, 0.0, 0.04, 0.001]))
    vn = stats.GaussianBelief(np.zeros(2), np.diag([1.0, 0.04]))
    obs = prediction.merging_car_model(ts, init, wn, vn, 4.0, 2.0, lane_center=lane_center, horizon=2 * horizon)
    big = 1e3
    return CcrhScenario(
        ts=ts, horizon=horizon, x0=np.array([0.0, 2.0, 19.44, 0.0]),
        input_lb=np.array([-10.0, -2.0]), input_ub=np.array([10.0, 2.0]),
        state_lb=np.array([-big, ego_y_bounds[0], -big, -big]),
        state_ub=np.array([big, ego_y_bounds[1], big, big]),
        stage_idx=(1, 2), stage_target=(lane_center, 19.44), input_weight=0.1,
        eps=0.05, beta=1e-3, n_samples=n_samples, obstacle=obs, ego_length=4.0, ego_width=2.0,
        method=method, policy=policy, **kw,
    )
