import numpy as np
import pytest

from ccplan import model, planner, stats
from ccplan.errors import InfeasibleError, NodeLimitError
from conftest import corridor_problem, random_problem


def _active_ok(problem, sol, method):
    groups = problem.groups()
    assert set(sol.z_assignment) == set(groups)
    for key, faces in groups.items():
        face = next(f for f in faces if f.i == sol.z_assignment[key])
        xt = problem.augmented(sol.x_traj[key[0]])
        if method == "sa":
            assert np.all(face.samples.samples @ xt >= -1e-6)
        else:
            hs = face.halfspace(method, sol.risk[face.key], problem.beta)
            assert hs.slack(xt) >= -1e-6


@pytest.mark.parametrize("method", ["ema", "mra", "sa"])
def test_corridor_plan_feasible_and_consistent(corridor, method):
    sol = planner.plan(corridor, method)
    assert np.allclose(sol.x_traj, model.rollout(corridor.system, sol.u_seq), atol=1e-9)
    assert np.all(np.abs(sol.u_seq) <= 1 + 1e-7)
    _active_ok(corridor, sol, method)


def test_corridor_branch_and_bound_matches_enumeration(corridor):
    sol = planner.plan(corridor, "ema")
    best, _ = planner.enumerate_assignments(planner.assemble(corridor, "ema"))
    assert sol.objective == pytest.approx(best, abs=1e-6)
    assert sol.objective == pytest.approx(3.16310, abs=1e-4)


@pytest.mark.parametrize("seed", range(8))
def test_random_instances_match_enumeration(seed):
    p = random_problem(np.random.default_rng(seed))
    tpl = planner.assemble(p, "ema")
    best, _ = planner.enumerate_assignments(tpl)
    if not np.isfinite(best):
        with pytest.raises(InfeasibleError):
            planner.solve_misocp(tpl)
        return
    sol = planner.solve_misocp(tpl)
    assert sol.objective == pytest.approx(best, abs=1e-6)


def test_method_cost_ordering_on_corridor(corridor):
    cost = {m: planner.plan(corridor, m).objective for m in planner.METHODS}
    assert cost["ema"] <= cost["mra"] <= cost["sa"]


def test_mra_inside_plug_in():
    # with the same estimates the robust program can only cost more
    p = corridor_problem(np.random.default_rng(3), n_samples=300)
    plug = [model.UncertainFace(f.t, f.j, f.i, belief=stats.GaussianBelief(
        f.moment_estimate().mean_hat, f.moment_estimate().cov_hat)) for f in p.faces]
    q = model.PlanningProblem(p.system, plug, p.eps, p.cost, state_lb=p.state_lb, state_ub=p.state_ub)
    assert planner.plan(p, "mra").objective >= planner.plan(q, "ema").objective - 1e-7


def test_scenario_rows_and_hull_reduction():
    p = corridor_problem(np.random.default_rng(0))
    sol = planner.plan(p, "sa")
    assert sol.solver_stats["n_scenario_rows"] == 2 * 10 * 1259
    small = corridor_problem(np.random.default_rng(1), n_samples=200)
    full = planner.plan(small, "sa", sa_reduce=False)
    reduced = planner.plan(small, "sa", sa_reduce=True)
    assert full.objective == pytest.approx(reduced.objective, abs=1e-6)
    assert reduced.solver_stats["n_constraints"] < full.solver_stats["n_constraints"]


def test_sa_with_more_samples_costs_no_less():
    rng = np.random.default_rng(5)
    p = corridor_problem(rng, n_samples=400)
    sub = [model.UncertainFace(f.t, f.j, f.i, belief=f.belief, samples=stats.SampleSet(f.samples.samples[:100]))
           for f in p.faces]
    q = model.PlanningProblem(p.system, sub, p.eps, p.cost, state_lb=p.state_lb, state_ub=p.state_ub)
    assert planner.plan(p, "sa").objective >= planner.plan(q, "sa").objective - 1e-7


def test_zero_covariance_is_deterministic_disjunction():
    sys = model.lti_system(*model.single_integrator(1.0), 1, [0.0, 0.0], -1, 1)
    face = model.UncertainFace(1, 0, 0, belief=stats.GaussianBelief([-1.0, 0.0, 0.5], np.zeros((3, 3))))
    p = model.PlanningProblem(sys, [face], 0.05, model.QuadraticCost((0, 1), (1.0, 0.0)), state_lb=[-5, -5],
                              state_ub=[5, 5])
    sol = planner.plan(p, "ema")
    # x_1 <= 0.5 is the only constraint
    assert sol.x_traj[1, 0] == pytest.approx(0.5, abs=1e-6)


def test_single_face_groups_need_one_relaxation():
    sys = model.lti_system(*model.single_integrator(1.0), 3, [0.0, 0.0], -1, 1)
    faces = [model.UncertainFace(t, 0, 0, belief=stats.GaussianBelief([1.0, 0.0, 5.0], 1e-3 * np.eye(3)))
             for t in (1, 2, 3)]
    p = model.PlanningProblem(sys, faces, 0.05, model.QuadraticCost((0, 1), (2.0, 2.0)), state_lb=[-5, -5],
                              state_ub=[5, 5])
    sol = planner.plan(p, "ema")
    assert sol.solver_stats["relaxations"] == 1
    assert all(i == 0 for i in sol.z_assignment.values())


def test_covering_obstacle_is_infeasible():
    sys = model.lti_system(*model.single_integrator(1.0), 2, [0.0, 0.0], -1, 1)
    faces = [model.UncertainFace(t, 0, i, belief=stats.GaussianBelief(m, 1e-3 * np.eye(3)))
             for t in (1, 2) for i, m in enumerate([np.array([1.0, 0.0, -10.0]), np.array([-1.0, 0.0, -10.0])])]
    p = model.PlanningProblem(sys, faces, 0.05, model.QuadraticCost((0, 1), (1.0, 1.0)), state_lb=[-5, -5],
                              state_ub=[5, 5])
    with pytest.raises(InfeasibleError):
        planner.plan(p, "ema")


def test_node_limit_carries_incumbent():
    p = random_problem(np.random.default_rng(2), horizon=4, n_obs=1, n_faces=4)
    try:
        planner.plan(p, "ema", node_limit=1)
    except NodeLimitError as exc:
        if exc.incumbent is not None:
            assert exc.incumbent.status == "node_limit"
            _active_ok(p, exc.incumbent, "ema")
    except InfeasibleError:
        pass


def test_redistribution_lowers_cost_and_respects_budget(corridor):
    for method in ("ema", "mra"):
        sol = planner.plan(corridor, method)
        red = planner.redistribute_risk(corridor, sol, tol=5e-3)
        assert red.objective <= sol.objective + 1e-9
        assert planner.charged_risk(red.risk, corridor) <= corridor.eps + 1e-12
        assert all(0 < e < 0.5 for e in red.risk.per_constraint.values())
        _active_ok(corridor, red, method)


def test_redistribution_no_binding_groups_is_identity():
    sys = model.lti_system(*model.single_integrator(1.0), 2, [0.0, 0.0], -1, 1)
    faces = [model.UncertainFace(t, 0, 0, belief=stats.GaussianBelief([1.0, 0.0, 50.0], 1e-3 * np.eye(3)))
             for t in (1, 2)]
    p = model.PlanningProblem(sys, faces, 0.05, model.QuadraticCost((0, 1), (1.0, 1.0)), state_lb=[-5, -5],
                              state_ub=[5, 5])
    sol = planner.plan(p, "ema")
    red = planner.redistribute_risk(p, sol)
    assert red.objective == pytest.approx(sol.objective)
    assert red.risk.per_constraint == sol.risk.per_constraint


def test_plan_record_is_json_ready(corridor):
    import json
    rec = planner.plan(corridor, "ema").to_record()
    json.dumps(rec)
    assert rec["method"] == "ema" and len(rec["z"]) == 10
