"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest -m slow -s tests/test_acceptance.py``. The closed-loop
criterion takes roughly half an hour on one core.
"""

import json
import time

import numpy as np
import pytest

import oracles
from ccplan import cli, concentration, config, evaluation, model, planner, prediction, stats
from ccplan.errors import InfeasibleError
from conftest import random_problem

pytestmark = pytest.mark.slow


def _report(capsys, num, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {num:>2}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def _mc_floor(level, reps):
    return level - 3 * np.sqrt(level * (1 - level) / reps)


def test_c01_quantiles(capsys):
    start = time.perf_counter()
    grid = np.linspace(0.001, 0.999, 50)
    err = {"norm": 0.0, "chi2": 0.0, "t": 0.0, "f": 0.0}
    for p in grid:
        err["norm"] = max(err["norm"], abs(stats.norm_inv_cdf(p) - oracles.norm_quantile(p)))
        ref = oracles.chi2_quantile(5, p)
        err["chi2"] = max(err["chi2"], abs(stats.chi2_quantile(5, p) - ref) / ref)
        ref = oracles.t_quantile(9, p)
        err["t"] = max(err["t"], abs(stats.student_t_quantile(9, p) - ref) / max(abs(ref), 1.0))
        ref = oracles.f_quantile(3, 20, p)
        err["f"] = max(err["f"], abs(stats.f_quantile(3, 20, p) - ref) / ref)
    secs = time.perf_counter() - start
    ok = err["norm"] < 1e-9 and err["chi2"] < 1e-9 and err["t"] < 1e-8 and err["f"] < 1e-8 and secs < 5
    _report(capsys, 1, ok, f"max errors {', '.join(f'{k} {v:.1e}' for k, v in err.items())}; {secs:.1f}s")


def _coverage_sets(rng, reps, n=3, n_s=200):
    cov = np.array([[1.0, 0.3, 0.0], [0.3, 0.5, 0.1], [0.0, 0.1, 2.0]])
    mu = np.array([0.5, -1.0, 2.0])
    draws = rng.standard_normal((reps, n_s, n)) @ stats.psd_sqrt(cov) + mu
    return mu, cov, draws


def test_c02_mean_coverage(capsys):
    start = time.perf_counter()
    beta, reps = 0.05, 10_000
    mu, _, draws = _coverage_sets(np.random.default_rng(20), reps)
    hits = 0
    for d in draws:
        est = stats.sample_moments(d)
        hits += np.linalg.norm(mu - est.mean_hat) <= concentration.mean_bound_r1(est, beta)
    frac, secs = hits / reps, time.perf_counter() - start
    floor = _mc_floor(1 - beta, reps)
    _report(capsys, 2, frac >= floor and secs < 30, f"coverage {frac:.4f} >= {floor:.4f}; {secs:.1f}s")


def test_c03_covariance_coverage(capsys):
    start = time.perf_counter()
    beta, reps = 0.05, 10_000
    rng = np.random.default_rng(30)
    _, cov, draws = _coverage_sets(rng, reps)
    x = rng.normal(size=3)
    r2 = concentration.cov_bound_r2(200, beta)
    hits = 0
    for d in draws:
        est = stats.sample_moments(d)
        hits += abs(x @ (cov - est.cov_hat) @ x) <= (x @ est.cov_hat @ x) * r2
    frac, secs = hits / reps, time.perf_counter() - start
    floor = _mc_floor(1 - beta, reps)
    _report(capsys, 3, frac >= floor and secs < 30, f"coverage {frac:.4f} >= {floor:.4f}; {secs:.1f}s")


def test_c04_scalar_pathology(capsys):
    start = time.perf_counter()
    mu, sigma, eps, beta, n_s, reps = 2.0, 0.5, 0.05, 0.05, 50, 10_000
    rng = np.random.default_rng(40)
    # the exact constraint holds iff x >= mu + z_{1-eps} sigma
    exact = mu + stats.norm_inv_cdf(1 - eps) * sigma
    naive_bad = robust_bad = 0
    for _ in range(reps):
        naive, robust = concentration.scalar_example_solutions(mu, sigma, eps, beta, n_s, rng)
        naive_bad += naive < exact
        robust_bad += robust < exact
    secs = time.perf_counter() - start
    p_naive, p_robust = naive_bad / reps, robust_bad / reps
    ceiling = beta + 3 * np.sqrt(beta * (1 - beta) / reps)
    ok = abs(p_naive - 0.5) <= 0.02 and p_robust <= ceiling and secs < 10
    _report(capsys, 4, ok, f"plug-in violates {p_naive:.4f} (0.50 +- 0.02), robust {p_robust:.4f} <= "
                           f"{ceiling:.4f}; {secs:.1f}s")


def test_c05_branch_and_bound_optimality(capsys):
    start = time.perf_counter()
    worst, checked, infeasible, mismatched = 0.0, 0, 0, []
    for seed in range(50):
        tpl = planner.assemble(random_problem(np.random.default_rng(1000 + seed)), "ema")
        best, _ = planner.enumerate_assignments(tpl)
        try:
            got = planner.solve_misocp(tpl).objective
        except InfeasibleError:
            got = np.inf
        if not np.isfinite(best):
            infeasible += 1
            if np.isfinite(got):
                mismatched.append(seed)
            continue
        checked += 1
        worst = max(worst, abs(got - best))
        if abs(got - best) > 1e-6:
            mismatched.append(seed)
    secs = time.perf_counter() - start
    ok = not mismatched and secs < 120
    _report(capsys, 5, ok, f"{checked} feasible + {infeasible} infeasible instances, max gap {worst:.1e}, "
                           f"mismatches {mismatched}; {secs:.1f}s")


def test_c06_allocation_equivalence(capsys):
    start = time.perf_counter()
    sys = model.lti_system(*model.single_integrator(1.0), 2, [0.0, 0.0], -1, 1)
    faces = [model.UncertainFace(t, 0, i, belief=stats.GaussianBelief(m, np.zeros((3, 3))))
             for t in (1, 2) for i, m in enumerate([np.array([1.0, 0.0, -0.5]), np.array([0.0, 1.0, -0.5])])]
    p = model.PlanningProblem(sys, faces, 0.05, model.QuadraticCost(), state_lb=[-5, -5], state_ub=[5, 5])
    same = model.improved_vs_full_equivalence_check(p, grid_points=9)
    secs = time.perf_counter() - start
    _report(capsys, 6, same and secs < 60, f"feasible sets equal: {same}; {secs:.1f}s")


def test_c07_open_loop_case_study(capsys):
    start = time.perf_counter()
    cfg = config.load("open_loop_s51").with_eval(n_instances=20, n_mc=10_000)
    reports, _ = evaluation.case_study_open_loop(cfg)
    secs = time.perf_counter() - start
    med = {m: float(np.median(r.violations)) for m, r in reports.items()}
    cost = {m: float(np.mean(r.costs)) for m, r in reports.items()}
    infeasible = {m: r.n_infeasible for m, r in reports.items()}
    mra_max = float(np.max(reports["mra"].violations))
    ok = (mra_max <= 0.05 and 0.005 <= med["mra"] <= 0.03 and 0.035 <= med["ema"] <= 0.05
          and med["sa"] <= 0.015 and cost["ema"] <= cost["mra"] <= cost["sa"] and secs < 900)
    _report(capsys, 7, ok, f"median violation ema {med['ema']:.4f} mra {med['mra']:.4f} sa {med['sa']:.4f}; "
                           f"mra max {mra_max:.4f}; mean cost ema {cost['ema']:.3f} mra {cost['mra']:.3f} "
                           f"sa {cost['sa']:.3f}; infeasible {infeasible}; {secs:.0f}s")


def test_c08_sample_count_sweep(capsys):
    start = time.perf_counter()
    cfg = config.load("open_loop_s51")
    rows = evaluation.sweep_sample_count(cfg, [100, 1000, 10_000, 100_000], n_instances=10)
    secs = time.perf_counter() - start
    get = {(r["method"], r["n_samples"]): r for r in rows}
    ns = [100, 1000, 10_000, 100_000]
    gap = [get["mra", n]["mean_cost"] - get["ema", n]["mean_cost"] for n in ns]
    sa = [get["sa", n]["mean_cost"] for n in ns]

    def spread(m):
        t = [get[m, n]["mean_time"] for n in ns]
        return max(t) / min(t)

    sa_t = [get["sa", n]["mean_time"] for n in ns]
    ok = (gap[-1] < gap[0] and sa[-1] > sa[0] and spread("mra") < 2 and spread("ema") < 2
          and sa_t[-1] > sa_t[0] and secs < 1800)
    _report(capsys, 8, ok, f"gap {' -> '.join(f'{g:.3f}' for g in gap)}; sa cost "
                           f"{' -> '.join(f'{c:.3f}' for c in sa)}; time spread mra {spread('mra'):.2f}x "
                           f"ema {spread('ema'):.2f}x; sa time {' -> '.join(f'{t:.2f}' for t in sa_t)}s; "
                           f"{secs:.0f}s")


def test_c09_closed_loop(capsys):
    start = time.perf_counter()
    cfg = config.load("closed_loop_s52")
    rep, _, _ = evaluation.case_study_closed_loop(cfg, n_runs=50)
    secs = time.perf_counter() - start
    safe, se, n_ok, n_bad = rep.safety()
    order = rep.cost_ordering()
    grows, plateau = evaluation.uncertainty_pattern(rep.open_loop_std, rep.closed_loop_std)
    floor = 0.95 - 3 * np.sqrt(0.95 * 0.05 / max(n_ok, 1))
    ok = n_ok > 0 and order >= 0.9 and safe >= floor and grows and plateau and secs < 1800
    _report(capsys, 9, ok, f"{n_ok} feasible / {n_bad} infeasible; cost ordering {order:.2f}; safety "
                           f"{safe:.3f} >= {floor:.3f}; open std grows {grows}, closed plateaus {plateau}; "
                           f"{secs:.0f}s")


def test_c10_kalman_suite(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(200):
        n, k = 4, 2
        e = np.eye(n) + 0.1 * rng.normal(size=(n, n))
        f, h = rng.normal(size=n), rng.normal(size=(k, n))
        a, b, c = rng.normal(size=(n, n)), rng.normal(size=(n, n)), rng.normal(size=(k, k))
        sig, q, r = a @ a.T + 0.1 * np.eye(n), 0.1 * b @ b.T, c @ c.T + 0.1 * np.eye(k)
        chi, y = rng.normal(size=n), rng.normal(size=k)
        m = prediction.ObstacleModel([e], [f], [h], None, None, None, [])
        prior = prediction.kf_predict(prediction.FilterState(chi, sig, prediction.POSTERIOR, 0), m, 1, q)
        post = prediction.kf_update(prior, m, y, r)
        ref_chi, ref_sig = oracles.kf_step_reference(chi, sig, e, f, q, h, r, y)
        worst = max(worst, np.abs(post.chi_hat - ref_chi).max(), np.abs(post.sigma_hat - ref_sig).max(),
                    np.abs(post.sigma_hat - prediction.joseph_update(prior, m, r)).max())
    m = prediction.ObstacleModel([np.eye(2)], [np.zeros(2)], [np.eye(2)], None, None, None, [])
    prior = prediction.FilterState(np.zeros(2), np.diag([1.0, 3.0]), prediction.PRIOR, 1)
    collapsed = prediction.kf_update(prior, m, np.array([2.0, -1.0]), np.zeros((2, 2)))
    collapse_ok = np.allclose(collapsed.chi_hat, [2.0, -1.0]) and np.allclose(collapsed.sigma_hat, 0.0)
    ignored = prediction.kf_update(prior, m, np.array([50.0, 50.0]), 1e12 * np.eye(2))
    identity_ok = np.allclose(ignored.chi_hat, 0.0, atol=1e-8) and np.allclose(ignored.sigma_hat, prior.sigma_hat)
    secs = time.perf_counter() - start
    ok = worst < 1e-8 and collapse_ok and identity_ok and secs < 5
    _report(capsys, 10, ok, f"Joseph/reference max error {worst:.1e}; zero-noise collapse {collapse_ok}; "
                            f"infinite-noise identity {identity_ok}; {secs:.1f}s")


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and "timing" not in p.relative_to(root).parts}


def test_c11_determinism(tmp_path, capsys):
    small_open = json.loads(config.load("open_loop_s51").dumps())
    small_open["eval"].update(n_instances=3, n_mc=1000)
    small_closed = json.loads(config.load("closed_loop_s52").dumps())
    small_closed["eval"].update(n_runs=2)
    (tmp_path / "open.json").write_text(json.dumps(small_open))
    (tmp_path / "closed.json").write_text(json.dumps(small_closed))
    commands = {
        "plan": lambda out: ["plan", "open_loop_s51", "--seed", "5", "--out", str(out / "plan.json")],
        "plan_sa": lambda out: ["plan", "open_loop_s51", "--method", "sa", "--out", str(out / "plan.json")],
        "ccrh": lambda out: ["ccrh", "closed_loop_s52", "--seed", "3", "--out", str(out / "run.jsonl")],
        "eval": lambda out: ["eval", str(tmp_path / "open.json"), "--seed", "2", "--out", str(out)],
        "sweep": lambda out: ["eval", str(tmp_path / "open.json"), "--sweep", "ns=100,1000", "--out", str(out)],
        "eval_closed": lambda out: ["eval", str(tmp_path / "closed.json"), "--out", str(out)],
    }
    differing = []
    for name, argv in commands.items():
        trees = []
        for rep in ("a", "b"):
            out = tmp_path / name / rep
            out.mkdir(parents=True)
            assert cli.main(argv(out)) == cli.EXIT_OK, name
            trees.append(_tree(out))
        if not trees[0] or trees[0] != trees[1]:
            differing.append(name)
    _report(capsys, 11, not differing, f"{len(commands)} commands re-run, differing outputs: {differing or 'none'}")
