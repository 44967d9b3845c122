"""Monte-Carlo safety checks and the two case studies.

Every task (instance, run) gets its own child of one root SeedSequence, so
results depend only on the root seed and the task index, never on how many
workers ran them. Wall-clock timings are kept apart from the reproducible
outputs.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import closed_loop, concentration, config, planner, stats
from .errors import DomainError, InfeasibleError, NodeLimitError

log = logging.getLogger(__name__)

MIN_MC = 100


def n_workers():
    """Worker processes, capped by CCPLAN_THREADS (default 1, i.e. in-process)."""
    try:
        return max(1, int(os.environ.get("CCPLAN_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, tasks, workers=None):
    workers = n_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def seed_manifest(root, n_tasks, streams):
    return {"root_seed": int(root), "n_tasks": int(n_tasks), "streams": list(streams),
            "scheme": "SeedSequence(root_seed).spawn(n_tasks)[k].spawn(len(streams))"}


def _task_rngs(root, k, n_streams):
    child = np.random.SeedSequence(root).spawn(k + 1)[k]
    return [np.random.default_rng(s) for s in child.spawn(n_streams)]


# -- Monte-Carlo violation ------------------------------------------------------

def mc_violation(x_traj, true_faces, n_mc, rng, face_states=None):
    """Fraction of realizations in which the trajectory enters an obstacle.

    Each face at each step is drawn independently from its true law; the
    trajectory violates when, for some (t, j), all faces of obstacle j are
    non-positive at x_t. Returns (probability, binomial standard error).
    """
    if n_mc < MIN_MC:
        raise DomainError(f"n_mc must be at least {MIN_MC}, got {n_mc}")
    x_traj = np.asarray(x_traj, float)
    if face_states is not None:
        x_traj = x_traj[:, list(face_states)]
    groups = {}
    for f in sorted(true_faces, key=lambda f: f.key):
        groups.setdefault((f.t, f.j), []).append(f)
    hit = np.zeros(n_mc, bool)
    for (t, _), faces in groups.items():
        xt = np.append(x_traj[t], 1.0)
        inside = np.ones(n_mc, bool)
        for f in faces:
            d = stats.draw_array(f.belief, rng, n_mc)
            inside &= d @ xt <= 0.0
        hit |= inside
    p = float(hit.mean())
    return p, float(np.sqrt(p * (1.0 - p) / n_mc))


# -- reports --------------------------------------------------------------------

def _quartiles(v):
    v = np.asarray([x for x in v if np.isfinite(x)], float)
    if v.size == 0:
        return {"mean": None, "median": None, "q1": None, "q3": None}
    return {"mean": float(v.mean()), "median": float(np.median(v)),
            "q1": float(np.quantile(v, 0.25)), "q3": float(np.quantile(v, 0.75))}


@dataclass
class EvalReport:
    """Per-method summary over independent instances."""

    method: str
    rows: list
    n_mc: int
    seeds: dict
    config_digest: str = ""

    @property
    def feasible_rows(self):
        return [r for r in self.rows if r["status"] == "ok"]

    @property
    def n_instances(self):
        return len(self.rows)

    @property
    def n_infeasible(self):
        return self.n_instances - len(self.feasible_rows)

    @property
    def violations(self):
        return np.array([r["violation"] for r in self.feasible_rows], float)

    @property
    def costs(self):
        return np.array([r["cost"] for r in self.feasible_rows], float)

    @property
    def solver_time(self):
        t = [r["solve_time"] for r in self.feasible_rows]
        return float(np.mean(t)) if t else float("nan")

    def summary(self):
        """Reproducible summary (no timings)."""
        v = self.violations
        se = [r["violation_stderr"] for r in self.feasible_rows]
        return {
            "method": self.method,
            "n_instances": self.n_instances,
            "n_infeasible": self.n_infeasible,
            "n_mc": self.n_mc,
            "violation": _quartiles(v),
            "violation_stderr_max": float(max(se)) if se else None,
            "violation_pooled": float(v.mean()) if v.size else None,
            "violation_pooled_stderr": float(np.sqrt(np.mean(v) * (1 - np.mean(v)) / (v.size * self.n_mc)))
            if v.size else None,
            "cost": _quartiles(self.costs),
        }


# -- open-loop case study ---------------------------------------------------------

def _solve_method(problem, method, cfg):
    s = cfg["solver"]
    start = time.perf_counter()
    sol = planner.plan(problem, method, node_limit=s["node_limit"], gap_tol=s["gap_tol"])
    r = cfg["risk"]
    if r["redistribute"] and method in ("mra", "ema") and r["redistribute_iters"] > 0:
        sol = planner.redistribute_risk(problem, sol, max_iters=r["redistribute_iters"], tol=r["redistribute_tol"],
                                        node_limit=s["node_limit"], gap_tol=s["gap_tol"])
        sol.solver_stats["solve_time"] = time.perf_counter() - start
    return sol


def _open_loop_task(args):
    cfg_data, methods, k, n_mc, n_samples, redistribute = args
    cfg = config.validate(cfg_data)
    if redistribute is not None:
        cfg = config.validate({**cfg.data, "risk": {**cfg.data["risk"], "redistribute": redistribute}})
    # one MC stream per method, so adding a method leaves the others unchanged
    draw_rng, *mc_rngs = _task_rngs(cfg["eval"]["seed"], k, 1 + len(planner.METHODS))
    inst = config.open_loop_instance(cfg, draw_rng, n_samples)
    out = {}
    for m in methods:
        if m not in inst.problems:
            raise DomainError(f"method {m} needs exact moments, which this scenario does not provide")
        problem = inst.problems[m]
        row = {"instance": k, "method": m}
        try:
            sol = _solve_method(problem, m, cfg)
        except (InfeasibleError, NodeLimitError) as exc:
            row.update(status="infeasible", error=type(exc).__name__, cost=float("nan"), violation=float("nan"),
                       violation_stderr=float("nan"), solve_time=float("nan"), nodes=0)
            out[m] = (row, None)
            continue
        row.update(status="ok", cost=sol.objective, nodes=sol.solver_stats["nodes"],
                   solve_time=sol.solver_stats["solve_time"],
                   charged_risk=planner.charged_risk(sol.risk, problem))
        if inst.truth is not None:
            p, se = mc_violation(sol.x_traj, inst.truth, n_mc, mc_rngs[planner.METHODS.index(m)],
                                 problem.face_states)
        else:
            p, se = float("nan"), float("nan")
        row.update(violation=p, violation_stderr=se)
        out[m] = (row, sol.x_traj.tolist())
    return out


def case_study_open_loop(cfg, n_instances=None, n_mc=None, methods=planner.METHODS, n_samples=None,
                         redistribute=None, workers=None):
    """Plan every instance with every method and measure the true violation.

    Returns ({method: EvalReport}, trajectories of instance 0 per method).
    """
    cfg = cfg.with_eval(n_instances=n_instances, n_mc=n_mc)
    n_inst, n_mc = cfg["eval"]["n_instances"], cfg["eval"]["n_mc"]
    tasks = [(cfg.data, tuple(methods), k, n_mc, n_samples, redistribute) for k in range(n_inst)]
    results = _map(_open_loop_task, tasks, workers)
    seeds = seed_manifest(cfg["eval"]["seed"], n_inst, ["samples"] + [f"monte_carlo_{m}" for m in planner.METHODS])
    reports = {m: EvalReport(m, [r[m][0] for r in results], n_mc, seeds, cfg.digest()) for m in methods}
    trajectories = {m: results[0][m][1] for m in methods} if results else {}
    return reports, trajectories


def sweep_sample_count(cfg, ns_grid=None, n_instances=10, methods=planner.METHODS, workers=None):
    """Mean cost and solve time per sample count (no risk redistribution).

    Returns rows {n_samples, method, mean_cost, mean_time, n_instances, n_infeasible}.
    """
    ns_grid = list(cfg["eval"]["sweep"] if ns_grid is None else ns_grid)
    if ns_grid != sorted(ns_grid):
        raise DomainError("the sample-count grid must be ascending")
    cfg = cfg.with_eval(n_instances=n_instances)
    rows = []
    for ns in ns_grid:
        tasks = [(cfg.data, tuple(methods), k, MIN_MC, ns, False) for k in range(n_instances)]
        results = _map(_sweep_task, tasks, workers)
        for m in methods:
            ok = [r[m] for r in results if r[m]["status"] == "ok"]
            rows.append({
                "n_samples": ns, "method": m, "n_instances": n_instances,
                "n_infeasible": n_instances - len(ok),
                "mean_cost": float(np.mean([r["cost"] for r in ok])) if ok else float("nan"),
                "mean_time": float(np.mean([r["solve_time"] for r in ok])) if ok else float("nan"),
                "n_constraints": int(np.mean([r["n_constraints"] for r in ok])) if ok else 0,
            })
    return rows


def _sweep_task(args):
    cfg_data, methods, k, _, ns, _ = args
    cfg = config.validate(cfg_data)
    draw_rng, = _task_rngs(cfg["eval"]["seed"], k, 1)
    inst = config.open_loop_instance(cfg, draw_rng, ns)
    out = {}
    s = cfg["solver"]
    for m in methods:
        try:
            sol = planner.plan(inst.problems[m], m, node_limit=s["node_limit"], gap_tol=s["gap_tol"])
        except (InfeasibleError, NodeLimitError):
            out[m] = {"status": "infeasible"}
            continue
        st = sol.solver_stats
        out[m] = {"status": "ok", "cost": sol.objective, "solve_time": st["solve_time"],
                  "n_constraints": st["n_scenario_rows"] if m == "sa" else st["n_constraints"]}
    return out


# -- closed-loop case study --------------------------------------------------------

@dataclass
class ClosedLoopReport:
    rows: list
    seeds: dict
    config_digest: str = ""
    open_loop_std: list = field(default_factory=list)
    closed_loop_std: list = field(default_factory=list)

    @property
    def feasible_rows(self):
        return [r for r in self.rows if r["status"] == "ok"]

    def safety(self):
        """(safe fraction over feasible runs, stderr, n_feasible, n_infeasible)."""
        feas = self.feasible_rows
        n_inf = len(self.rows) - len(feas)
        if not feas:
            return float("nan"), float("nan"), 0, n_inf
        safe = float(np.mean([not r["collided"] for r in feas]))
        return safe, float(np.sqrt(safe * (1 - safe) / len(feas))), len(feas), n_inf

    def cost_ordering(self):
        """Fraction of feasible runs whose closed-loop cost beats the first plan."""
        feas = self.feasible_rows
        if not feas:
            return float("nan")
        return float(np.mean([r["closed_loop_cost"] < r["initial_open_loop_cost"] for r in feas]))

    def summary(self):
        safe, se, n_ok, n_inf = self.safety()
        feas = self.feasible_rows
        return {
            "n_runs": len(self.rows), "n_feasible": n_ok, "n_infeasible": n_inf,
            "safety": safe, "safety_stderr": se,
            "cost_ordering_fraction": self.cost_ordering(),
            "closed_loop_cost": _quartiles([r["closed_loop_cost"] for r in feas]),
            "initial_open_loop_cost": _quartiles([r["initial_open_loop_cost"] for r in feas]),
            "cost_ratio": _quartiles([r["closed_loop_cost"] / r["initial_open_loop_cost"] for r in feas
                                      if r["initial_open_loop_cost"] > 0]),
            "node_limited_steps": int(sum(r["node_limited_steps"] for r in self.rows)),
        }


def _closed_loop_task(args):
    cfg_data, k, method = args
    cfg = config.validate(cfg_data)
    scn = config.ccrh_scenario(cfg, method)
    seed = np.random.SeedSequence(cfg["eval"]["seed"]).spawn(k + 1)[k]
    start = time.perf_counter()
    run = closed_loop.run_ccrh(scn, seed)
    elapsed = time.perf_counter() - start
    limited = sum(1 for r in run.records if r.get("plan") and r["plan"]["status"] == "node_limit")
    row = {"run": k, "status": run.status, "collided": bool(run.collided),
           "closed_loop_cost": float(run.closed_loop_cost),
           "initial_open_loop_cost": float(run.initial_open_loop_cost) if run.initial_open_loop_cost is not None
           else float("nan"),
           "node_limited_steps": limited}
    return row, run, elapsed


def case_study_closed_loop(cfg, n_runs=None, method="mra", workers=None):
    """Independent receding-horizon runs; returns (report, run 0, per-run seconds)."""
    cfg = cfg.with_eval(n_runs=n_runs)
    n = cfg["eval"]["n_runs"]
    results = _map(_closed_loop_task, [(cfg.data, k, method) for k in range(n)], workers)
    rows = [r[0] for r in results]
    runs = [r[1] for r in results]
    rep = ClosedLoopReport(rows, seed_manifest(cfg["eval"]["seed"], n, ["world", "planner"]), cfg.digest())
    rep.open_loop_std = np.mean([r.open_loop_velocity_std for r in runs], axis=0).tolist()
    rep.closed_loop_std = np.mean([r.closed_loop_velocity_std for r in runs if r.closed_loop_velocity_std.size
                                   == runs[0].closed_loop_velocity_std.size], axis=0).tolist()
    return rep, runs[0], [r[2] for r in results]


def uncertainty_pattern(open_std, closed_std, plateau_rtol=0.1):
    """Open-loop std strictly increasing; closed-loop std settled over its second half."""
    o = np.asarray(open_std, float)
    c = np.asarray(closed_std, float)
    grows = bool(o.size > 1 and np.all(np.diff(o) > 0))
    tail = c[c.size // 2:]
    plateau = bool(tail.size > 0 and tail.max() - tail.min() <= plateau_rtol * tail.mean()
                   and c.max() <= c[0] * (1 + plateau_rtol))
    return grows, plateau


# -- concentration curves -------------------------------------------------------------

def concentration_curves(ns_grid=(10, 30, 100, 300, 1000, 3000, 10_000, 30_000, 100_000),
                         beta_grid=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7), dim=3, n_s_fixed=1000,
                         beta_fixed=1e-3):
    """r1 (unit sample covariance) and r2 over sample counts and confidence levels."""

    def row(n_s, beta):
        est = stats.MomentEstimate(np.zeros(dim), np.eye(dim), n_s)
        return {"n_samples": n_s, "beta": beta, "r1": concentration.mean_bound_r1(est, beta),
                "r2": concentration.cov_bound_r2(n_s, beta)}

    by_ns = [row(n, beta_fixed) for n in ns_grid if n > dim]
    by_beta = [row(n_s_fixed, b) for b in beta_grid]
    return by_ns, by_beta


# -- output files ------------------------------------------------------------------------

def _header(cfg, seeds):
    return {"config_digest": cfg.digest(), "config_name": cfg["name"], "seed_manifest": seeds}


def write_csv(path, rows, header):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys()) if rows else []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with path.open("w", newline="") as fh:
        fh.write(f"# {json.dumps(header, sort_keys=True)}\n")
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in cols})


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 12))
    return v


def write_json(path, obj, header):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**header, **obj}, sort_keys=True, indent=2, default=float) + "\n")


def write_open_loop(out, cfg, reports, trajectories):
    out = Path(out)
    seeds = next(iter(reports.values())).seeds if reports else {}
    head = _header(cfg, seeds)
    rows, timing = [], []
    for rep in reports.values():
        for r in rep.rows:
            rows.append({k: v for k, v in r.items() if k != "solve_time"})
            timing.append({"instance": r["instance"], "method": r["method"], "solve_time": r["solve_time"]})
    write_csv(out / "open_loop_instances.csv", rows, head)
    write_json(out / "open_loop_summary.json", {"reports": [rep.summary() for rep in reports.values()]}, head)
    write_json(out / "open_loop_trajectories.json", {"instance": 0, "trajectories": trajectories}, head)
    write_csv(out / "timing" / "open_loop_solve_times.csv", timing, head)


def write_sweep(out, cfg, rows):
    out = Path(out)
    head = _header(cfg, seed_manifest(cfg["eval"]["seed"], rows[0]["n_instances"] if rows else 0, ["samples"]))
    write_csv(out / "sweep_costs.csv", [{k: r[k] for k in ("n_samples", "method", "n_instances", "n_infeasible",
                                                           "mean_cost", "n_constraints")} for r in rows], head)
    write_csv(out / "timing" / "sweep_solve_times.csv",
              [{k: r[k] for k in ("n_samples", "method", "mean_time")} for r in rows], head)


def write_closed_loop(out, cfg, report, run, seconds):
    out = Path(out)
    head = _header(cfg, report.seeds)
    write_csv(out / "closed_loop_runs.csv", report.rows, head)
    write_json(out / "closed_loop_summary.json", {"summary": report.summary()}, head)
    grows, plateau = uncertainty_pattern(report.open_loop_std, report.closed_loop_std)
    n = max(len(report.open_loop_std), len(report.closed_loop_std))
    unc = [{"lead_or_step": k + 1,
            "open_loop_std": report.open_loop_std[k] if k < len(report.open_loop_std) else "",
            "closed_loop_std": report.closed_loop_std[k] if k < len(report.closed_loop_std) else ""}
           for k in range(n)]
    write_csv(out / "closed_loop_velocity_std.csv", unc, {**head, "open_grows": grows, "closed_plateaus": plateau})
    (out / "closed_loop_run0.jsonl").write_text(json.dumps({"kind": "header", **head}, sort_keys=True) + "\n"
                                                + run.dumps())
    write_csv(out / "timing" / "closed_loop_run_times.csv",
              [{"run": k, "seconds": s} for k, s in enumerate(seconds)], head)


def write_concentration(out, cfg=None):
    out = Path(out)
    by_ns, by_beta = concentration_curves()
    head = {"config_digest": cfg.digest() if cfg else None, "seed_manifest": None}
    write_csv(out / "concentration_vs_samples.csv", by_ns, head)
    write_csv(out / "concentration_vs_beta.csv", by_beta, head)
