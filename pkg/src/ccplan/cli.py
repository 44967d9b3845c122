"""Command-line entry point: ``ccplan plan|ccrh|eval CONFIG``.

Exit codes: 0 success, 1 usage or configuration error, 2 infeasible.
CCPLAN_THREADS caps the worker processes used by ``eval``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config, evaluation, planner
from .errors import CcplanError, ConfigError, InfeasibleError, NodeLimitError

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2

log = logging.getLogger("ccplan")


def _parser():
    p = argparse.ArgumentParser(prog="ccplan", description="Chance-constrained planning with sampled obstacle moments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pl = sub.add_parser("plan", help="solve one open-loop instance")
    pl.add_argument("config", help="config file or bundled name (open_loop_s51)")
    pl.add_argument("--method", choices=planner.METHODS, default="mra")
    pl.add_argument("--seed", type=int, default=None)
    pl.add_argument("--out", default="plan.json")

    cc = sub.add_parser("ccrh", help="one receding-horizon run")
    cc.add_argument("config", help="config file or bundled name (closed_loop_s52)")
    cc.add_argument("--method", choices=("mra", "sa"), default="mra")
    cc.add_argument("--seed", type=int, default=None)
    cc.add_argument("--out", default="run.jsonl")

    ev = sub.add_parser("eval", help="case-study evaluation")
    ev.add_argument("config")
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--out", default="ccplan_out")
    ev.add_argument("--full-scale", action="store_true", help="large sample sizes instead of desk scale")
    ev.add_argument("--sweep", default=None, metavar="ns=N1,N2,...", help="sample-count sweep instead of the case study")
    ev.add_argument("--method", choices=planner.METHODS, action="append", default=None)
    return p


def _parse_sweep(text):
    key, _, vals = text.partition("=")
    if key.strip() != "ns" or not vals:
        raise ConfigError("--sweep expects ns=N1,N2,...")
    try:
        grid = [int(v) for v in vals.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--sweep values must be integers: {vals!r}") from None
    if not grid or any(n < 2 for n in grid):
        raise ConfigError("--sweep needs sample counts >= 2")
    return sorted(grid)


def _with_seed(cfg, seed):
    return cfg if seed is None else cfg.with_eval(seed=seed)


def _header(cfg, seed):
    return {"config_digest": cfg.digest(), "config_name": cfg["name"], "seed": int(seed)}


def cmd_plan(args):
    cfg = _with_seed(config.load(args.config), args.seed)
    if cfg["kind"] != "open_loop":
        raise ConfigError("plan takes an open-loop config")
    seed = cfg["eval"]["seed"]
    # the same draw as instance 0 of ``eval``
    draw_rng = evaluation._task_rngs(seed, 0, 1 + len(planner.METHODS))[0]
    inst = config.open_loop_instance(cfg, draw_rng)
    if args.method not in inst.problems:
        raise ConfigError(f"method {args.method} needs exact obstacle moments")
    try:
        sol = evaluation._solve_method(inst.problems[args.method], args.method, cfg)
    except InfeasibleError as exc:
        log.error("infeasible: %s", exc)
        return EXIT_INFEASIBLE
    rec = sol.to_record()
    rec.pop("wall_time", None)
    out = {**_header(cfg, seed), "seed_manifest": evaluation.seed_manifest(seed, 1, ["samples"]), "solution": rec}
    Path(args.out).write_text(json.dumps(out, sort_keys=True, indent=2) + "\n")
    print(f"{args.method}: objective {sol.objective:.6f} ({sol.solver_stats['nodes']} nodes) -> {args.out}")
    return EXIT_OK


def cmd_ccrh(args):
    cfg = _with_seed(config.load(args.config), args.seed)
    if cfg["kind"] != "closed_loop":
        raise ConfigError("ccrh takes a closed-loop config")
    seed = cfg["eval"]["seed"]
    from . import closed_loop

    run = closed_loop.run_ccrh(config.ccrh_scenario(cfg, args.method), seed)
    head = {"kind": "header", **_header(cfg, seed),
            "seed_manifest": {"seed": int(seed), "scheme": "SeedSequence(seed).spawn(2) -> (world, planner)"}}
    Path(args.out).write_text(json.dumps(head, sort_keys=True) + "\n" + run.dumps())
    print(f"status {run.status}; closed-loop cost {run.closed_loop_cost:.4f}; "
          f"first plan {run.initial_open_loop_cost if run.initial_open_loop_cost is not None else float('nan'):.4f}; "
          f"collided {run.collided} -> {args.out}")
    return EXIT_OK if run.feasible else EXIT_INFEASIBLE


def cmd_eval(args):
    cfg = _with_seed(config.load(args.config), args.seed)
    if args.full_scale:
        cfg = cfg.with_eval(**config.FULL_SCALE)
    out = Path(args.out)
    if cfg["kind"] == "closed_loop":
        if args.sweep:
            raise ConfigError("--sweep applies to open-loop configs")
        rep, run, secs = evaluation.case_study_closed_loop(cfg)
        evaluation.write_closed_loop(out, cfg, rep, run, secs)
        print(json.dumps(rep.summary(), indent=2, sort_keys=True))
        return EXIT_OK
    methods = tuple(args.method) if args.method else planner.METHODS
    if args.sweep:
        rows = evaluation.sweep_sample_count(cfg, _parse_sweep(args.sweep),
                                             n_instances=10 if not args.full_scale else 100, methods=methods)
        evaluation.write_sweep(out, cfg, rows)
        for r in rows:
            print(f"N_s={r['n_samples']:>7} {r['method']}: cost {r['mean_cost']:.4f} time {r['mean_time']:.3f}s")
        return EXIT_OK
    reports, traj = evaluation.case_study_open_loop(cfg, methods=methods)
    evaluation.write_open_loop(out, cfg, reports, traj)
    evaluation.write_concentration(out, cfg)
    print(json.dumps([r.summary() for r in reports.values()], indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = {"plan": cmd_plan, "ccrh": cmd_ccrh, "eval": cmd_eval}[args.command]
    try:
        return cmd(args)
    except ConfigError as exc:
        print(f"ccplan: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except NodeLimitError as exc:
        print(f"ccplan: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except CcplanError as exc:
        print(f"ccplan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
