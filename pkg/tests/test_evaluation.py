import csv
import json

import numpy as np
import pytest

from ccplan import config, evaluation, model, stats
from ccplan.errors import DomainError


def _box_faces(t, lo, hi, cov=0.0):
    """Axis-aligned box [lo, hi]^2 as four faces at step t (x in the box iff all faces <= 0)."""
    means = [[1.0, 0.0, -hi], [-1.0, 0.0, lo], [0.0, 1.0, -hi], [0.0, -1.0, lo]]
    return [model.UncertainFace(t, 0, i, belief=stats.GaussianBelief(m, cov * np.eye(3)))
            for i, m in enumerate(means)]


def test_far_trajectory_never_violates():
    x = np.array([[10.0, 10.0], [11.0, 11.0]])
    p, se = evaluation.mc_violation(x, _box_faces(1, 0.0, 1.0, 1e-3), 5000, np.random.default_rng(0))
    assert p == 0.0 and se == 0.0


def test_inside_deterministic_box_always_violates():
    x = np.array([[0.0, 0.0], [0.5, 0.5]])
    p, _ = evaluation.mc_violation(x, _box_faces(1, 0.0, 1.0), 1000, np.random.default_rng(0))
    assert p == 1.0


def test_single_face_on_mean_boundary_is_half():
    # the face value at x is N(0, 0.01), so it is non-positive half the time
    face = model.UncertainFace(1, 0, 0, belief=stats.GaussianBelief([1.0, 0.0, -2.0], 0.01 * np.eye(3)))
    x = np.array([[0.0, 0.0], [2.0, 0.0]])
    n = 20_000
    p, se = evaluation.mc_violation(x, [face], n, np.random.default_rng(1))
    assert abs(p - 0.5) <= 3 * np.sqrt(0.25 / n)
    assert se == pytest.approx(np.sqrt(p * (1 - p) / n))


def test_union_over_steps():
    # two independent half-probability events give 3/4
    faces = [model.UncertainFace(t, 0, 0, belief=stats.GaussianBelief([1.0, 0.0, -2.0], 0.01 * np.eye(3)))
             for t in (1, 2)]
    x = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 0.0]])
    n = 20_000
    p, _ = evaluation.mc_violation(x, faces, n, np.random.default_rng(2))
    assert abs(p - 0.75) <= 3 * np.sqrt(0.75 * 0.25 / n)


def test_face_states_select_position():
    face = model.UncertainFace(1, 0, 0, belief=stats.GaussianBelief([1.0, 0.0, -2.0], np.zeros((3, 3))))
    x = np.array([[0.0, 9.0, 0.0, 9.0], [1.0, 9.0, 0.0, 9.0]])
    p, _ = evaluation.mc_violation(x, [face], 200, np.random.default_rng(0), face_states=[0, 2])
    assert p == 1.0


def test_small_mc_rejected_and_empty_obstacles_safe():
    x = np.zeros((2, 2))
    with pytest.raises(DomainError):
        evaluation.mc_violation(x, [], 99, np.random.default_rng(0))
    assert evaluation.mc_violation(x, [], 100, np.random.default_rng(0)) == (0.0, 0.0)


def test_same_seed_same_draws():
    faces = _box_faces(1, 0.0, 1.0, 0.05)
    x = np.array([[0.0, 0.0], [0.9, 0.9]])
    a = evaluation.mc_violation(x, faces, 1000, np.random.default_rng(4))
    b = evaluation.mc_violation(x, faces, 1000, np.random.default_rng(4))
    assert a == b


def test_report_summary_fields():
    rows = [{"status": "ok", "violation": v, "violation_stderr": 0.001, "cost": c, "solve_time": 0.1}
            for v, c in [(0.01, 1.0), (0.02, 2.0), (0.03, 3.0)]]
    rows.append({"status": "infeasible", "violation": float("nan"), "violation_stderr": float("nan"),
                 "cost": float("nan"), "solve_time": float("nan")})
    rep = evaluation.EvalReport("mra", rows, 1000, {})
    s = rep.summary()
    assert s["n_instances"] == 4 and s["n_infeasible"] == 1
    assert s["violation"]["median"] == pytest.approx(0.02)
    assert s["cost"]["mean"] == pytest.approx(2.0)
    assert s["violation_pooled_stderr"] == pytest.approx(np.sqrt(0.02 * 0.98 / 3000))
    json.dumps(s)


def test_small_case_study_and_writers(tmp_path):
    cfg = config.load("open_loop_s51").with_eval(seed=3)
    cfg = config.validate({**cfg.data, "system": {**cfg.data["system"], "horizon": 4},
                           "risk": {**cfg.data["risk"], "redistribute": False}})
    cfg = cfg.with_eval(n_instances=2, n_mc=200)
    reports, traj = evaluation.case_study_open_loop(cfg, n_samples=100, workers=1)
    assert set(reports) == {"ema", "mra", "sa"}
    for rep in reports.values():
        assert rep.n_instances == 2 and rep.config_digest == cfg.digest()
        for r in rep.feasible_rows:
            assert 0.0 <= r["violation"] <= 1.0
    assert len(traj["ema"]) == 5
    evaluation.write_open_loop(tmp_path, cfg, reports, traj)
    head = (tmp_path / "open_loop_instances.csv").read_text().splitlines()[0]
    assert head.startswith("# ") and json.loads(head[2:])["config_digest"] == cfg.digest()
    summary = json.loads((tmp_path / "open_loop_summary.json").read_text())
    assert summary["config_digest"] == cfg.digest()
    assert (tmp_path / "timing" / "open_loop_solve_times.csv").exists()
    with (tmp_path / "open_loop_instances.csv").open() as fh:
        fh.readline()
        assert "solve_time" not in next(csv.reader(fh))


def test_case_study_reproducible():
    cfg = config.load("open_loop_s51")
    cfg = config.validate({**cfg.data, "system": {**cfg.data["system"], "horizon": 3},
                           "risk": {**cfg.data["risk"], "redistribute": False}})
    a, _ = evaluation.case_study_open_loop(cfg, n_instances=2, n_mc=100, n_samples=50, methods=("mra",), workers=1)
    b, _ = evaluation.case_study_open_loop(cfg, n_instances=2, n_mc=100, n_samples=50, methods=("mra",), workers=1)
    assert a["mra"].summary() == b["mra"].summary()


def test_uncertainty_pattern():
    grows, plateau = evaluation.uncertainty_pattern([1, 2, 3, 4], [1.0, 0.8, 0.7, 0.7, 0.7, 0.7])
    assert grows and plateau
    grows, plateau = evaluation.uncertainty_pattern([1, 2, 2, 4], [1.0, 2.0, 3.0, 4.0])
    assert not grows and not plateau


def test_concentration_curves_monotone(tmp_path):
    by_ns, by_beta = evaluation.concentration_curves()
    r1 = [r["r1"] for r in by_ns]
    r2 = [r["r2"] for r in by_ns]
    assert np.all(np.diff(r1) < 0) and np.all(np.diff(r2) < 0)
    assert np.all(np.diff([r["r1"] for r in by_beta]) > 0)
    evaluation.write_concentration(tmp_path)
    assert (tmp_path / "concentration_vs_samples.csv").exists()
