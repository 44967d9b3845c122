"""MISOCP assembly for the three planning methods and branch-and-bound.

Methods:
    ema  exact Gaussian moments in the cone constraint
    mra  sample moments, tightened by the concentration bounds r1/r2
    sa   one hard linear constraint per drawn sample (scenario approach)

Every (t, j) obstacle group owns one binary per face with the convention
"exactly one face active" (sum z = F_j - 1); z = 1 deactivates a face through
big-M. Branching fixes a group member to active (z = 0) or excluded (z = 1).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import spatial

from . import conic
from .errors import DomainError, InfeasibleError, NodeLimitError
from . import model
from .model import RISK_FLOOR, RiskAllocation, face_big_m, rollout

log = logging.getLogger(__name__)

METHODS = ("mra", "ema", "sa")
INT_TOL = 1e-6
TIGHTEN_MIN_GROUPS = 4


@dataclass
class BinaryGroup:
    key: tuple
    z_idx: np.ndarray
    face_keys: list


@dataclass
class BinaryGroupSet:
    groups: list

    def __len__(self):
        return len(self.groups)

    def n_assignments(self):
        return int(np.prod([len(g.z_idx) for g in self.groups], dtype=float))


@dataclass
class Template:
    """A continuous relaxation plus the bookkeeping to read plans back out."""

    program: conic.ConeProgram
    groups: BinaryGroupSet
    method: str
    problem: object
    u_idx: np.ndarray
    x_idx: np.ndarray
    risk: RiskAllocation
    big_m: dict
    halfspaces: dict = field(default_factory=dict)
    n_scenario_rows: int = 0
    presolve_fixes: tuple = ()
    infeasible_groups: list = field(default_factory=list)
    sa_reduce: bool = True


@dataclass
class PlanSolution:
    method: str
    u_seq: np.ndarray
    x_traj: np.ndarray
    z_assignment: dict
    objective: float
    solver_stats: dict
    risk: RiskAllocation
    status: str = "optimal"

    def to_record(self):
        return {
            "method": self.method,
            "status": self.status,
            "objective": self.objective,
            "u": np.round(self.u_seq, 12).tolist(),
            "x": np.round(self.x_traj, 12).tolist(),
            "z": {f"{t},{j}": i for (t, j), i in sorted(self.z_assignment.items())},
            "nodes": self.solver_stats.get("nodes"),
            "relaxations": self.solver_stats.get("relaxations"),
            "wall_time": self.solver_stats.get("wall_time"),
            "risk": {",".join(map(str, k)): v for k, v in sorted(self.risk.per_constraint.items())},
        }


# --------------------------------------------------------------------------
# Assembly


def _base_program(problem):
    """Input, state and dynamics variables plus the quadratic cost."""
    sys = problem.system
    n, nx, nu = sys.horizon, sys.nx, sys.nu
    b = conic.ProgramBuilder()
    u_idx = b.add_vars(n * nu, np.tile(sys.input_lb, n), np.tile(sys.input_ub, n)).reshape(n, nu)
    x_lb = problem.state_lb if problem.state_lb is not None else -np.inf
    x_ub = problem.state_ub if problem.state_ub is not None else np.inf
    x_idx = b.add_vars(n * nx, np.tile(x_lb, n), np.tile(x_ub, n)).reshape(n, nx)
    eye = np.eye(nx)
    for t in range(n):
        a, bm = sys.a_mats[t], sys.b_mats[t]
        if t == 0:
            b.add_eq(np.concatenate([x_idx[0], u_idx[0]]), np.hstack([eye, -bm]), a @ sys.initial_state)
        else:
            b.add_eq(np.concatenate([x_idx[t], x_idx[t - 1], u_idx[t]]), np.hstack([eye, -a, -bm]), np.zeros(nx))

    cost = problem.cost
    rows_cols, rows_mat, rows_rhs = [], [], []
    if cost.terminal_idx:
        k = len(cost.terminal_idx)
        rows_cols.append(x_idx[n - 1, list(cost.terminal_idx)])
        rows_mat.append(np.eye(k))
        rows_rhs.append(np.asarray(cost.terminal_target, float))
    if cost.stage_idx:
        k = len(cost.stage_idx)
        for t in range(n):
            rows_cols.append(x_idx[t, list(cost.stage_idx)])
            rows_mat.append(np.eye(k))
            rows_rhs.append(np.asarray(cost.stage_target, float))
    if cost.input_weight > 0:
        w = np.sqrt(cost.input_weight)
        for t in range(n):
            rows_cols.append(u_idx[t])
            rows_mat.append(w * np.eye(nu))
            rows_rhs.append(np.zeros(nu))
    if rows_cols:
        cols = np.unique(np.concatenate(rows_cols))
        pos = {c: k for k, c in enumerate(cols)}
        r_mat = np.zeros((sum(m.shape[0] for m in rows_mat), cols.size))
        r0 = 0
        for cc, m in zip(rows_cols, rows_mat):
            for jj, c in enumerate(cc):
                r_mat[r0:r0 + m.shape[0], pos[c]] += m[:, jj]
            r0 += m.shape[0]
        conic.least_squares_epigraph(b, cols, r_mat, np.concatenate(rows_rhs))
    return b, u_idx, x_idx


def _add_cone_face(b, problem, x_cols, z_col, big_m, hs):
    """q ||C xt|| + r1 ||xt[mask]|| <= mu @ xt + M z as cone/linear rows."""
    k = x_cols.size
    c_mat = hs.cov_sqrt_scaled
    mu = hs.mean_hat
    offset = mu[k]
    aux_col = None
    if hs.r1_scaled > 0:
        mask = hs.r1_mask
        if mask[:k].any():
            aux_col = int(b.add_vars(1, 0.0)[0])
            sel = np.flatnonzero(mask[:k])
            g = hs.r1_scaled * np.eye(k)[sel]
            h = np.zeros(sel.size)
            if mask[k]:
                g = np.vstack([g, np.zeros(k)])
                h = np.append(h, hs.r1_scaled)
            b.add_soc(x_cols, g, h, [aux_col], [1.0], 0.0)
        else:
            offset -= hs.r1_scaled
    c_cols = np.concatenate([x_cols, [z_col]] + ([[aux_col]] if aux_col is not None else []))
    c_vec = np.concatenate([mu[:k], [big_m]] + ([[-1.0]] if aux_col is not None else []))
    if not np.any(c_mat):
        b.add_ineq(c_cols, -c_vec, offset)
    else:
        b.add_soc(x_cols, c_mat[:, :k], c_mat[:, k], c_cols, c_vec, offset)


def support_samples(d):
    """Rows of ``d`` that are vertices of its convex hull.

    A linear function of d attains its minimum over the samples at a hull
    vertex, so the sampled constraints of the other rows are implied. Falls
    back to every row when the hull is degenerate.
    """
    d = np.asarray(d, float)
    if d.shape[0] <= d.shape[1] + 1:
        return d
    free = np.ptp(d, axis=0) > 0
    if free.sum() < 2:
        lo, hi = np.argmin(d[:, free].sum(axis=1)), np.argmax(d[:, free].sum(axis=1))
        return d[np.unique([lo, hi])] if free.any() else d[:1]
    try:
        hull = spatial.ConvexHull(d[:, free])
    except spatial.QhullError:
        return d
    return d[np.sort(hull.vertices)]


def _add_sampled_face(b, x_cols, z_col, big_m, samples, reduce=True):
    """d_i @ xt + M z >= 0 for every sample row d_i."""
    d = support_samples(samples.samples) if reduce else samples.samples
    n_s, k = d.shape[0], x_cols.size
    rows = np.repeat(np.arange(n_s), k + 1)
    cols = np.tile(np.append(x_cols, z_col), n_s)
    vals = np.hstack([-d[:, :k], np.full((n_s, 1), -big_m)]).ravel()
    b.add_ineq_coo(rows, cols, vals, d[:, k])


def assemble(problem, method, risk=None, sa_reduce=True, box=None):
    """Continuous relaxation template and binary groups for one method.

    With ``sa_reduce`` the scenario constraints keep only the samples on the
    convex hull of each face's sample set; the feasible set is unchanged.
    ``box`` = (lo, hi), per-step bounds on the face coordinates (rows are steps
    1..N), replaces the reachable box for big-M and presolve and bounds the
    state variables; by default the reachable box is used.
    """
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}")
    risk = problem.risk if risk is None else risk
    b, u_idx, x_idx = _base_program(problem)
    if box is None:
        box = model.reachable_box(problem)
    else:
        fs_cols = x_idx[:, list(problem.face_states)]
        b.tighten_bounds(fs_cols.ravel(), box[0][:, list(problem.face_states)].ravel(),
                         box[1][:, list(problem.face_states)].ravel())
    big_m = face_big_m(problem, box)
    fs = list(problem.face_states)
    groups = []
    halfspaces = {}
    for key, faces in problem.groups().items():
        t, j = key
        z_idx = b.add_vars(len(faces), 0.0, 1.0)
        b.add_eq(z_idx, np.ones((1, len(faces))), [len(faces) - 1])
        x_cols = x_idx[t - 1, fs]
        for f, z in zip(faces, z_idx):
            if method == "sa":
                if f.samples is None:
                    raise DomainError(f"face {f.key} has no samples for the scenario approach")
                _add_sampled_face(b, x_cols, z, big_m[f.key], f.samples, sa_reduce)
            else:
                hs = f.halfspace(method, risk[f.key], problem.beta)
                halfspaces[f.key] = hs
                _add_cone_face(b, problem, x_cols, z, big_m[f.key], hs)
        groups.append(BinaryGroup(key, z_idx, [f.key for f in faces]))
    n_rows = sum(f.samples.count for f in problem.faces) if method == "sa" else 0
    gset = BinaryGroupSet(groups)
    fixes, dead = _presolve(problem, method, gset, halfspaces, box)
    return Template(b.build(), gset, method, problem, u_idx, x_idx, risk, big_m,
                    halfspaces, n_rows, fixes, dead, sa_reduce)


def _best_slack_bound(face, hs, method, lo, hi):
    """Upper bound on max over the box of (right-hand side - left-hand side) at z = 0."""
    verts = np.hstack([_corners(lo, hi), np.ones((2 ** lo.size, 1))])
    if method == "sa":
        d = support_samples(face.samples.samples)
        return float((d @ verts.T).max(axis=1).min())
    k = lo.size
    c = hs.cov_sqrt_scaled
    x_norm = np.sqrt(np.maximum(lo ** 2, hi ** 2).sum())
    lower = max(0.0, np.linalg.norm(c[:, k]) - np.linalg.norm(c[:, :k], 2) * x_norm)
    if hs.r1_mask[k]:
        lower += hs.r1_scaled
    return float((verts @ hs.mean_hat).max() - lower)


def _corners(lo, hi):
    return np.array(list(itertools.product(*zip(lo, hi))), dtype=float)


def _presolve(problem, method, groups, halfspaces, box):
    """Fix faces that cannot hold anywhere in the reachable box at their step.

    Such a face must be deactivated (z = 1); a group left with one viable
    face has its assignment fixed. Returns (fixes, infeasible_groups).
    """
    lo, hi = box
    fs = list(problem.face_states)
    by_key = {f.key: f for f in problem.faces}
    fixes, dead = [], []
    for g in groups.groups:
        t = g.key[0]
        l, h = lo[t - 1, fs], hi[t - 1, fs]
        if np.any(l > h) or not np.all(np.isfinite(np.concatenate([l, h]))):
            continue
        viable = []
        for fk in g.face_keys:
            bound = _best_slack_bound(by_key[fk], halfspaces.get(fk), method, l, h)
            viable.append(bound >= -1e-9 * max(1.0, abs(bound)))
        if not any(viable):
            dead.append(g.key)
            continue
        for zi, ok in zip(g.z_idx, viable):
            if not ok:
                fixes.append((int(zi), 1.0))
        if sum(viable) == 1:
            fixes.append((int(g.z_idx[viable.index(True)]), 0.0))
    return tuple(fixes), dead


def assemble_ema(problem, risk=None):
    return assemble(problem, "ema", risk)


def assemble_mra(problem, risk=None):
    return assemble(problem, "mra", risk)


def assemble_sa(problem, risk=None):
    return assemble(problem, "sa", risk)


# --------------------------------------------------------------------------
# Branch and bound


def _plan_from(template, sol, stats):
    prob = template.problem
    u = sol.y[template.u_idx]
    x = rollout(prob.system, u)
    z = {}
    for g in template.groups.groups:
        vals = sol.y[g.z_idx]
        z[g.key] = g.face_keys[int(np.argmin(vals))][2]
    objective = prob.cost.evaluate(x, u)
    return PlanSolution(template.method, u, x, z, objective, stats, template.risk)


class _Search:
    """Branch-and-bound state over one template.

    Groups are visited in (t, j) order: the branching variable is the most
    fractional member of the earliest group that is not yet integral.
    """

    def __init__(self, template, node_limit, gap_tol, used=0):
        self.t = template
        self.session = conic.ConeSession(template.program)
        self.lb0 = template.program.lb.copy()
        self.ub0 = template.program.ub.copy()
        for idx, val in template.presolve_fixes:
            self.lb0[idx] = self.ub0[idx] = val
        self.node_limit = node_limit
        self.gap_tol = gap_tol
        self.relaxations = used
        self.failures = 0
        self.incumbent = None
        self.best = np.inf
        groups = template.groups.groups
        self.z_all = np.concatenate([g.z_idx for g in groups]) if groups else np.zeros(0, int)

    def relax(self, fixes):
        if self.relaxations >= self.node_limit:
            raise NodeLimitError(f"node limit {self.node_limit} exceeded", self.incumbent)
        lb, ub = self.lb0.copy(), self.ub0.copy()
        for idx, val in fixes:
            lb[idx] = ub[idx] = val
        self.relaxations += 1
        return self.session.solve(lb, ub)

    def prunable(self, bound):
        return bound >= self.best - self.gap_tol * max(1.0, abs(self.best))

    def try_incumbent(self, sol, fixes):
        """Round an integral relaxation and re-solve with every binary fixed."""
        z = dict(zip(self.z_all.tolist(), np.round(sol.y[self.z_all]).tolist()))
        fixed = dict(fixes)
        z.update(fixed)
        # binaries pinned by presolve count as fixed
        free = [i for i in self.z_all.tolist() if i not in fixed and self.lb0[i] != self.ub0[i]]
        if free:
            leaf = self.relax(tuple(z.items()))
            if leaf.status == conic.NUMERICAL_FAILURE:
                self.failures += 1
            if not leaf.optimal:
                return False
            sol = leaf
        if sol.objective_value < self.best:
            self.best = sol.objective_value
            self.incumbent = sol
            return True
        return False

    def branch_index(self, y, fixes):
        fixed = {i for i, _ in fixes}
        for g in self.t.groups.groups:
            best, pick = INT_TOL, None
            for idx in g.z_idx:
                if idx in fixed or self.lb0[idx] == self.ub0[idx]:
                    continue
                frac = min(y[idx], 1.0 - y[idx])
                if frac > best + 1e-12:
                    best, pick = frac, int(idx)
            if pick is not None:
                return pick
        return None

    def children(self, idx, fixes):
        """Active (z = 0) first, then excluded (z = 1)."""
        for val in (0.0, 1.0):
            yield fixes + ((idx, val),)

    def _group_fix(self, g, active):
        return tuple((int(zi), 0.0 if zi == active else 1.0) for zi in g.z_idx if self.lb0[zi] != self.ub0[zi])

    def hint_incumbent(self, hint):
        """Try a suggested face assignment {(t, j): i} as the first incumbent."""
        fixes = []
        for g in self.t.groups.groups:
            if g.key not in hint:
                continue
            for zi, fk in zip(g.z_idx, g.face_keys):
                fixes.append((int(zi), 0.0 if fk[2] == hint[g.key] else 1.0))
        if not fixes:
            return
        if any(self.lb0[i] == self.ub0[i] and self.lb0[i] != v for i, v in fixes):
            return
        sol = self.relax(tuple(fixes))
        if sol.optimal and self.branch_index(sol.y, tuple(fixes)) is None:
            self.try_incumbent(sol, tuple(fixes))

    def dive(self, root):
        """Greedy plunge: settle groups in time order on the face whose
        restricted relaxation is cheapest."""
        sol, fixes = root, ()
        for g in self.t.groups.groups:
            open_idx = [zi for zi in g.z_idx if self.lb0[zi] != self.ub0[zi] and (zi, 1.0) not in fixes]
            if all(min(sol.y[zi], 1 - sol.y[zi]) <= INT_TOL for zi in g.z_idx):
                continue
            best = None
            for zi in open_idx:
                cand = fixes + self._group_fix(g, zi)
                s = self.relax(cand)
                if s.optimal and (best is None or s.objective_value < best[0].objective_value):
                    best = (s, cand)
            if best is None:
                return
            sol, fixes = best
        self.try_incumbent(sol, fixes)

    def _assignment_fixes(self, faces):
        """Fixes for one active face per group; None if presolve forbids it."""
        fixes = []
        for g, face in zip(self.t.groups.groups, faces):
            for zi, fk in zip(g.z_idx, g.face_keys):
                val = 0.0 if fk[2] == face else 1.0
                if self.lb0[zi] == self.ub0[zi] and self.lb0[zi] != val:
                    return None
                fixes.append((int(zi), val))
        return tuple(fixes)

    def _active_faces(self, y):
        return [min(zip(g.z_idx, g.face_keys), key=lambda p: y[p[0]])[1][2] for g in self.t.groups.groups]

    def local_search(self, max_rounds=50):
        """Shift the boundaries between runs of equal faces while that helps.

        Groups are in (t, j) order, so a run is a stretch of consecutive
        groups holding the same face; moving a boundary by one group turns
        one group over to its neighbour's face.
        """
        if self.incumbent is None:
            return
        faces = self._active_faces(self.incumbent.y)
        tried = set()
        for _ in range(max_rounds):
            improved = False
            for k in range(len(faces) - 1):
                if faces[k] == faces[k + 1]:
                    continue
                for pos, face in ((k, faces[k + 1]), (k + 1, faces[k])):
                    cand = list(faces)
                    cand[pos] = face
                    # extend the move over the whole run being eaten into
                    key = tuple(cand)
                    if key in tried:
                        continue
                    tried.add(key)
                    fixes = self._assignment_fixes(cand)
                    if fixes is None:
                        continue
                    sol = self.relax(fixes)
                    if sol.optimal and sol.objective_value < self.best - 1e-9 * max(1.0, abs(self.best)):
                        self.best, self.incumbent = sol.objective_value, sol
                        faces = cand
                        improved = True
                        break
                if improved:
                    break
            if not improved:
                return

    def run(self, root, dive=True):
        """Depth-first until the first incumbent, best-first afterwards."""
        nodes = 0
        if dive and self.incumbent is None:
            self.dive(root)
        counter = itertools.count()
        stack = [(root.objective_value, 0, next(counter), (), root)]
        heap = []
        while stack or heap:
            if self.incumbent is None and stack:
                node = stack.pop()
            else:
                if stack:
                    heap.extend(stack)
                    heapq.heapify(heap)
                    stack = []
                node = heapq.heappop(heap)
            bound, negdepth, _, fixes, sol = node
            if self.prunable(bound):
                continue
            idx = self.branch_index(sol.y, fixes)
            if idx is None:
                self.try_incumbent(sol, fixes)
                continue
            kids = []
            for child in self.children(idx, fixes):
                s = self.relax(child)
                nodes += 1
                if s.status == conic.NUMERICAL_FAILURE:
                    # keep the subtree alive on the parent's bound and point
                    self.failures += 1
                    s = sol
                elif not s.optimal or self.prunable(s.objective_value):
                    continue
                kids.append((max(s.objective_value, bound), negdepth - 1, next(counter), child, s))
            if self.incumbent is None:
                # the child the relaxation leans towards is explored first
                lean = 0.0 if sol.y[idx] <= 0.5 else 1.0
                kids.sort(key=lambda k: k[3][-1][1] == lean)
                stack.extend(kids)
            else:
                for k in kids:
                    heapq.heappush(heap, k)
        return nodes


def objective_box(problem, cutoff):
    """Per-step bounds on the face coordinates over plans with cost <= cutoff.

    Every plan that could improve on an incumbent of cost ``cutoff`` lies in
    this box, so it may replace the reachable box for big-M and presolve.
    Returns None when no plan meets the cutoff.
    """
    b, u_idx, x_idx = _base_program(problem)
    prog = b.build()
    # objective(y) + offset <= cutoff as an extra linear row
    a_in = sp.vstack([prog.a_in, sp.csr_matrix(prog.objective)], format="csr")
    b_in = np.append(prog.b_in, cutoff - prog.offset)
    prog = conic.ConeProgram(prog.n_vars, np.zeros(prog.n_vars), prog.a_eq, prog.b_eq, a_in, b_in,
                             prog.socs, prog.lb, prog.ub)
    session = conic.ConeSession(prog)
    lo, hi = model.reachable_box(problem)
    lo, hi = lo.copy(), hi.copy()
    for t in range(problem.horizon):
        for k in problem.face_states:
            col = x_idx[t, k]
            for sign in (1.0, -1.0):
                q = np.zeros(prog.n_vars)
                q[col] = sign
                s = session.solve(objective=q)
                if s.status == conic.INFEASIBLE:
                    return None
                if not s.optimal:
                    continue
                # widen by the solver tolerance so the box stays an outer bound
                pad = 1e-6 * (1.0 + abs(s.y[col]))
                if sign > 0:
                    lo[t, k] = max(lo[t, k], s.y[col] - pad)
                else:
                    hi[t, k] = min(hi[t, k], s.y[col] + pad)
    return lo, np.maximum(hi, lo)


def solve_misocp(template, node_limit=100_000, gap_tol=1e-9, hint=None, tighten=True):
    """Globally optimal plan over all face assignments (branch-and-bound).

    ``hint`` is an optional face assignment {(t, j): i} tried as the first
    incumbent. Once an incumbent exists and ``tighten`` is set, the state box
    is shrunk to plans that could beat it, big-M and presolve are redone on the
    smaller box, and the search continues on the tightened template (same
    variable layout). Raises ``InfeasibleError`` when no assignment is feasible
    and ``NodeLimitError`` when the node limit is hit; its ``incumbent`` is
    the best plan found so far (a feasible PlanSolution with status
    "node_limit") or None.
    """
    start = time.perf_counter()
    if template.infeasible_groups:
        raise InfeasibleError(f"no face of group {template.infeasible_groups[0]} can hold in the reachable set")
    search = _Search(template, node_limit, gap_tol)
    root = search.relax(())
    if root.status == conic.INFEASIBLE:
        raise InfeasibleError("root relaxation is infeasible")
    if not root.optimal:
        raise InfeasibleError(f"root relaxation failed with status {root.status}")
    nodes = 1
    try:
        if hint:
            search.hint_incumbent(hint)
        if search.incumbent is None:
            search.dive(root)
        search.local_search()
        open_groups = sum(1 for g in template.groups.groups
                          if sum(search.lb0[zi] != search.ub0[zi] for zi in g.z_idx) > 1)
        # tightening costs a few dozen solves; it only pays off on larger trees
        if (tighten and search.incumbent is not None and open_groups >= TIGHTEN_MIN_GROUPS
                and not search.prunable(root.objective_value)):
            cutoff = search.best + 1e-7 * max(1.0, abs(search.best))
            box = objective_box(template.problem, cutoff)
            if box is not None:
                tight = assemble(template.problem, template.method, template.risk, template.sa_reduce, box)
                if not tight.infeasible_groups:
                    nxt = _Search(tight, node_limit, gap_tol, search.relaxations)
                    nxt.incumbent, nxt.best = search.incumbent, search.best
                    nxt.failures = search.failures
                    r2 = nxt.relax(())
                    if r2.optimal:
                        template, search, root = tight, nxt, r2
                        nodes += 1
        if search.incumbent is not None and search.prunable(root.objective_value):
            pass
        else:
            nodes += search.run(root, dive=False)
    except NodeLimitError as exc:
        if search.incumbent is None:
            raise
        stats = {"nodes": nodes, "relaxations": search.relaxations,
                 "wall_time": time.perf_counter() - start, "numerical_failures": search.failures}
        best = _plan_from(template, search.incumbent, stats)
        best.status = "node_limit"
        raise NodeLimitError(str(exc), best) from None
    sol = search.incumbent
    wall = time.perf_counter() - start
    stats = {"nodes": nodes, "relaxations": search.relaxations, "wall_time": wall,
             "numerical_failures": search.failures}
    if sol is None:
        raise InfeasibleError("no feasible face assignment")
    return _plan_from(template, sol, stats)


def plan(problem, method, risk=None, node_limit=100_000, gap_tol=1e-9, hint=None, sa_reduce=True):
    """Assemble and solve; solver time covers assembly and search.

    ``hint`` is an optional face assignment {(t, j): i} used as a first
    incumbent (for instance the previous receding-horizon plan, shifted).
    """
    start = time.perf_counter()
    template = assemble(problem, method, risk, sa_reduce)
    try:
        out = solve_misocp(template, node_limit, gap_tol, hint)
    except NodeLimitError as exc:
        if exc.incumbent is not None:
            _add_plan_stats(exc.incumbent, template, start)
        raise
    return _add_plan_stats(out, template, start)


def _add_plan_stats(out, template, start):
    out.solver_stats["solve_time"] = time.perf_counter() - start
    out.solver_stats["n_constraints"] = _constraint_count(template.program)
    # sampled constraints before dropping the ones implied by the hull
    out.solver_stats["n_scenario_rows"] = template.n_scenario_rows
    out.solver_stats["n_binaries"] = int(sum(len(g.z_idx) for g in template.groups.groups))
    return out


def _constraint_count(prog):
    return int(prog.a_eq.shape[0] + prog.a_in.shape[0] + len(prog.socs))


def enumerate_assignments(template):
    """Best objective over every face assignment, solving each leaf directly."""
    session = conic.ConeSession(template.program)
    lb0, ub0 = template.program.lb, template.program.ub
    best, best_sol = np.inf, None
    choices = [range(len(g.z_idx)) for g in template.groups.groups]
    for combo in itertools.product(*choices):
        lb, ub = lb0.copy(), ub0.copy()
        for g, active in zip(template.groups.groups, combo):
            vals = np.ones(len(g.z_idx))
            vals[active] = 0.0
            lb[g.z_idx] = ub[g.z_idx] = vals
        s = session.solve(lb, ub)
        if s.optimal and s.objective_value < best:
            best, best_sol = s.objective_value, s
    return best, best_sol


# --------------------------------------------------------------------------
# Risk redistribution


def face_states(template, plan_sol, key):
    t = key[0]
    return template.problem.augmented(plan_sol.x_traj[t])


def redistribute_risk(problem, incumbent, max_iters=10, tol=1e-4, retain=0.5, floor=RISK_FLOOR,
                      node_limit=100_000, gap_tol=1e-9):
    """Iteratively move risk from slack groups to binding ones and re-solve.

    Reconstruction of the iterative risk-allocation heuristic: for each
    (t, j) group, the active face's risk is lowered towards the risk it
    actually uses (``retain`` keeps part of the old value, ``floor`` bounds it
    below) when the face is slack, and the freed budget is shared equally by
    the binding groups. The current plan stays feasible at every step, so the
    cost never increases; iteration stops when the relative improvement drops
    below ``tol``. Only the cone methods (mra, ema) carry per-face risks.
    """
    method = incumbent.method
    if method not in ("mra", "ema"):
        raise DomainError("risk redistribution applies to the cone methods only")
    current = incumbent
    history = [current.objective]
    groups = problem.groups()
    for _ in range(max_iters):
        risk = current.risk.per_constraint
        group_eps = {key: risk[faces[0].key] for key, faces in groups.items()}
        new_eps = dict(group_eps)
        binding, freed = [], 0.0
        for key, faces in groups.items():
            active = next(f for f in faces if f.i == current.z_assignment[key])
            hs = active.halfspace(method, group_eps[key], problem.beta)
            used = hs.used_risk(problem.augmented(current.x_traj[key[0]]))
            if used >= group_eps[key] * (1.0 - 1e-3):
                binding.append(key)
            else:
                target = max(floor, retain * group_eps[key] + (1.0 - retain) * used)
                target = min(target, group_eps[key])
                freed += group_eps[key] - target
                new_eps[key] = target
        if not binding or freed <= 0:
            break
        share = freed / len(binding)
        for key in binding:
            new_eps[key] = min(group_eps[key] + share, 0.499)
        alloc = RiskAllocation(problem.eps, {f.key: new_eps[(f.t, f.j)] for f in problem.faces})
        try:
            cand = solve_misocp(assemble(problem, method, alloc), node_limit, gap_tol, hint=current.z_assignment)
        except (InfeasibleError, NodeLimitError):
            break
        if cand.objective > current.objective + 1e-9 * max(1.0, abs(current.objective)):
            break
        improvement = current.objective - cand.objective
        cand.solver_stats["nodes"] += current.solver_stats.get("nodes", 0)
        cand.solver_stats["relaxations"] += current.solver_stats.get("relaxations", 0)
        cand.solver_stats["wall_time"] += current.solver_stats.get("wall_time", 0.0)
        current = cand
        history.append(current.objective)
        if improvement < tol * max(1.0, abs(history[0])):
            break
    current.solver_stats["redistribution_costs"] = history
    return current


def charged_risk(alloc, problem):
    """Risk charged under the one-active-face convention: one face per group."""
    per = alloc.per_constraint
    return float(sum(max(per[f.key] for f in faces) for faces in problem.groups().values()))
