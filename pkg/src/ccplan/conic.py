"""Second-order cone programs and their solution.

Programs are stored in the canonical form

    minimize    c @ y
    subject to  A_eq y == b_eq
                A_in y <= b_in
                ||G_k y + h_k|| <= c_k @ y + d_k      for every cone block k
                lb <= y <= ub

and handed to the Clarabel interior-point solver. ``ConeSession`` keeps the
factorization structure alive so that branch-and-bound can re-solve the same
program under different variable bounds by changing only right-hand sides.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

from .errors import DomainError

GAP_TOL = 1e-7
FEAS_TOL = 1e-7
MAX_ITER = 200

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class SocBlock:
    g: sp.csr_matrix
    h: np.ndarray
    c: np.ndarray
    d: float

    @property
    def size(self):
        return self.g.shape[0] + 1


@dataclass
class ConeProgram:
    n_vars: int
    objective: np.ndarray
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    a_in: sp.csr_matrix
    b_in: np.ndarray
    socs: list = field(default_factory=list)
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        n = self.n_vars
        if n < 1:
            raise DomainError("a cone program needs at least one variable")
        self.objective = np.asarray(self.objective, dtype=float).reshape(n)
        self.a_eq = sp.csr_matrix(self.a_eq, shape=(len(self.b_eq), n))
        self.a_in = sp.csr_matrix(self.a_in, shape=(len(self.b_in), n))
        self.b_eq = np.asarray(self.b_eq, dtype=float)
        self.b_in = np.asarray(self.b_in, dtype=float)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        for blk in self.socs:
            if blk.g.shape[1] != n or blk.c.shape != (n,) or blk.h.shape != (blk.g.shape[0],):
                raise DomainError("cone block dimensions do not match the program")

    # -- evaluation ---------------------------------------------------------

    def residuals(self, y):
        """Largest violation of each constraint family at ``y``."""
        y = np.asarray(y, dtype=float)
        eq = float(np.abs(self.a_eq @ y - self.b_eq).max(initial=0.0))
        ineq = float(np.maximum(self.a_in @ y - self.b_in, 0.0).max(initial=0.0))
        cone = 0.0
        if self.socs:
            g, h, c, d, starts = self._stacked_socs()
            r = g @ y + h
            norms = np.sqrt(np.add.reduceat(r * r, starts)) if r.size else np.zeros(len(self.socs))
            cone = float((norms - (c @ y + d)).max())
        bounds = float(max(np.maximum(self.lb - y, 0.0).max(initial=0.0), np.maximum(y - self.ub, 0.0).max(initial=0.0)))
        return {"eq": eq, "ineq": ineq, "soc": max(cone, 0.0), "bounds": bounds}

    def _stacked_socs(self):
        if getattr(self, "_soc_cache", None) is None:
            sizes = np.array([blk.g.shape[0] for blk in self.socs])
            if np.any(sizes == 0):
                # reduceat cannot express empty segments; pad them with a zero row
                blocks = [blk.g if blk.g.shape[0] else sp.csr_matrix((1, self.n_vars)) for blk in self.socs]
                hs = [blk.h if blk.h.size else np.zeros(1) for blk in self.socs]
                sizes = np.maximum(sizes, 1)
            else:
                blocks, hs = [blk.g for blk in self.socs], [blk.h for blk in self.socs]
            starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
            self._soc_cache = (sp.vstack(blocks, format="csr"), np.concatenate(hs),
                               sp.csr_matrix(np.array([blk.c for blk in self.socs])),
                               np.array([blk.d for blk in self.socs], float), starts)
        return self._soc_cache

    def max_violation(self, y):
        return max(self.residuals(y).values())

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        def mat(m):
            m = sp.coo_matrix(m)
            return {"shape": list(m.shape), "row": m.row.tolist(), "col": m.col.tolist(), "val": m.data.tolist()}

        def vec(v):
            return [None if not np.isfinite(x) else float(x) for x in v]

        return {
            "format": "ccplan-cone-program/1",
            "n_vars": self.n_vars,
            "objective": self.objective.tolist(),
            "a_eq": mat(self.a_eq),
            "b_eq": self.b_eq.tolist(),
            "a_in": mat(self.a_in),
            "b_in": self.b_in.tolist(),
            "socs": [{"g": mat(b.g), "h": b.h.tolist(), "c": b.c.tolist(), "d": float(b.d)} for b in self.socs],
            "lb": vec(self.lb),
            "ub": vec(self.ub),
            "offset": float(self.offset),
        }

    @classmethod
    def from_dict(cls, data):
        def mat(m):
            return sp.csr_matrix((m["val"], (m["row"], m["col"])), shape=tuple(m["shape"]))

        def vec(v, fill):
            return np.array([fill if x is None else x for x in v], dtype=float)

        return cls(
            n_vars=data["n_vars"],
            objective=np.array(data["objective"]),
            a_eq=mat(data["a_eq"]),
            b_eq=np.array(data["b_eq"], dtype=float),
            a_in=mat(data["a_in"]),
            b_in=np.array(data["b_in"], dtype=float),
            socs=[SocBlock(mat(b["g"]), np.array(b["h"], float), np.array(b["c"], float), b["d"]) for b in data["socs"]],
            lb=vec(data["lb"], -np.inf),
            ub=vec(data["ub"], np.inf),
            offset=data.get("offset", 0.0),
        )

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


@dataclass
class ConeSolution:
    status: str
    y: np.ndarray | None
    objective_value: float
    dual_objective: float = np.nan
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    solve_time: float = 0.0

    @property
    def optimal(self):
        return self.status == OPTIMAL


class ProgramBuilder:
    """Incremental assembly of a ``ConeProgram`` from row triplets."""

    def __init__(self):
        self.n = 0
        self._lb = []
        self._ub = []
        self.obj = {}
        self._eq = []
        self._n_eq = 0
        self._in = []
        self._n_in = 0
        self._socs = []
        self.obj_const = 0.0

    def add_vars(self, count, lb=-np.inf, ub=np.inf):
        idx = np.arange(self.n, self.n + count)
        self.n += count
        self._lb.append(np.broadcast_to(np.asarray(lb, dtype=float), (count,)).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, dtype=float), (count,)).copy())
        return idx

    def tighten_bounds(self, cols, lb, ub):
        """Intersect the bounds of existing variables with [lb, ub]."""
        lo = np.concatenate(self._lb) if self._lb else np.zeros(0)
        hi = np.concatenate(self._ub) if self._ub else np.zeros(0)
        cols = np.asarray(cols, int)
        lo[cols] = np.maximum(lo[cols], lb)
        hi[cols] = np.minimum(hi[cols], ub)
        self._lb, self._ub = [lo], [hi]

    def add_objective(self, cols, coefs):
        for col, v in zip(np.atleast_1d(cols), np.atleast_1d(coefs)):
            self.obj[int(col)] = self.obj.get(int(col), 0.0) + float(v)

    @staticmethod
    def _dense_rows(cols, mat, rhs):
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        cols = np.asarray(cols, dtype=int)
        r, c = np.nonzero(mat)
        return r, cols[c], mat[r, c], rhs

    def add_eq(self, cols, mat, rhs):
        """Rows ``mat @ y[cols] == rhs``; returns the row indices."""
        r, c, v, rhs = self._dense_rows(cols, mat, rhs)
        self._eq.append((r + self._n_eq, c, v, rhs))
        self._n_eq += rhs.size
        return np.arange(self._n_eq - rhs.size, self._n_eq)

    def add_ineq(self, cols, mat, rhs):
        """Rows ``mat @ y[cols] <= rhs``; returns the row indices."""
        return self.add_ineq_coo(*self._dense_rows(cols, mat, rhs))

    def add_ineq_coo(self, rows, cols, vals, rhs):
        """Bulk inequality rows from local COO triplets (row 0 = first new row)."""
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        self._in.append((np.asarray(rows, dtype=int) + self._n_in, np.asarray(cols, dtype=int),
                         np.asarray(vals, dtype=float), rhs))
        self._n_in += rhs.size
        return np.arange(self._n_in - rhs.size, self._n_in)

    def add_soc(self, g_cols, g, h, c_cols, c, d):
        """``||g @ y[g_cols] + h|| <= c @ y[c_cols] + d``."""
        self._socs.append((np.asarray(g_cols, dtype=int), np.atleast_2d(np.asarray(g, float)),
                           np.atleast_1d(np.asarray(h, float)), np.asarray(c_cols, dtype=int),
                           np.atleast_1d(np.asarray(c, float)), float(d)))
        return len(self._socs) - 1

    @staticmethod
    def _stack(parts, n_rows, n):
        if not parts:
            return sp.csr_matrix((n_rows, n)), np.zeros(0)
        r = np.concatenate([p[0] for p in parts])
        c = np.concatenate([p[1] for p in parts])
        v = np.concatenate([p[2] for p in parts])
        rhs = np.concatenate([p[3] for p in parts])
        return sp.csr_matrix((v, (r, c)), shape=(n_rows, n)), rhs

    def build(self):
        n = self.n
        obj = np.zeros(n)
        for k, v in self.obj.items():
            obj[k] = v
        a_eq, b_eq = self._stack(self._eq, self._n_eq, n)
        a_in, b_in = self._stack(self._in, self._n_in, n)
        socs = []
        for g_cols, g, h, c_cols, c, d in self._socs:
            gr, gc = np.nonzero(g)
            gm = sp.csr_matrix((g[gr, gc], (gr, g_cols[gc])), shape=(g.shape[0], n))
            cv = np.zeros(n)
            if c_cols.size:
                np.add.at(cv, c_cols, c)
            socs.append(SocBlock(gm, h, cv, d))
        lb = np.concatenate(self._lb) if self._lb else np.zeros(0)
        ub = np.concatenate(self._ub) if self._ub else np.zeros(0)
        return ConeProgram(n, obj, a_eq, b_eq, a_in, b_in, socs, lb, ub, self.obj_const)


def quadratic_to_epigraph(builder, cols, p_mat, q_vec=None, const=0.0):
    """Add ``y' P y + q' y + const`` (over ``y[cols]``) to the objective.

    The quadratic part becomes an epigraph variable ``s >= ||R y||^2`` with
    ``R' R = P``, written as the rotated cone ``||[2 R y; s - 1]|| <= s + 1``.
    Returns the index of ``s`` (or ``None`` when the quadratic is zero).
    """
    p_mat = 0.5 * (np.asarray(p_mat, float) + np.asarray(p_mat, float).T)
    cols = np.asarray(cols)
    if q_vec is not None:
        builder.add_objective(cols, q_vec)
    w, v = np.linalg.eigh(p_mat)
    scale = max(1.0, np.abs(w).max(initial=0.0))
    if w.size and w.min() < -1e-10 * scale:
        raise DomainError("quadratic cost is not positive semidefinite")
    keep = w > 1e-12 * scale
    if not keep.any():
        return None
    r_mat = np.sqrt(w[keep])[:, None] * v[:, keep].T
    return least_squares_epigraph(builder, cols, r_mat, np.zeros(r_mat.shape[0]), const)


def least_squares_epigraph(builder, cols, r_mat, r_vec, const=0.0):
    """Add ``||R y[cols] - r||^2 + const`` to the objective via a rotated cone."""
    r_mat = np.atleast_2d(np.asarray(r_mat, float))
    r_vec = np.asarray(r_vec, float)
    s = int(builder.add_vars(1)[0])
    k = r_mat.shape[0]
    g = np.zeros((k + 1, len(cols) + 1))
    g[:k, : len(cols)] = 2.0 * r_mat
    g[k, -1] = 1.0
    h = np.concatenate([-2.0 * r_vec, [-1.0]])
    builder.add_soc(np.append(cols, s), g, h, [s], [1.0], 1.0)
    builder.add_objective([s], [1.0])
    builder.obj_const += const
    return s


# --------------------------------------------------------------------------
# Solving


_STATUS = {
    "Solved": OPTIMAL,
    "AlmostSolved": OPTIMAL,
    "PrimalInfeasible": INFEASIBLE,
    "AlmostPrimalInfeasible": INFEASIBLE,
    "DualInfeasible": UNBOUNDED,
    "AlmostDualInfeasible": UNBOUNDED,
}


class ConeSession:
    """A program loaded into the solver once and re-solved under new bounds."""

    def __init__(self, prog, tol=GAP_TOL, max_iter=MAX_ITER):
        self.prog = prog
        n = prog.n_vars
        self._lb_idx = np.flatnonzero(np.isfinite(prog.lb))
        self._ub_idx = np.flatnonzero(np.isfinite(prog.ub))
        eye = sp.identity(n, format="csr")
        blocks = [prog.a_eq, prog.a_in, eye[self._ub_idx], -eye[self._lb_idx]]
        rhs = [prog.b_eq, prog.b_in, prog.ub[self._ub_idx], -prog.lb[self._lb_idx]]
        cones = []
        if prog.a_eq.shape[0]:
            cones.append(clarabel.ZeroConeT(prog.a_eq.shape[0]))
        n_nonneg = prog.a_in.shape[0] + self._ub_idx.size + self._lb_idx.size
        if n_nonneg:
            cones.append(clarabel.NonnegativeConeT(n_nonneg))
        for blk in prog.socs:
            blocks.append(-sp.vstack([sp.csr_matrix(blk.c), blk.g]))
            rhs.append(np.concatenate([[blk.d], blk.h]))
            cones.append(clarabel.SecondOrderConeT(blk.size))
        self._a = sp.vstack(blocks, format="csc")
        self._b = np.concatenate(rhs) if rhs else np.zeros(0)
        self._ub_row0 = prog.a_eq.shape[0] + prog.a_in.shape[0]
        self._lb_row0 = self._ub_row0 + self._ub_idx.size
        self._cones = cones
        # csc positions of each column's own bound rows, kept when the column is zeroed
        self._bound_pos = {}
        bound_rows = set(range(self._ub_row0, self._lb_row0 + self._lb_idx.size))
        ptr, ind = self._a.indptr, self._a.indices
        for c in range(n):
            ks = [k for k in range(ptr[c], ptr[c + 1]) if ind[k] in bound_rows]
            if ks:
                self._bound_pos[c] = (ks[0], ks[-1] + 1)
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.presolve_enable = False
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.tol_feas = tol
        settings.max_iter = max_iter
        settings.max_threads = 1
        self._settings = settings
        self._p = sp.csc_matrix((n, n))
        self._solver = None

    def solve(self, lb=None, ub=None, objective=None):
        """Solve, optionally overriding the finite variable bounds.

        Variables with ``lb == ub`` are eliminated (their columns are zeroed
        and moved to the right-hand side) rather than pinned by two opposing
        inequalities, which would leave the cone without an interior.
        """
        prog = self.prog
        lb = prog.lb if lb is None else np.asarray(lb, float)
        ub = prog.ub if ub is None else np.asarray(ub, float)
        start = time.perf_counter()
        if np.any(lb > ub + 1e-12):
            return ConeSolution(INFEASIBLE, None, np.inf)
        fixed = np.flatnonzero(lb == ub)
        val = lb[fixed]
        lb_eff, ub_eff = lb.copy(), ub.copy()
        lb_eff[fixed] = val - 1.0
        ub_eff[fixed] = val + 1.0
        b = self._b.copy()
        b[self._ub_row0:self._lb_row0] = ub_eff[self._ub_idx]
        b[self._lb_row0:self._lb_row0 + self._lb_idx.size] = -lb_eff[self._lb_idx]
        a_data = self._a.data.copy()
        q = (prog.objective if objective is None else np.asarray(objective, float)).copy()
        const = 0.0
        if fixed.size:
            a_fix = self._a[:, fixed]
            b -= a_fix @ val
            ptr = self._a.indptr
            for c in fixed:
                a_data[ptr[c]:ptr[c + 1]] = 0.0
            # keep the bound rows of the fixed columns so the pattern is unchanged
            for c, v in zip(fixed, val):
                k = self._bound_pos.get(c)
                if k is not None:
                    a_data[k[0]:k[1]] = self._a.data[k[0]:k[1]]
            const = float(q[fixed] @ val)
            q[fixed] = 0.0
        a_mat = sp.csc_matrix((a_data, self._a.indices, self._a.indptr), shape=self._a.shape)
        out = None
        for fresh in (self._solver is None, True):
            if fresh:
                # a solver rebuilt from scratch recovers from state left by earlier updates
                self._solver = clarabel.DefaultSolver(self._p, q, a_mat, b, self._cones, self._settings)
            else:
                self._solver.update(q=q, A=a_mat, b=b)
            out = self._finish(self._solver.solve(), lb, ub, fixed, val, const, start, q)
            if out.status != NUMERICAL_FAILURE or fresh:
                break
        return out

    def _finish(self, sol, lb, ub, fixed, val, const, start, q):
        prog = self.prog
        elapsed = time.perf_counter() - start
        status = _STATUS.get(str(sol.status), NUMERICAL_FAILURE)
        if status != OPTIMAL:
            return ConeSolution(status, None, np.inf if status == INFEASIBLE else -np.inf,
                                iterations=sol.iterations, solve_time=elapsed)
        y = np.array(sol.x)
        y[fixed] = val
        res = prog.residuals(y)
        if lb is not prog.lb or ub is not prog.ub:
            res["bounds"] = float(max(np.maximum(lb - y, 0).max(initial=0), np.maximum(y - ub, 0).max(initial=0)))
        q_full = q.copy()
        q_full[fixed] = 0.0
        primal = float(q_full @ y) + const + prog.offset
        dual = float(sol.obj_val_dual) + const + prog.offset
        res["gap"] = abs(primal - dual) / max(1.0, abs(primal))
        if max(res.values()) > 1e-5:
            status = NUMERICAL_FAILURE
        return ConeSolution(status, y, primal, dual, res, sol.iterations, elapsed)


def solve(prog, tol=GAP_TOL, max_iter=MAX_ITER):
    """Solve a ``ConeProgram``; failures are reported in the status, never raised."""
    try:
        return ConeSession(prog, tol, max_iter).solve()
    except Exception:  # solver construction errors become a reported status
        return ConeSolution(NUMERICAL_FAILURE, None, np.nan)
