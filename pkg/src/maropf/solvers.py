"""Conic solver backends behind a narrow load/solve/read interface.

Programs are lowered once to the standard form

    minimize    q' u
    subject to  A u + s = b,   s in K = Zero x Nonneg x SOC x ...

with rotated cones rewritten as standard second-order cones via
``||x||^2 <= y*z  <=>  ||(y - z, 2x)|| <= y + z``. Clarabel is the default
backend; SCS can be selected for cross-checking. The reported primal
residual always comes from the package's own constraint evaluator, not from
the solver.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import conic
from .errors import SolverError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
_ENV_TOL = "MAROPF_SOLVER_TOL"
_ENV_BACKEND = "MAROPF_SOLVER"


@dataclass
class SolveStatus:
    """Outcome of one conic solve."""

    status: str                  # optimal | infeasible | unbounded | numerical-failure
    objective: float | None
    primal_residual: float
    dual_residual: float
    solve_time: float

    def __post_init__(self):
        if (self.status == "optimal") != (self.objective is not None):
            raise ValueError("objective must be present iff status is optimal")


class StandardForm:
    """Sparse standard-form data lowered from a ConicProgram."""

    def __init__(self, program: conic.ConicProgram):
        n = program.n_vars
        rows, cols, vals = [], [], []
        b = []
        mark = 0

        def put(expr, row, sign=1.0):
            for vid, c in expr.terms.items():
                rows.append(row)
                cols.append(vid)
                vals.append(sign * c)

        # zero cone: expr == 0  ->  A u = -const
        for expr, _ in program.eqs:
            put(expr, mark)
            b.append(-expr.const)
            mark += 1
        self.n_eq = mark

        # nonnegative cone: expr <= 0  ->  s = -const - coeffs*u >= 0
        for expr, _ in program.ineqs:
            put(expr, mark)
            b.append(-expr.const)
            mark += 1
        self.n_ineq = mark - self.n_eq

        # SOC blocks: s_block = (t; x) must equal the expression values,
        # so A rows carry -coeffs and b carries +const.
        self.soc_dims = []
        def put_block(exprs):
            nonlocal mark
            for e in exprs:
                put(e, mark, sign=-1.0)
                b.append(e.const)
                mark += 1
            self.soc_dims.append(len(exprs))

        for t, xs, _ in program.socs:
            put_block([t] + xs)
        for y, z, xs, _ in program.rsocs:
            put_block([y + z, y - z] + [2.0 * e for e in xs])

        self.A = sparse.csc_matrix(
            (vals, (rows, cols)), shape=(mark, n), dtype=float
        )
        self.b = np.asarray(b, dtype=float)
        self.q = np.zeros(n)
        for vid, c in program.objective.terms.items():
            self.q[vid] = c
        self.obj_const = program.objective.const
        self.n = n


def _pick_backend(name=None):
    name = name or os.environ.get(_ENV_BACKEND)
    if name:
        return name
    try:
        import clarabel  # noqa: F401
        return "clarabel"
    except ImportError:
        pass
    try:
        import scs  # noqa: F401
        return "scs"
    except ImportError:
        pass
    raise SolverError("no conic backend available (install clarabel or scs)")


def _solve_clarabel(sf: StandardForm, tol):
    import clarabel

    cones = []
    if sf.n_eq:
        cones.append(clarabel.ZeroConeT(sf.n_eq))
    if sf.n_ineq:
        cones.append(clarabel.NonnegativeConeT(sf.n_ineq))
    cones.extend(clarabel.SecondOrderConeT(d) for d in sf.soc_dims)

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_feas = tol
    # gap tightened below feasibility so cone complementarity slack stays
    # well under the 1e-6 exactness tolerances checked downstream
    settings.tol_gap_abs = tol * 1e-2
    settings.tol_gap_rel = tol * 1e-2
    P = sparse.csc_matrix((sf.n, sf.n))
    solver = clarabel.DefaultSolver(P, sf.q, sf.A, sf.b, cones, settings)
    sol = solver.solve()

    name = str(sol.status)
    if name in ("Solved", "AlmostSolved"):
        if name == "AlmostSolved":
            log.warning("clarabel returned AlmostSolved; accepting with re-check")
        status = "optimal"
    elif name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        status = "infeasible"
    elif name in ("DualInfeasible", "AlmostDualInfeasible"):
        status = "unbounded"
    else:
        status = "numerical-failure"
    x = np.asarray(sol.x, dtype=float)
    return status, x, float(sol.r_dual), float(sol.solve_time)


def _solve_scs(sf: StandardForm, tol):
    import scs

    data = {"A": sf.A.tocsc(), "b": sf.b, "c": sf.q,
            "P": sparse.csc_matrix((sf.n, sf.n))}
    cone = {"z": sf.n_eq, "l": sf.n_ineq, "q": list(sf.soc_dims)}
    t0 = time.perf_counter()
    out = scs.solve(data, cone, verbose=False, eps_abs=tol, eps_rel=tol)
    elapsed = time.perf_counter() - t0
    name = out["info"]["status"]
    if "solved" in name.lower():
        status = "optimal"
    elif "infeasible" in name.lower():
        status = "infeasible"
    elif "unbounded" in name.lower():
        status = "unbounded"
    else:
        status = "numerical-failure"
    x = np.asarray(out["x"], dtype=float)
    return status, x, float(out["info"].get("res_dual", np.nan)), elapsed


_BACKENDS = {"clarabel": _solve_clarabel, "scs": _solve_scs}


def solve(program: conic.ConicProgram, tol=None, backend=None):
    """Solve a program; returns ``(SolveStatus, assignment)``.

    The assignment is a dense array indexed by variable id (all-NaN when the
    solve did not reach optimality).
    """
    if tol is None:
        tol = float(os.environ.get(_ENV_TOL, DEFAULT_TOL))
    name = _pick_backend(backend)
    if name not in _BACKENDS:
        raise SolverError(f"unknown solver backend {name!r}")

    sf = StandardForm(program)
    t0 = time.perf_counter()
    status, x, r_dual, solver_time = _BACKENDS[name](sf, tol)
    elapsed = time.perf_counter() - t0

    if status == "optimal":
        residual = conic.evaluate(program, x).max_violation
        objective = float(sf.q @ x + sf.obj_const)
    else:
        residual = np.nan
        objective = None
        x = np.full(sf.n, np.nan)
    st = SolveStatus(
        status=status,
        objective=objective,
        primal_residual=float(residual),
        dual_residual=r_dual,
        solve_time=solver_time if solver_time else elapsed,
    )
    return st, x
