"""Dispatch program builders and the iterative mode-guess algorithm.

Three formulations share the branch-flow machinery:

* ``build_maropf`` — the augmented relaxation: conservative upper/lower
  bound flows carry the security limits, and the battery uses the convex
  conversion-loss model with a per-step charge/discharge guess.
* ``build_ropf`` — the plain cone relaxation with limits applied directly
  to the physical variables (no auxiliary bounds).
* ``build_relaxed_linear`` — the split charge/discharge battery baseline
  (no complementarity), on the same augmented grid model.

``iterate_maropf`` re-derives the mode guesses from the solved reservoir
powers until the guess is a fixed point; ``enumerate_modes_optimum`` brute
forces every guess pattern at desk scale.
"""

from __future__ import annotations

import itertools
import logging
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import bess as bess_mod
from . import conic, powerflow, solvers
from .conditions import check_conditions
from .conic import ConicProgram, LinExpr
from .errors import BuildError, EnumerationLimitError, SolverError
from .grid import NetworkCase

log = logging.getLogger(__name__)

MODE_EPS = 1e-7       # |p_r| below this is mode-agnostic
MAX_ITERS = 10


# ---------------------------------------------------------------------------
# solution containers
# ---------------------------------------------------------------------------


@dataclass
class DispatchSolution:
    """Decision variables of one solved program, laid out per the case."""

    method: str
    objective: float
    bess_nodes: tuple
    ddg_nodes: tuple
    p_r: np.ndarray               # (nB, T) reservoir power
    q_b: np.ndarray               # (nB, T)
    pb_ub: np.ndarray             # (nB, T) terminal power (upper bound var)
    pb_lb: np.ndarray             # (nB, T) terminal power (guessed-mode var)
    fb_ub: np.ndarray             # (nB, T)
    e_lo: np.ndarray              # (nB, T)
    e_hi: np.ndarray              # (nB, T)
    e_dsc: np.ndarray             # (nB,)
    ddg_p: np.ndarray             # (nD, T)
    ddg_q: np.ndarray             # (nD, T)
    P: np.ndarray                 # (L+1, T) sending-end active flow
    Q: np.ndarray                 # (L+1, T)
    f: np.ndarray                 # (L+1, T)
    v: np.ndarray                 # (L+1, T); row 0 pinned to v0
    rho: np.ndarray               # (T,) import epigraph
    Pub: np.ndarray | None = None
    Qub: np.ndarray | None = None
    Plb: np.ndarray | None = None
    Qlb: np.ndarray | None = None
    vub: np.ndarray | None = None
    fub: np.ndarray | None = None
    charging: np.ndarray | None = None    # (nB, T) bool, mode guess used
    p_ch: np.ndarray | None = None        # linear-split models only
    p_dsc: np.ndarray | None = None

    _ARRAYS = ("p_r", "q_b", "pb_ub", "pb_lb", "fb_ub", "e_lo", "e_hi",
               "e_dsc", "ddg_p", "ddg_q", "P", "Q", "f", "v", "rho",
               "Pub", "Qub", "Plb", "Qlb", "vub", "fub", "charging",
               "p_ch", "p_dsc")

    def to_dict(self):
        out = {"method": self.method, "objective": self.objective,
               "bess_nodes": list(self.bess_nodes),
               "ddg_nodes": list(self.ddg_nodes)}
        for name in self._ARRAYS:
            arr = getattr(self, name)
            out[name] = None if arr is None else np.asarray(arr).tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        kwargs = {"method": d["method"], "objective": d["objective"],
                  "bess_nodes": tuple(d.get("bess_nodes", ())),
                  "ddg_nodes": tuple(d.get("ddg_nodes", ()))}
        for name in cls._ARRAYS:
            val = d.get(name)
            if val is None:
                kwargs[name] = None
            elif name == "charging":
                kwargs[name] = np.asarray(val, dtype=bool)
            else:
                kwargs[name] = np.asarray(val, dtype=float)
        return cls(**kwargs)


@dataclass
class IterationRecord:
    k: int
    objective: float
    modes: str
    flips: int
    status: str
    wall_time: float


@dataclass
class IterationLog:
    records: list = field(default_factory=list)
    converged: bool = False
    iterates: list = field(default_factory=list)

    def to_csv_text(self):
        lines = ["iteration,objective,modes,flips,status,wall_time_s"]
        for r in self.records:
            lines.append(f"{r.k},{r.objective!r},{r.modes},{r.flips},"
                         f"{r.status},{r.wall_time:.6f}")
        return "\n".join(lines) + "\n"


def _modes_str(charging):
    if charging is None or charging.size == 0:
        return ""
    return "|".join("".join("c" if c else "d" for c in row)
                    for row in charging)


# ---------------------------------------------------------------------------
# shared builder pieces
# ---------------------------------------------------------------------------


def _grid_ids(prog, case, name):
    L, T = case.n_lines, case.n_steps
    ids = np.full((L + 1, T), -1, dtype=int)
    for l in case.lines():
        for t in range(T):
            ids[l, t] = prog.add_var(name, l, t)
    return ids


def _device_ids(prog, nodes, name, T):
    ids = np.full((len(nodes), T), -1, dtype=int)
    for i, node in enumerate(nodes):
        for t in range(T):
            ids[i, t] = prog.add_var(name, node, t)
    return ids


def _injections(case, gp, gq, bess_p, bess_q):
    """Nodal net-consumption expressions: fixed load + devices at the node.

    ``bess_p``/``bess_q`` map a battery node to its per-step terminal power
    expression (the caller chooses which bound variable or affine split
    represents the terminal).
    """
    L, T = case.n_lines, case.n_steps
    inj_p = [[LinExpr(const=case.p_load[l, t]) for t in range(T)]
             for l in range(L + 1)]
    inj_q = [[LinExpr(const=case.q_load[l, t]) for t in range(T)]
             for l in range(L + 1)]
    for g, spec in enumerate(case.ddgs):
        for t in range(T):
            inj_p[spec.node][t].add_term(gp[g, t], 1.0)
            inj_q[spec.node][t].add_term(gq[g, t], 1.0)
    for node, exprs in bess_p.items():
        for t in range(T):
            inj_p[node][t] += exprs[t]
    for node, exprs in bess_q.items():
        for t in range(T):
            inj_q[node][t] += exprs[t]
    return inj_p, inj_q


def _flow_balance(prog, case, P, Q, inj_p, inj_q, f=None, tag=""):
    """Kirchhoff current law per line: flow = injection + children + loss."""
    ch = case.children()
    for l in case.lines():
        r, x = case.r[l], case.x[l]
        for t in range(case.n_steps):
            ep = LinExpr.of(P[l, t]) - inj_p[l][t]
            eq = LinExpr.of(Q[l, t]) - inj_q[l][t]
            for m in ch[l]:
                ep.add_term(P[m, t], -1.0)
                eq.add_term(Q[m, t], -1.0)
            if f is not None:
                ep.add_term(f[l, t], -r)
                eq.add_term(f[l, t], -x)
            prog.add_eq(ep, f"{tag}balP[{l},{t}]")
            prog.add_eq(eq, f"{tag}balQ[{l},{t}]")


def _voltage_drop(prog, case, v, P, Q, f=None, tag=""):
    for l in case.lines():
        r, x = case.r[l], case.x[l]
        z2 = r * r + x * x
        up = case.up[l]
        for t in range(case.n_steps):
            expr = LinExpr.of(v[l, t])
            if up == 0:
                expr -= case.v0
            else:
                expr.add_term(v[up, t], -1.0)
            expr.add_term(P[l, t], 2.0 * r)
            expr.add_term(Q[l, t], 2.0 * x)
            if f is not None:
                expr.add_term(f[l, t], -z2)
            prog.add_eq(expr, f"{tag}vdrop[{l},{t}]")


def _v_up_expr(case, v, l, t):
    up = case.up[l]
    return LinExpr(const=case.v0) if up == 0 else LinExpr.of(v[up, t])


def _flow_cones(prog, case, P, Q, f, v, tag=""):
    """Relaxed current definition |S|^2 <= f * v_up as rotated cones."""
    for l in case.lines():
        for t in range(case.n_steps):
            prog.add_rsoc(LinExpr.of(f[l, t]), _v_up_expr(case, v, l, t),
                          [LinExpr.of(P[l, t]), LinExpr.of(Q[l, t])],
                          f"{tag}cone[{l},{t}]")


def _import_objective(prog, case, P):
    """Epigraph of the energy-purchase cost; exports earn nothing."""
    roots = case.root_lines()
    obj = LinExpr()
    for t in range(case.n_steps):
        rho = prog.add_var("rho", t)
        prog.add_ineq(LinExpr({rho: -1.0}), f"rho_nonneg[{t}]")
        expr = LinExpr({rho: -1.0})
        for l in roots:
            expr.add_term(P[l, t], 1.0)
        prog.add_ineq(expr, f"rho_import[{t}]")
        obj.add_term(rho, case.prices[t])
    prog.set_objective(obj)


def _ddg_limits(prog, case, gp, gq):
    for g, spec in enumerate(case.ddgs):
        for t in range(case.n_steps):
            prog.add_ineq(LinExpr({gp[g, t]: -1.0}, spec.p_min),
                          f"ddg[{spec.node}].p_min[{t}]")
            prog.add_ineq(LinExpr({gp[g, t]: 1.0}, -spec.p_max),
                          f"ddg[{spec.node}].p_max[{t}]")
            prog.add_soc(LinExpr(const=spec.s_max),
                         [LinExpr.of(gp[g, t]), LinExpr.of(gq[g, t])],
                         f"ddg[{spec.node}].capacity[{t}]")


def _ramp_limits(prog, case, p_r_expr, tag=""):
    """p_r_expr(b, t) -> LinExpr of the reservoir power."""
    for b, spec in enumerate(case.bess):
        for t in range(1, case.n_steps):
            step = p_r_expr(b, t) - p_r_expr(b, t - 1)
            prog.add_ineq(spec.ramp_dn - step,
                          f"{tag}bess[{spec.node}].ramp_dn[{t}]")
            prog.add_ineq(step - spec.ramp_up,
                          f"{tag}bess[{spec.node}].ramp_up[{t}]")


# ---------------------------------------------------------------------------
# MAROPF builder
# ---------------------------------------------------------------------------


def _check_charging(case, charging):
    nB, T = len(case.bess), case.n_steps
    if charging is None:
        if nB:
            raise BuildError("mode guess required for every battery and step")
        return np.zeros((0, T), dtype=bool)
    charging = np.asarray(charging, dtype=bool)
    if charging.shape != (nB, T):
        raise BuildError(f"mode guess has shape {charging.shape}, "
                         f"expected {(nB, T)}")
    return charging


def build_maropf(case: NetworkCase, charging) -> ConicProgram:
    """Augmented relaxed dispatch program for a fixed mode-guess pattern."""
    charging = _check_charging(case, charging)
    T = case.n_steps
    prog = ConicProgram(name=f"maropf:{case.name}")

    P = _grid_ids(prog, case, "P")
    Q = _grid_ids(prog, case, "Q")
    f = _grid_ids(prog, case, "f")
    v = _grid_ids(prog, case, "v")
    Pub = _grid_ids(prog, case, "Pub")
    Qub = _grid_ids(prog, case, "Qub")
    Plb = _grid_ids(prog, case, "Plb")
    Qlb = _grid_ids(prog, case, "Qlb")
    vub = _grid_ids(prog, case, "vub")
    fub = _grid_ids(prog, case, "fub")
    mP = _grid_ids(prog, case, "mP")
    mQ = _grid_ids(prog, case, "mQ")

    nodes_d = tuple(s.node for s in case.ddgs)
    gp = _device_ids(prog, nodes_d, "gp", T)
    gq = _device_ids(prog, nodes_d, "gq", T)

    handles = {}
    for spec in case.bess:
        h = bess_mod.__dict__  # placeholder to appease linters; replaced below
    handles = {}
    for spec in case.bess:
        n = spec.node
        h = _BessHandles(
            p_r=[prog.add_var("bpr", n, t) for t in range(T)],
            q_b=[prog.add_var("bqb", n, t) for t in range(T)],
            p_ub=[prog.add_var("bpub", n, t) for t in range(T)],
            p_lb=[prog.add_var("bplb", n, t) for t in range(T)],
            f_ub=[prog.add_var("bfb", n, t) for t in range(T)],
            e_lo=[prog.add_var("belo", n, t) for t in range(T)],
            e_hi=[prog.add_var("behi", n, t) for t in range(T)],
            v=[v[n, t] for t in range(T)],
            e_dsc=(prog.add_var("bedsc", n)
                   if np.isfinite(spec.n_dsc) else None),
        )
        handles[n] = h

    term_ub = {n: [LinExpr.of(h.p_ub[t]) for t in range(T)]
               for n, h in handles.items()}
    term_lb = {n: [LinExpr.of(h.p_lb[t]) for t in range(T)]
               for n, h in handles.items()}
    term_q = {n: [LinExpr.of(h.q_b[t]) for t in range(T)]
              for n, h in handles.items()}

    # physical recursion (losses, terminal upper bound) and its cone
    inj_p, inj_q = _injections(case, gp, gq, term_ub, term_q)
    _flow_balance(prog, case, P, Q, inj_p, inj_q, f=f)
    _voltage_drop(prog, case, v, P, Q, f=f)
    _flow_cones(prog, case, P, Q, f, v)

    # lossless lower-bound recursion driving the voltage upper bound
    inj_p, inj_q = _injections(case, gp, gq, term_lb, term_q)
    _flow_balance(prog, case, Plb, Qlb, inj_p, inj_q, f=None, tag="lb.")
    _voltage_drop(prog, case, vub, Plb, Qlb, f=None, tag="ub.")

    # upper-bound recursion with the current upper bound in the loss term
    inj_p, inj_q = _injections(case, gp, gq, term_ub, term_q)
    _flow_balance(prog, case, Pub, Qub, inj_p, inj_q, f=fub, tag="ub.")

    # current upper bound: cone over the componentwise flow magnitudes
    for l in case.lines():
        for t in range(T):
            for sign in (1.0, -1.0):
                prog.add_ineq(LinExpr({Pub[l, t]: sign, mP[l, t]: -1.0}),
                              f"mP[{l},{t}]")
                prog.add_ineq(LinExpr({Plb[l, t]: sign, mP[l, t]: -1.0}),
                              f"mP[{l},{t}]")
                prog.add_ineq(LinExpr({Qub[l, t]: sign, mQ[l, t]: -1.0}),
                              f"mQ[{l},{t}]")
                prog.add_ineq(LinExpr({Qlb[l, t]: sign, mQ[l, t]: -1.0}),
                              f"mQ[{l},{t}]")
            prog.add_rsoc(LinExpr.of(fub[l, t]), _v_up_expr(case, v, l, t),
                          [LinExpr.of(mP[l, t]), LinExpr.of(mQ[l, t])],
                          f"ub.cone[{l},{t}]")

    # security limits on the conservative bounds
    for l in case.lines():
        for t in range(T):
            prog.add_ineq(LinExpr({v[l, t]: -1.0}, case.v_min[l]),
                          f"v_min[{l},{t}]")
            prog.add_ineq(LinExpr({vub[l, t]: 1.0}, -case.v_max[l]),
                          f"v_max[{l},{t}]")
            prog.add_ineq(LinExpr({fub[l, t]: 1.0}, -case.i_max[l]),
                          f"i_max[{l},{t}]")
            prog.add_ineq(LinExpr({P[l, t]: 1.0, Pub[l, t]: -1.0}),
                          f"P_le_Pub[{l},{t}]")
            prog.add_ineq(LinExpr({Pub[l, t]: 1.0}, -case.p_max[l]),
                          f"P_max[{l},{t}]")
            prog.add_ineq(LinExpr({Q[l, t]: 1.0, Qub[l, t]: -1.0}),
                          f"Q_le_Qub[{l},{t}]")
            prog.add_ineq(LinExpr({Qub[l, t]: 1.0}, -case.q_max[l]),
                          f"Q_max[{l},{t}]")

    # battery relaxation and limits
    for b, spec in enumerate(case.bess):
        h = handles[spec.node]
        bess_mod.relaxed_bess_constraints(spec, charging[b], prog, h, case.dt)
        n = spec.node
        for t in range(T):
            prog.add_ineq(LinExpr({h.f_ub[t]: 1.0}, -spec.i_max),
                          f"bess[{n}].i_max[{t}]")
            prog.add_ineq(LinExpr({h.e_lo[t]: -1.0},
                                  spec.soc_min * spec.e_cap),
                          f"bess[{n}].soc_min[{t}]")
            prog.add_ineq(LinExpr({h.e_hi[t]: 1.0},
                                  -spec.soc_max * spec.e_cap),
                          f"bess[{n}].soc_max[{t}]")
            prog.add_ineq(LinExpr({h.p_ub[t]: -1.0}, spec.p_min),
                          f"bess[{n}].p_min[{t}]")
            prog.add_ineq(LinExpr({h.p_ub[t]: 1.0}, -spec.p_max),
                          f"bess[{n}].p_max[{t}]")
        if h.e_dsc is not None:
            prog.add_ineq(LinExpr({h.e_dsc: 1.0}, -spec.n_dsc * spec.e_cap),
                          f"bess[{n}].cycles")
    _ramp_limits(prog, case,
                 lambda b, t: LinExpr.of(handles[case.bess[b].node].p_r[t]))

    _ddg_limits(prog, case, gp, gq)
    _import_objective(prog, case, P)
    return prog


class _BessHandles:
    """Variable-id bundle consumed by the battery constraint installer."""

    __slots__ = ("p_r", "q_b", "p_ub", "p_lb", "f_ub", "e_lo", "e_hi",
                 "v", "e_dsc")

    def __init__(self, **kw):
        for name in self.__slots__:
            setattr(self, name, kw.get(name))


# ---------------------------------------------------------------------------
# baseline builders
# ---------------------------------------------------------------------------


def _linear_bess(prog, case, v):
    """Split-variable battery model; returns handles and terminal exprs."""
    T = case.n_steps
    ids = {}
    term_p, term_q = {}, {}
    for spec in case.bess:
        n = spec.node
        pch = [prog.add_var("bpch", n, t) for t in range(T)]
        pdsc = [prog.add_var("bpdsc", n, t) for t in range(T)]
        qb = [prog.add_var("bqb", n, t) for t in range(T)]
        fb = [prog.add_var("bfb", n, t) for t in range(T)]
        e = [prog.add_var("be", n, t) for t in range(T)]
        ids[n] = {"pch": pch, "pdsc": pdsc, "qb": qb, "fb": fb, "e": e}
        term_p[n] = [LinExpr({pch[t]: 1.0 / spec.eta_c,
                              pdsc[t]: -spec.eta_d}) for t in range(T)]
        term_q[n] = [LinExpr.of(qb[t]) for t in range(T)]

        cap_ch = max(0.0, spec.eta_c * spec.p_max)
        cap_dsc = max(0.0, -spec.p_min / spec.eta_d)
        for t in range(T):
            prog.add_ineq(LinExpr({pch[t]: -1.0}), f"bess[{n}].pch_nn[{t}]")
            prog.add_ineq(LinExpr({pdsc[t]: -1.0}), f"bess[{n}].pdsc_nn[{t}]")
            prog.add_ineq(LinExpr({pch[t]: 1.0}, -cap_ch),
                          f"bess[{n}].pch_cap[{t}]")
            prog.add_ineq(LinExpr({pdsc[t]: 1.0}, -cap_dsc),
                          f"bess[{n}].pdsc_cap[{t}]")
            prog.add_ineq(spec.p_min - term_p[n][t],
                          f"bess[{n}].p_min[{t}]")
            prog.add_ineq(term_p[n][t] - spec.p_max,
                          f"bess[{n}].p_max[{t}]")
            prog.add_ineq(LinExpr({fb[t]: -1.0}), f"bess[{n}].fb_nn[{t}]")
            prog.add_ineq(LinExpr({fb[t]: 1.0}, -spec.i_max),
                          f"bess[{n}].i_max[{t}]")
            prog.add_rsoc(LinExpr.of(fb[t]), LinExpr.of(v[n, t]),
                          [term_p[n][t], LinExpr.of(qb[t])],
                          f"bess[{n}].inverter_cone[{t}]")
            prev = LinExpr.of(e[t - 1]) if t else LinExpr(const=spec.e_init)
            prog.add_eq(LinExpr.of(e[t]) - prev
                        - case.dt * LinExpr({pch[t]: 1.0, pdsc[t]: -1.0}),
                        f"bess[{n}].e[{t}]")
            prog.add_ineq(LinExpr({e[t]: -1.0}, spec.soc_min * spec.e_cap),
                          f"bess[{n}].soc_min[{t}]")
            prog.add_ineq(LinExpr({e[t]: 1.0}, -spec.soc_max * spec.e_cap),
                          f"bess[{n}].soc_max[{t}]")
        if np.isfinite(spec.n_dsc):
            budget = LinExpr(const=-spec.n_dsc * spec.e_cap)
            for t in range(T):
                budget.add_term(pdsc[t], case.dt)
            prog.add_ineq(budget, f"bess[{n}].cycles")
    _ramp_limits(
        prog, case,
        lambda b, t: LinExpr({ids[case.bess[b].node]["pch"][t]: 1.0,
                              ids[case.bess[b].node]["pdsc"][t]: -1.0}))
    return ids, term_p, term_q


def build_ropf(case: NetworkCase) -> ConicProgram:
    """Plain cone relaxation with limits applied directly to v, f, S."""
    T = case.n_steps
    prog = ConicProgram(name=f"ropf:{case.name}")
    P = _grid_ids(prog, case, "P")
    Q = _grid_ids(prog, case, "Q")
    f = _grid_ids(prog, case, "f")
    v = _grid_ids(prog, case, "v")
    nodes_d = tuple(s.node for s in case.ddgs)
    gp = _device_ids(prog, nodes_d, "gp", T)
    gq = _device_ids(prog, nodes_d, "gq", T)
    _, term_p, term_q = _linear_bess(prog, case, v)

    inj_p, inj_q = _injections(case, gp, gq, term_p, term_q)
    _flow_balance(prog, case, P, Q, inj_p, inj_q, f=f)
    _voltage_drop(prog, case, v, P, Q, f=f)
    _flow_cones(prog, case, P, Q, f, v)

    for l in case.lines():
        for t in range(T):
            prog.add_ineq(LinExpr({v[l, t]: -1.0}, case.v_min[l]),
                          f"v_min[{l},{t}]")
            prog.add_ineq(LinExpr({v[l, t]: 1.0}, -case.v_max[l]),
                          f"v_max[{l},{t}]")
            prog.add_ineq(LinExpr({f[l, t]: 1.0}, -case.i_max[l]),
                          f"i_max[{l},{t}]")
            prog.add_ineq(LinExpr({P[l, t]: 1.0}, -case.p_max[l]),
                          f"P_max[{l},{t}]")
            prog.add_ineq(LinExpr({Q[l, t]: 1.0}, -case.q_max[l]),
                          f"Q_max[{l},{t}]")

    _ddg_limits(prog, case, gp, gq)
    _import_objective(prog, case, P)
    return prog


def build_relaxed_linear(case: NetworkCase) -> ConicProgram:
    """Split-battery baseline on the full augmented grid model."""
    T = case.n_steps
    prog = ConicProgram(name=f"relaxed-linear:{case.name}")
    P = _grid_ids(prog, case, "P")
    Q = _grid_ids(prog, case, "Q")
    f = _grid_ids(prog, case, "f")
    v = _grid_ids(prog, case, "v")
    Pub = _grid_ids(prog, case, "Pub")
    Qub = _grid_ids(prog, case, "Qub")
    Plb = _grid_ids(prog, case, "Plb")
    Qlb = _grid_ids(prog, case, "Qlb")
    vub = _grid_ids(prog, case, "vub")
    fub = _grid_ids(prog, case, "fub")
    mP = _grid_ids(prog, case, "mP")
    mQ = _grid_ids(prog, case, "mQ")
    nodes_d = tuple(s.node for s in case.ddgs)
    gp = _device_ids(prog, nodes_d, "gp", T)
    gq = _device_ids(prog, nodes_d, "gq", T)
    _, term_p, term_q = _linear_bess(prog, case, v)

    # affine terminal power serves as its own lower and upper bound
    inj_p, inj_q = _injections(case, gp, gq, term_p, term_q)
    _flow_balance(prog, case, P, Q, inj_p, inj_q, f=f)
    _voltage_drop(prog, case, v, P, Q, f=f)
    _flow_cones(prog, case, P, Q, f, v)
    inj_p, inj_q = _injections(case, gp, gq, term_p, term_q)
    _flow_balance(prog, case, Plb, Qlb, inj_p, inj_q, f=None, tag="lb.")
    _voltage_drop(prog, case, vub, Plb, Qlb, f=None, tag="ub.")
    inj_p, inj_q = _injections(case, gp, gq, term_p, term_q)
    _flow_balance(prog, case, Pub, Qub, inj_p, inj_q, f=fub, tag="ub.")

    for l in case.lines():
        for t in range(T):
            for sign in (1.0, -1.0):
                prog.add_ineq(LinExpr({Pub[l, t]: sign, mP[l, t]: -1.0}),
                              f"mP[{l},{t}]")
                prog.add_ineq(LinExpr({Plb[l, t]: sign, mP[l, t]: -1.0}),
                              f"mP[{l},{t}]")
                prog.add_ineq(LinExpr({Qub[l, t]: sign, mQ[l, t]: -1.0}),
                              f"mQ[{l},{t}]")
                prog.add_ineq(LinExpr({Qlb[l, t]: sign, mQ[l, t]: -1.0}),
                              f"mQ[{l},{t}]")
            prog.add_rsoc(LinExpr.of(fub[l, t]), _v_up_expr(case, v, l, t),
                          [LinExpr.of(mP[l, t]), LinExpr.of(mQ[l, t])],
                          f"ub.cone[{l},{t}]")
            prog.add_ineq(LinExpr({v[l, t]: -1.0}, case.v_min[l]),
                          f"v_min[{l},{t}]")
            prog.add_ineq(LinExpr({vub[l, t]: 1.0}, -case.v_max[l]),
                          f"v_max[{l},{t}]")
            prog.add_ineq(LinExpr({fub[l, t]: 1.0}, -case.i_max[l]),
                          f"i_max[{l},{t}]")
            prog.add_ineq(LinExpr({P[l, t]: 1.0, Pub[l, t]: -1.0}),
                          f"P_le_Pub[{l},{t}]")
            prog.add_ineq(LinExpr({Pub[l, t]: 1.0}, -case.p_max[l]),
                          f"P_max[{l},{t}]")
            prog.add_ineq(LinExpr({Q[l, t]: 1.0, Qub[l, t]: -1.0}),
                          f"Q_le_Qub[{l},{t}]")
            prog.add_ineq(LinExpr({Qub[l, t]: 1.0}, -case.q_max[l]),
                          f"Q_max[{l},{t}]")

    _ddg_limits(prog, case, gp, gq)
    _import_objective(prog, case, P)
    return prog


# ---------------------------------------------------------------------------
# solution extraction
# ---------------------------------------------------------------------------


def _pull_grid(prog, x, case, name, const0=0.0):
    L, T = case.n_lines, case.n_steps
    out = np.full((L + 1, T), const0, dtype=float)
    for l in case.lines():
        for t in range(T):
            out[l, t] = prog.get(x, name, l, t)
    return out


def _pull_device(prog, x, nodes, name, T):
    out = np.zeros((len(nodes), T))
    for i, node in enumerate(nodes):
        for t in range(T):
            out[i, t] = prog.get(x, name, node, t)
    return out


def extract_solution(prog, x, case, method, objective, charging=None):
    """Read a solved assignment back into a DispatchSolution."""
    T = case.n_steps
    nodes_b = tuple(s.node for s in case.bess)
    nodes_d = tuple(s.node for s in case.ddgs)
    augmented = prog.has_var("vub", 1, 0) if case.n_lines else False
    linear = prog.has_var("bpch", nodes_b[0], 0) if nodes_b else False

    sol = DispatchSolution(
        method=method,
        objective=objective,
        bess_nodes=nodes_b,
        ddg_nodes=nodes_d,
        p_r=np.zeros((len(nodes_b), T)),
        q_b=_pull_device(prog, x, nodes_b, "bqb", T),
        pb_ub=np.zeros((len(nodes_b), T)),
        pb_lb=np.zeros((len(nodes_b), T)),
        fb_ub=_pull_device(prog, x, nodes_b, "bfb", T),
        e_lo=np.zeros((len(nodes_b), T)),
        e_hi=np.zeros((len(nodes_b), T)),
        e_dsc=np.zeros(len(nodes_b)),
        ddg_p=_pull_device(prog, x, nodes_d, "gp", T),
        ddg_q=_pull_device(prog, x, nodes_d, "gq", T),
        P=_pull_grid(prog, x, case, "P"),
        Q=_pull_grid(prog, x, case, "Q"),
        f=_pull_grid(prog, x, case, "f"),
        v=_pull_grid(prog, x, case, "v"),
        rho=np.array([prog.get(x, "rho", t) for t in range(T)]),
        charging=None if charging is None else np.asarray(charging,
                                                          dtype=bool),
    )
    sol.v[0, :] = case.v0
    if augmented:
        sol.Pub = _pull_grid(prog, x, case, "Pub")
        sol.Qub = _pull_grid(prog, x, case, "Qub")
        sol.Plb = _pull_grid(prog, x, case, "Plb")
        sol.Qlb = _pull_grid(prog, x, case, "Qlb")
        sol.vub = _pull_grid(prog, x, case, "vub", const0=case.v0)
        sol.fub = _pull_grid(prog, x, case, "fub")
        sol.vub[0, :] = case.v0

    if linear:
        sol.p_ch = _pull_device(prog, x, nodes_b, "bpch", T)
        sol.p_dsc = _pull_device(prog, x, nodes_b, "bpdsc", T)
        sol.p_r = sol.p_ch - sol.p_dsc
        for b, spec in enumerate(case.bess):
            term = sol.p_ch[b] / spec.eta_c - spec.eta_d * sol.p_dsc[b]
            sol.pb_ub[b] = term
            sol.pb_lb[b] = term
            e = _pull_device(prog, x, (spec.node,), "be", T)[0]
            sol.e_lo[b] = e
            sol.e_hi[b] = e
            sol.e_dsc[b] = float(np.sum(sol.p_dsc[b]) * case.dt)
    elif nodes_b:
        sol.p_r = _pull_device(prog, x, nodes_b, "bpr", T)
        sol.pb_ub = _pull_device(prog, x, nodes_b, "bpub", T)
        sol.pb_lb = _pull_device(prog, x, nodes_b, "bplb", T)
        sol.e_lo = _pull_device(prog, x, nodes_b, "belo", T)
        sol.e_hi = _pull_device(prog, x, nodes_b, "behi", T)
        for b, spec in enumerate(case.bess):
            if prog.has_var("bedsc", spec.node):
                sol.e_dsc[b] = prog.get(x, "bedsc", spec.node)
            elif spec.eta_c * spec.eta_d < 1.0:
                sol.e_dsc[b] = bess_mod.discharge_energy(
                    sol.pb_ub[b], sol.p_r[b], spec, case.dt)
            else:
                sol.e_dsc[b] = float(
                    np.sum(np.maximum(-sol.p_r[b], 0.0)) * case.dt)
    return sol


# ---------------------------------------------------------------------------
# iteration, enumeration
# ---------------------------------------------------------------------------


def default_initial_guess(case: NetworkCase):
    """Charging everywhere except the top price quartile (arbitrage prior)."""
    thresh = np.quantile(case.prices, 0.75)
    charging = case.prices < thresh
    return np.tile(charging, (len(case.bess), 1))


def _solve_or_raise(prog, tol, backend, context):
    status, x = solvers.solve(prog, tol=tol, backend=backend)
    if status.status != "optimal":
        with tempfile.NamedTemporaryFile(
                mode="w", suffix=".cprog", prefix="maropf-",
                delete=False) as fh:
            fh.write(conic.dump_text(prog))
            dump_path = fh.name
        raise SolverError(
            f"{context}: solver returned {status.status} "
            f"(program dumped to {dump_path})",
            status=status.status, dump_path=dump_path)
    return status, x


def iterate_maropf(case: NetworkCase, init_charging=None,
                   max_iters=MAX_ITERS, tol=None, backend=None,
                   mode_eps=MODE_EPS):
    """Solve the relaxation repeatedly until the mode guess is a fixed point.

    Returns the converged solution and the iteration log. When the guess
    never stabilizes within ``max_iters``, the best nonlinear-validated
    iterate is returned and the log carries ``converged=False``.
    """
    report = check_conditions(case)
    if not report.passed:
        log.warning("case %s: exactness conditions fail (%s); feasibility "
                    "guarantee is void, validation still runs", case.name,
                    {k: v for k, v in report.margins.items() if v < 0})

    if init_charging is None:
        charging = default_initial_guess(case)
    else:
        charging = _check_charging(case, init_charging)

    ilog = IterationLog()
    for k in range(max_iters):
        t0 = time.perf_counter()
        prog = build_maropf(case, charging)
        status, x = _solve_or_raise(prog, tol, backend,
                                    f"maropf iteration {k}")
        sol = extract_solution(prog, x, case, "maropf", status.objective,
                               charging=charging)
        new = np.where(np.abs(sol.p_r) < mode_eps, charging, sol.p_r > 0.0)
        flips = int(np.sum(new != charging))
        ilog.records.append(IterationRecord(
            k=k, objective=status.objective, modes=_modes_str(charging),
            flips=flips, status=status.status,
            wall_time=time.perf_counter() - t0))
        ilog.iterates.append(sol)
        if flips == 0:
            ilog.converged = True
            return sol, ilog
        charging = new

    log.warning("case %s: no mode fixed point in %d iterations; returning "
                "best validated iterate", case.name, max_iters)
    best, best_obj = None, np.inf
    for sol in ilog.iterates:
        rep = powerflow.validate(case, sol)
        if rep.feasible and rep.objective_exact < best_obj:
            best, best_obj = sol, rep.objective_exact
    return (best if best is not None else ilog.iterates[-1]), ilog


def enumerate_modes_optimum(case: NetworkCase, limit=4096, tol=None,
                            backend=None, return_all=False):
    """Global-optimality oracle: solve every charge/discharge pattern.

    Ranks nonlinear-validated feasible patterns by relaxed objective and
    returns the best; refuses when 2^(batteries*steps) exceeds ``limit``.
    """
    nB, T = len(case.bess), case.n_steps
    count = 2 ** (nB * T)
    if count > limit:
        raise EnumerationLimitError(
            f"{count} mode patterns exceed the limit of {limit}", count)
    best, best_obj = None, np.inf
    records = []
    for bits in itertools.product((True, False), repeat=nB * T):
        charging = np.asarray(bits, dtype=bool).reshape(nB, T)
        prog = build_maropf(case, charging)
        status, x = solvers.solve(prog, tol=tol, backend=backend)
        if status.status != "optimal":
            records.append((charging, np.nan, False))
            continue
        sol = extract_solution(prog, x, case, "enumerate", status.objective,
                               charging=charging)
        feasible = powerflow.validate(case, sol).feasible
        records.append((charging, status.objective, feasible))
        if feasible and status.objective < best_obj:
            best, best_obj = sol, status.objective
    if best is None:
        raise SolverError("no mode pattern produced a validated dispatch")
    if return_all:
        return best, records
    return best
