"""Exact branch-flow power flow and post-dispatch validation.

This is the nonlinear ground truth: a backward/forward sweep solves the
branch-flow equations for fixed nodal injections, the battery internal
state is recovered from the exact conversion model, and signed margins to
every limit are reported (negative margin = violation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bess as bess_mod
from .errors import PowerFlowDivergence
from .grid import NetworkCase

PF_TOL = 1e-10
MAX_SWEEPS = 100


def solve_pf(case: NetworkCase, s_inj, t=None, tol=PF_TOL, max_sweeps=MAX_SWEEPS):
    """Solve the branch-flow equations for one step's injections.

    ``s_inj`` is the complex net consumption per node, length L+1 (entry 0
    ignored). Returns squared voltages ``v``, squared currents ``f`` and
    sending-end flows ``S``, each length L+1, with residuals of the three
    branch-flow equations below ``tol``.
    """
    L = case.n_lines
    s_inj = np.asarray(s_inj, dtype=complex)
    ch = case.children()
    order = case.depth_order()                 # parents before children
    z = case.z

    v = np.full(L + 1, case.v0, dtype=float)
    f = np.zeros(L + 1)
    S = np.zeros(L + 1, dtype=complex)
    damping = 1.0
    prev_res = math.inf

    for _ in range(max_sweeps):
        # backward: accumulate flows leaf-to-root using current loss estimate
        for l in reversed(order):
            S[l] = s_inj[l] + z[l] * f[l]
            for m in ch[l]:
                S[l] += S[m]
        # forward: propagate voltages root-to-leaf
        for l in order:
            vu = v[case.up[l]]
            v[l] = vu - 2.0 * (case.r[l] * S[l].real + case.x[l] * S[l].imag) \
                + abs(z[l]) ** 2 * f[l]
            if v[l] <= 0.0:
                raise PowerFlowDivergence(
                    f"voltage collapsed at node {l} (squared voltage "
                    f"{v[l]:.3e})", step=t)
        vu = v[case.up[1:L + 1]]
        f_new = np.zeros(L + 1)
        f_new[1:] = (S[1:].real ** 2 + S[1:].imag ** 2) / vu

        res = float(np.max(np.abs(f_new[1:] - f[1:])))
        if res > prev_res:
            damping = max(damping * 0.5, 1.0 / 64.0)
        prev_res = res
        f[1:] = damping * f_new[1:] + (1.0 - damping) * f[1:]

        if _residual(case, s_inj, v, f, S) <= tol:
            return v, f, S
    raise PowerFlowDivergence(
        f"power flow did not converge in {max_sweeps} sweeps "
        "(likely voltage collapse)", step=t)


def _residual(case, s_inj, v, f, S):
    """Worst residual of the three branch-flow equations."""
    L = case.n_lines
    ch = case.children()
    worst = 0.0
    for l in case.lines():
        rhs = s_inj[l] + case.z[l] * f[l]
        for m in ch[l]:
            rhs += S[m]
        worst = max(worst, abs(S[l] - rhs))
        vu = v[case.up[l]]
        drop = vu - 2.0 * (case.r[l] * S[l].real + case.x[l] * S[l].imag) \
            + abs(case.z[l]) ** 2 * f[l]
        worst = max(worst, abs(v[l] - drop))
        worst = max(worst, abs(f[l] * vu - (S[l].real ** 2 + S[l].imag ** 2)))
    return worst


@dataclass
class ValidationReport:
    """Exact post-power-flow state and signed margins to every limit."""

    v: np.ndarray                 # (L+1, T) squared voltages
    f: np.ndarray                 # (L+1, T) squared currents
    S: np.ndarray                 # (L+1, T) complex sending-end flows
    bess: dict = field(default_factory=dict)     # node -> BessTrajectory
    margins: dict = field(default_factory=dict)  # name -> signed margin
    feasible: bool = True
    objective_exact: float = 0.0
    tol: float = 1e-6

    @property
    def worst_margin(self):
        if not self.margins:
            return math.inf
        return min(self.margins.values())

    def worst(self):
        if not self.margins:
            return ("", math.inf)
        name = min(self.margins, key=self.margins.get)
        return name, self.margins[name]

    def to_dict(self):
        name, value = self.worst()
        return {
            "feasible": self.feasible,
            "tolerance": self.tol,
            "objective_exact": self.objective_exact,
            "worst_margin": {"name": name,
                             "value": None if math.isinf(value) else value},
            "margins": {k: v for k, v in sorted(self.margins.items())},
        }


def validate(case: NetworkCase, solution, tol=1e-6) -> ValidationReport:
    """Run exact power flows for a dispatch and evaluate all margins.

    ``solution`` must expose ``p_r``/``q_b`` per battery (rows follow
    ``case.bess`` order) and ``ddg_p``/``ddg_q`` per generator. Battery
    terminal power is recovered through the exact conversion, the current
    through the post-power-flow bus voltage, and the stored energy through
    the loss-inclusive balance.
    """
    L, T = case.n_lines, case.n_steps
    p_r = np.atleast_2d(np.asarray(solution.p_r, dtype=float)) \
        if len(case.bess) else np.zeros((0, T))
    q_b = np.atleast_2d(np.asarray(solution.q_b, dtype=float)) \
        if len(case.bess) else np.zeros((0, T))
    ddg_p = np.atleast_2d(np.asarray(solution.ddg_p, dtype=float)) \
        if len(case.ddgs) else np.zeros((0, T))
    ddg_q = np.atleast_2d(np.asarray(solution.ddg_q, dtype=float)) \
        if len(case.ddgs) else np.zeros((0, T))
    if p_r.shape != (len(case.bess), T):
        raise ValueError(f"solution p_r has shape {p_r.shape}, "
                         f"case needs {(len(case.bess), T)}")

    p_term = np.zeros((len(case.bess), T))
    for b, spec in enumerate(case.bess):
        p_term[b] = bess_mod.exact_conversion(p_r[b], spec)

    v = np.zeros((L + 1, T))
    f = np.zeros((L + 1, T))
    S = np.zeros((L + 1, T), dtype=complex)
    for t in range(T):
        inj = case.p_load[:, t] + 1j * case.q_load[:, t]
        inj = inj.astype(complex)
        for b, spec in enumerate(case.bess):
            inj[spec.node] += p_term[b, t] + 1j * q_b[b, t]
        for g, spec in enumerate(case.ddgs):
            inj[spec.node] += ddg_p[g, t] + 1j * ddg_q[g, t]
        v[:, t], f[:, t], S[:, t] = solve_pf(case, inj, t=t)

    report = ValidationReport(v=v, f=f, S=S, tol=tol)
    m = report.margins
    m["v_lower"] = float(np.min(v[1:] - case.v_min[1:, None]))
    m["v_upper"] = float(np.min(case.v_max[1:, None] - v[1:]))
    m["current"] = float(np.min(case.i_max[1:, None] - f[1:]))
    m["p_line"] = float(np.min(case.p_max[1:, None] - S[1:].real))
    m["q_line"] = float(np.min(case.q_max[1:, None] - S[1:].imag))

    for b, spec in enumerate(case.bess):
        vb = v[spec.node]
        f_b = (p_term[b] ** 2 + q_b[b] ** 2) / vb
        e = bess_mod.soc_trajectory(p_r[b], f_b, spec, case.dt)
        e_dsc = bess_mod.discharge_energy(p_term[b], p_r[b], spec, case.dt) \
            if spec.eta_c * spec.eta_d < 1.0 \
            else float(np.sum(np.maximum(-p_r[b], 0.0)) * case.dt)
        report.bess[spec.node] = bess_mod.BessTrajectory(
            p_r=p_r[b], p_b=p_term[b], q_b=q_b[b], f_b=f_b, e=e, e_dsc=e_dsc)
        key = f"bess[{spec.node}]"
        m[f"{key}.inverter"] = float(np.min(spec.i_max - f_b))
        m[f"{key}.soc_lower"] = float(np.min(e - spec.soc_min * spec.e_cap))
        m[f"{key}.soc_upper"] = float(np.min(spec.soc_max * spec.e_cap - e))
        if math.isfinite(spec.n_dsc):
            m[f"{key}.cycles"] = float(spec.n_dsc * spec.e_cap - e_dsc)
        m[f"{key}.p_lower"] = float(np.min(p_term[b] - spec.p_min))
        m[f"{key}.p_upper"] = float(np.min(spec.p_max - p_term[b]))
        if T > 1:
            step = np.diff(p_r[b])
            m[f"{key}.ramp_up"] = float(np.min(spec.ramp_up - step))
            m[f"{key}.ramp_dn"] = float(np.min(step - spec.ramp_dn))

    for g, spec in enumerate(case.ddgs):
        key = f"ddg[{spec.node}]"
        m[f"{key}.p_lower"] = float(np.min(ddg_p[g] - spec.p_min))
        m[f"{key}.p_upper"] = float(np.min(spec.p_max - ddg_p[g]))
        m[f"{key}.capacity"] = float(
            np.min(spec.s_max - np.hypot(ddg_p[g], ddg_q[g])))

    report.feasible = bool(report.worst_margin >= -tol)
    roots = case.root_lines()
    imports = np.maximum(S[roots].real.sum(axis=0), 0.0)
    report.objective_exact = float(np.dot(case.prices, imports))
    return report
