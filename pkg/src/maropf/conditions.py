"""A-priori exactness conditions on the feeder's impedance/limit structure.

Four matrix inequalities are checked before solving; when they hold, the
augmented relaxation is guaranteed feasible and tight. Failures downgrade
to a warning upstream: the nonlinear validation remains the final arbiter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .grid import GraphMatrices, NetworkCase, graph_matrices

DEFAULT_ETA = (1.0 - 1e-6, 1.0 - 1e-6, 1.0 - 1e-6)


@dataclass(frozen=True)
class CondMatrices:
    D: np.ndarray
    E: np.ndarray
    pi: np.ndarray
    rho: np.ndarray
    theta: np.ndarray


@dataclass(frozen=True)
class ConditionReport:
    e_norm: float                   # Frobenius norm of E
    c1: bool
    c2: bool
    c3: bool
    c4: bool
    eta: tuple
    margins: dict                   # worst-case slack per condition

    @property
    def passed(self) -> bool:
        return self.c1 and self.c2 and self.c3 and self.c4

    def to_dict(self):
        return {
            "e_norm": self.e_norm,
            "conditions": {"c1": self.c1, "c2": self.c2,
                           "c3": self.c3, "c4": self.c4},
            "eta": list(self.eta),
            "margins": dict(self.margins),
            "passed": self.passed,
        }


def _min_injections(case: NetworkCase):
    """Per-node lower bounds on net active/reactive consumption.

    Fixed profiles contribute their per-node minimum over time; batteries
    their terminal lower bound and the widest reactive swing the inverter
    cone admits; generators their active lower bound and full capacity.
    """
    L = case.n_lines
    p_min = np.min(case.p_load[1:], axis=1).copy()
    q_min = np.min(case.q_load[1:], axis=1).copy()
    for spec in case.bess:
        i = spec.node - 1
        p_min[i] += min(spec.p_min, 0.0)
        q_min[i] -= math.sqrt(max(spec.i_max, 0.0) * case.v_max[spec.node])
    for spec in case.ddgs:
        i = spec.node - 1
        p_min[i] += min(spec.p_min, 0.0)
        q_min[i] -= spec.s_max
    return p_min, q_min


def build_condition_matrices(case: NetworkCase, gm: GraphMatrices | None = None):
    """Construct D, E and the pi/rho/theta scaling vectors."""
    if gm is None:
        gm = graph_matrices(case)
    if np.any(case.v_min[1:] <= 0.0):
        raise ParameterError("v_min must be strictly positive at every node "
                             "(it divides the pi/rho bounds)")
    H = gm.H.astype(float)
    L = case.n_lines
    r = case.r[1:]
    x = case.x[1:]
    z2 = r ** 2 + x ** 2

    p_min, q_min = _min_injections(case)
    pi = np.maximum(case.p_max[1:], np.abs(H @ p_min)) / case.v_min[1:]
    rho = np.maximum(case.q_max[1:], np.abs(H @ q_min)) / case.v_min[1:]
    theta = pi ** 2 + rho ** 2

    HmI = H - np.eye(L)
    D = (2.0 * H @ np.diag(r) @ HmI @ np.diag(r)
         + 2.0 * H @ np.diag(x) @ HmI @ np.diag(x)
         + H @ np.diag(z2))
    E = (2.0 * np.diag(pi) @ H @ np.diag(r)
         + 2.0 * np.diag(rho) @ H @ np.diag(x)
         + np.diag(theta) @ D)
    return CondMatrices(D=D, E=E, pi=pi, rho=rho, theta=theta)


def _elementwise_margin(lhs, rhs, eta):
    """Worst slack of lhs <= eta*rhs; zero-RHS entries require lhs <= 0."""
    pos = rhs > 0.0
    worst = math.inf
    if pos.any():
        worst = float(np.min(eta * rhs[pos] - lhs[pos]))
    if (~pos).any():
        worst = min(worst, float(np.min(-lhs[~pos])))
    return worst


def check_conditions(case: NetworkCase, eta=DEFAULT_ETA,
                     gm: GraphMatrices | None = None) -> ConditionReport:
    """Evaluate conditions C1-C4 and report worst-case margins."""
    if gm is None:
        gm = graph_matrices(case)
    mats = build_condition_matrices(case, gm)
    H = gm.H.astype(float)
    Hr = H @ np.diag(case.r[1:])
    D, E = mats.D, mats.E

    e_norm = float(np.linalg.norm(E, "fro"))
    m1 = 1.0 - e_norm
    m2 = _elementwise_margin(D @ E, D, eta[0])
    m3 = _elementwise_margin((Hr @ E) * H, Hr, eta[1])
    m4 = _elementwise_margin(Hr @ E @ E, Hr @ E, eta[2])
    return ConditionReport(
        e_norm=e_norm,
        c1=e_norm < 1.0,
        c2=m2 >= 0.0,
        c3=m3 >= 0.0,
        c4=m4 >= 0.0,
        eta=tuple(eta),
        margins={"c1": m1, "c2": m2, "c3": m3, "c4": m4},
    )
