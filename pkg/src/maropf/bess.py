"""Battery model: exact conversion, convex relaxation, energy accounting.

Sign convention: terminal and reservoir powers are positive when charging
(the battery consumes from the grid). The reservoir power ``p_r`` is what
the energy store sees before conversion and ohmic losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conic import LinExpr
from .errors import BuildError, ParameterError


@dataclass(frozen=True)
class BessSpec:
    """Static parameters of one battery energy storage system."""

    node: int
    eta_c: float          # charging efficiency in (0, 1]
    eta_d: float          # discharging efficiency in (0, 1]
    r_b: float            # internal equivalent resistance, p.u.
    e_cap: float          # energy capacity, p.u.·h
    soc_min: float
    soc_max: float
    e_init: float         # initial stored energy, p.u.·h
    i_max: float          # squared inverter current limit, p.u.^2
    p_min: float          # terminal power lower bound (discharge), p.u.
    p_max: float          # terminal power upper bound (charge), p.u.
    ramp_dn: float        # reservoir ramp lower bound, p.u./step
    ramp_up: float        # reservoir ramp upper bound, p.u./step
    n_dsc: float          # allowed discharge cycles over the horizon

    def validate(self, where="bess"):
        if not (0.0 < self.eta_c <= 1.0 and 0.0 < self.eta_d <= 1.0):
            raise ParameterError(f"{where}: efficiencies must lie in (0, 1]")
        if self.r_b < 0:
            raise ParameterError(f"{where}: r_b must be >= 0")
        if self.e_cap <= 0:
            raise ParameterError(f"{where}: e_cap must be > 0")
        if not (0.0 <= self.soc_min < self.soc_max <= 1.0):
            raise ParameterError(f"{where}: need 0 <= soc_min < soc_max <= 1")
        if not (self.soc_min * self.e_cap <= self.e_init
                <= self.soc_max * self.e_cap):
            raise ParameterError(f"{where}: e_init outside the SOC window")
        if self.i_max < 0:
            raise ParameterError(f"{where}: i_max must be >= 0")
        if self.p_min > self.p_max:
            raise ParameterError(f"{where}: p_min exceeds p_max")
        if not (self.ramp_dn <= 0.0 <= self.ramp_up):
            raise ParameterError(f"{where}: need ramp_dn <= 0 <= ramp_up")
        if self.n_dsc != float("inf") and self.eta_c * self.eta_d >= 1.0:
            raise ParameterError(
                f"{where}: a finite cycle budget requires eta_c*eta_d < 1 "
                "(the discharge-energy factor degenerates otherwise)")

    @property
    def dsc_factor(self) -> float:
        """Factor eta_c / (1 - eta_c*eta_d) of the discharge-energy formula."""
        den = 1.0 - self.eta_c * self.eta_d
        if den <= 0.0:
            raise ParameterError("eta_c*eta_d must be < 1 for discharge "
                                 "energy accounting")
        return self.eta_c / den


@dataclass
class BessTrajectory:
    """One battery's time series as recovered by the nonlinear validation."""

    p_r: np.ndarray
    p_b: np.ndarray
    q_b: np.ndarray
    f_b: np.ndarray
    e: np.ndarray
    e_dsc: float


def exact_conversion(p_r, spec: BessSpec):
    """Terminal power max(p_r/eta_c, eta_d*p_r); accepts scalars or arrays."""
    return np.maximum(np.asarray(p_r, dtype=float) / spec.eta_c,
                      spec.eta_d * np.asarray(p_r, dtype=float))


def lower_bound_conversion(p_r, charging, spec: BessSpec):
    """Terminal power under a guessed mode; never exceeds the exact value."""
    p_r = np.asarray(p_r, dtype=float)
    return np.where(charging, p_r / spec.eta_c, spec.eta_d * p_r)


def soc_trajectory(p_r, f_b, spec: BessSpec, dt):
    """Stored energy after each step: E_t = E_0 + sum(p_r - r_b*f_b)*dt."""
    p_r = np.asarray(p_r, dtype=float)
    f_b = np.asarray(f_b, dtype=float)
    if p_r.shape != f_b.shape:
        raise ParameterError("p_r and f_b series must have equal length")
    return spec.e_init + np.cumsum(p_r - spec.r_b * f_b) * dt


def discharge_energy(p_b, p_r, spec: BessSpec, dt=1.0) -> float:
    """Total discharged energy (reservoir side) from the closed form.

    Every summand is multiplied by dt so the result is in p.u.·h for any
    step length; with dt=1 this reduces to the plain per-step sum. For
    trajectories consistent with the exact conversion the charging terms
    vanish and the total equals sum(max(-p_r, 0))*dt.
    """
    p_b = np.asarray(p_b, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    return float(spec.dsc_factor * np.sum(p_b - p_r / spec.eta_c) * dt)


def relaxed_bess_constraints(spec: BessSpec, charging, program, h, dt):
    """Install the convex battery relaxation for one battery.

    ``h`` holds the per-step variable ids the program must already carry:
    ``p_r, q_b, p_ub, p_lb, f_ub, e_lo, e_hi, v`` (lists over t) and
    ``e_dsc`` (single id, or None when no cycle budget applies). Emits, per
    step: the two conversion upper-bound inequalities, the guessed-mode
    equality, f_ub >= 0, the inverter rotated cone, and the two energy-bound
    equalities; plus one equality defining the discharge-energy total.
    Returns the number of constraints added by kind.
    """
    T = len(charging)
    for name in ("p_r", "q_b", "p_ub", "p_lb", "f_ub", "e_lo", "e_hi", "v"):
        seq = getattr(h, name, None)
        if seq is None or len(seq) != T:
            raise BuildError(f"bess[{spec.node}]: missing variable handles "
                             f"for {name!r}")
    counts = {"eq": 0, "ineq": 0, "rsoc": 0}
    node = spec.node

    def eq(expr, label):
        program.add_eq(expr, label)
        counts["eq"] += 1

    def ineq(expr, label):
        program.add_ineq(expr, label)
        counts["ineq"] += 1

    for t in range(T):
        # conversion upper bound p_ub >= max(p_r/eta_c, eta_d*p_r)
        ineq(LinExpr({h.p_r[t]: 1.0 / spec.eta_c, h.p_ub[t]: -1.0}),
             f"bess[{node}].conv_ub_ch[{t}]")
        ineq(LinExpr({h.p_r[t]: spec.eta_d, h.p_ub[t]: -1.0}),
             f"bess[{node}].conv_ub_dc[{t}]")
        # guessed-mode terminal power
        slope = 1.0 / spec.eta_c if charging[t] else spec.eta_d
        eq(LinExpr({h.p_lb[t]: 1.0, h.p_r[t]: -slope}),
           f"bess[{node}].conv_guess[{t}]")
        # inverter current bound variable and rotated cone
        ineq(LinExpr({h.f_ub[t]: -1.0}), f"bess[{node}].fb_nonneg[{t}]")
        program.add_rsoc(LinExpr.of(h.f_ub[t]), LinExpr.of(h.v[t]),
                         [LinExpr.of(h.p_ub[t]), LinExpr.of(h.q_b[t])],
                         f"bess[{node}].inverter_cone[{t}]")
        counts["rsoc"] += 1
        # energy bounds: loss-inclusive lower and lossless upper trajectory
        prev_lo = LinExpr.of(h.e_lo[t - 1]) if t else LinExpr(const=spec.e_init)
        eq(LinExpr.of(h.e_lo[t]) - prev_lo
           - dt * (LinExpr.of(h.p_r[t]) - spec.r_b * LinExpr.of(h.f_ub[t])),
           f"bess[{node}].e_lo[{t}]")
        prev_hi = LinExpr.of(h.e_hi[t - 1]) if t else LinExpr(const=spec.e_init)
        eq(LinExpr.of(h.e_hi[t]) - prev_hi - dt * LinExpr.of(h.p_r[t]),
           f"bess[{node}].e_hi[{t}]")

    if getattr(h, "e_dsc", None) is not None:
        kappa = spec.dsc_factor
        total = LinExpr.of(h.e_dsc)
        for t in range(T):
            total.add_term(h.p_ub[t], -kappa * dt)
            total.add_term(h.p_r[t], kappa * dt / spec.eta_c)
        eq(total, f"bess[{node}].e_dsc")
    return counts
