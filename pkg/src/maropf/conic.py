"""Solver-agnostic second-order cone program representation.

A :class:`ConicProgram` holds named scalar variables, affine equalities and
inequalities, standard cones ``||x|| <= t`` and rotated cones
``||x||^2 <= y*z`` (with ``y, z >= 0``), and a linear objective to minimize.
Every constraint side is an affine expression of the declared variables, so
constants (e.g. the slack-bus voltage) can appear inside cones.

The module also provides an independent constraint evaluator (used to
re-check solver output) and a line-based text dump that round-trips through
:func:`parse_text`.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import BuildError


class LinExpr:
    """Affine expression ``const + sum(coef * var)`` over variable ids."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @classmethod
    def of(cls, vid, coef=1.0):
        return cls({vid: float(coef)})

    def copy(self):
        return LinExpr(self.terms, self.const)

    def add_term(self, vid, coef):
        c = self.terms.get(vid, 0.0) + coef
        if c == 0.0:
            self.terms.pop(vid, None)
        else:
            self.terms[vid] = c
        return self

    def __iadd__(self, other):
        if isinstance(other, LinExpr):
            for vid, c in other.terms.items():
                self.add_term(vid, c)
            self.const += other.const
        else:
            self.const += float(other)
        return self

    def __add__(self, other):
        out = self.copy()
        out += other
        return out

    __radd__ = __add__

    def __sub__(self, other):
        out = self.copy()
        if isinstance(other, LinExpr):
            for vid, c in other.terms.items():
                out.add_term(vid, -c)
            out.const -= other.const
        else:
            out.const -= float(other)
        return out

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return LinExpr({v: -c for v, c in self.terms.items()}, -self.const)

    def __mul__(self, scalar):
        s = float(scalar)
        return LinExpr({v: c * s for v, c in self.terms.items()}, self.const * s)

    __rmul__ = __mul__

    def value(self, x):
        return self.const + sum(c * x[v] for v, c in self.terms.items())

    def __eq__(self, other):
        return (
            isinstance(other, LinExpr)
            and self.const == other.const
            and self.terms == other.terms
        )

    def __repr__(self):
        return f"LinExpr({self.terms!r}, {self.const!r})"


def _as_expr(obj):
    if isinstance(obj, LinExpr):
        return obj
    if isinstance(obj, (int, float)):
        return LinExpr(const=float(obj))
    raise BuildError(f"expected LinExpr or number, got {type(obj).__name__}")


class ConicProgram:
    """Mutable conic-program builder; immutable by convention once solved."""

    def __init__(self, name=""):
        self.name = name
        self._var_names: list[str] = []
        self._var_index: dict[str, int] = {}
        self.eqs: list[tuple[LinExpr, str]] = []          # expr == 0
        self.ineqs: list[tuple[LinExpr, str]] = []        # expr <= 0
        self.socs: list[tuple[LinExpr, list[LinExpr], str]] = []
        self.rsocs: list[tuple[LinExpr, LinExpr, list[LinExpr], str]] = []
        self.objective = LinExpr()

    # -- variables ---------------------------------------------------------

    @staticmethod
    def _canon(name, key):
        if not key:
            return name
        return f"{name}[{','.join(str(k) for k in key)}]"

    def add_var(self, name, *key) -> int:
        label = self._canon(name, key)
        if label in self._var_index:
            raise BuildError(f"variable {label} already declared")
        vid = len(self._var_names)
        self._var_names.append(label)
        self._var_index[label] = vid
        return vid

    def var(self, name, *key) -> int:
        label = self._canon(name, key)
        try:
            return self._var_index[label]
        except KeyError:
            raise BuildError(f"program has no variable {label}") from None

    def has_var(self, name, *key) -> bool:
        return self._canon(name, key) in self._var_index

    def var_name(self, vid) -> str:
        return self._var_names[vid]

    @property
    def n_vars(self) -> int:
        return len(self._var_names)

    # -- constraints ---------------------------------------------------------

    def add_eq(self, expr, label=""):
        self.eqs.append((_as_expr(expr), label))

    def add_ineq(self, expr, label=""):
        self.ineqs.append((_as_expr(expr), label))

    def add_soc(self, t, x, label=""):
        self.socs.append((_as_expr(t), [_as_expr(e) for e in x], label))

    def add_rsoc(self, y, z, x, label=""):
        self.rsocs.append((_as_expr(y), _as_expr(z), [_as_expr(e) for e in x], label))

    def set_objective(self, expr):
        self.objective = _as_expr(expr)

    def stats(self):
        return {
            "n_vars": self.n_vars,
            "n_eq": len(self.eqs),
            "n_ineq": len(self.ineqs),
            "n_soc": len(self.socs),
            "n_rsoc": len(self.rsocs),
        }

    # -- reading a solution --------------------------------------------------

    def get(self, x, name, *key) -> float:
        return float(x[self.var(name, *key)])

    def __eq__(self, other):
        return (
            isinstance(other, ConicProgram)
            and self._var_names == other._var_names
            and self.eqs == other.eqs
            and self.ineqs == other.ineqs
            and self.socs == other.socs
            and self.rsocs == other.rsocs
            and self.objective == other.objective
        )


# -- independent constraint evaluator ----------------------------------------


class ResidualReport:
    """Worst-case constraint residuals of an assignment, by constraint kind."""

    def __init__(self):
        self.max_eq = 0.0
        self.max_ineq = 0.0
        self.max_soc = 0.0
        self.max_rsoc = 0.0
        self.worst_label = ""
        self._worst = 0.0

    def _update(self, value, label):
        if value > self._worst:
            self._worst = value
            self.worst_label = label

    @property
    def max_violation(self):
        return max(self.max_eq, self.max_ineq, self.max_soc, self.max_rsoc)

    def __repr__(self):
        return (
            f"ResidualReport(eq={self.max_eq:.3e}, ineq={self.max_ineq:.3e}, "
            f"soc={self.max_soc:.3e}, rsoc={self.max_rsoc:.3e}, "
            f"worst={self.worst_label!r})"
        )


def evaluate(program: ConicProgram, x) -> ResidualReport:
    """Evaluate all constraints at ``x`` without consulting any solver."""
    rep = ResidualReport()
    for expr, label in program.eqs:
        r = abs(expr.value(x))
        rep.max_eq = max(rep.max_eq, r)
        rep._update(r, label or "eq")
    for expr, label in program.ineqs:
        r = max(0.0, expr.value(x))
        rep.max_ineq = max(rep.max_ineq, r)
        rep._update(r, label or "ineq")
    for t, xs, label in program.socs:
        norm = math.sqrt(sum(e.value(x) ** 2 for e in xs))
        r = max(0.0, norm - t.value(x))
        rep.max_soc = max(rep.max_soc, r)
        rep._update(r, label or "soc")
    for y, z, xs, label in program.rsocs:
        yv, zv = y.value(x), z.value(x)
        sq = sum(e.value(x) ** 2 for e in xs)
        r = max(0.0, sq - yv * zv, -yv, -zv)
        rep.max_rsoc = max(rep.max_rsoc, r)
        rep._update(r, label or "rsoc")
    return rep


def check_assignment(program: ConicProgram, x, tol) -> bool:
    """True when every constraint holds within ``tol``."""
    return evaluate(program, x).max_violation <= tol


# -- text dump / parse ---------------------------------------------------------

_HEADER = "conicprogram v1"


def _fmt_expr(expr: LinExpr, names) -> str:
    parts = [repr(expr.const)]
    for vid in sorted(expr.terms):
        parts.append(f"{expr.terms[vid]!r}*{names[vid]}")
    return " + ".join(parts)


def _parse_expr(text, index) -> LinExpr:
    expr = LinExpr()
    for part in text.split(" + "):
        part = part.strip()
        if "*" in part:
            coef, name = part.split("*", 1)
            expr.add_term(index[name], float(coef))
        else:
            expr.const += float(part)
    return expr


def dump_text(program: ConicProgram) -> str:
    """Serialize the program to the debug text format."""
    names = program._var_names
    lines = [_HEADER, f"name {program.name}"]
    for label in names:
        lines.append(f"var {label}")
    lines.append(f"min {_fmt_expr(program.objective, names)}")
    for expr, label in program.eqs:
        lines.append(f"eq {_fmt_expr(expr, names)} | {label}")
    for expr, label in program.ineqs:
        lines.append(f"ineq {_fmt_expr(expr, names)} | {label}")
    for t, xs, label in program.socs:
        body = " ; ".join([_fmt_expr(t, names)] + [_fmt_expr(e, names) for e in xs])
        lines.append(f"soc {body} | {label}")
    for y, z, xs, label in program.rsocs:
        body = " ; ".join(
            [_fmt_expr(y, names), _fmt_expr(z, names)]
            + [_fmt_expr(e, names) for e in xs]
        )
        lines.append(f"rsoc {body} | {label}")
    return "\n".join(lines) + "\n"


def parse_text(text: str) -> ConicProgram:
    """Inverse of :func:`dump_text`."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _HEADER:
        raise ValueError("not a conic program dump (bad header)")
    program = ConicProgram()
    index = program._var_index
    for ln in lines[1:]:
        kind, _, rest = ln.partition(" ")
        if kind == "name":
            program.name = rest
        elif kind == "var":
            vid = len(program._var_names)
            program._var_names.append(rest)
            index[rest] = vid
        elif kind == "min":
            program.objective = _parse_expr(rest, index)
        elif kind in ("eq", "ineq"):
            body, _, label = rest.rpartition(" | ")
            expr = _parse_expr(body, index)
            (program.eqs if kind == "eq" else program.ineqs).append((expr, label))
        elif kind == "soc":
            body, _, label = rest.rpartition(" | ")
            exprs = [_parse_expr(p, index) for p in body.split(" ; ")]
            program.socs.append((exprs[0], exprs[1:], label))
        elif kind == "rsoc":
            body, _, label = rest.rpartition(" | ")
            exprs = [_parse_expr(p, index) for p in body.split(" ; ")]
            program.rsocs.append((exprs[0], exprs[1], exprs[2:], label))
        else:
            raise ValueError(f"unknown dump line kind: {kind!r}")
    return program


def objective_value(program: ConicProgram, x) -> float:
    return program.objective.value(np.asarray(x))
