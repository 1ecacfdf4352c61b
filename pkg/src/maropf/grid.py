"""Radial network case model, JSON loader, and path-matrix machinery.

Lines are identified with their ending node: line ``l`` ends at node ``l``
and starts at node ``up(l)``; node 0 is the slack bus and carries no line.
Per-line arrays are laid out with length ``L + 1`` so that index ``l`` is
line/node ``l`` directly (slot 0 is unused padding).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .bess import BessSpec
from .errors import CaseError, TopologyError

SCHEMA_ID = "maropf-case-v1"


@dataclass(frozen=True)
class DdgSpec:
    """Dispatchable generator at one node (consumption-positive convention)."""

    node: int
    p_min: float      # most negative = full generation
    p_max: float
    s_max: float      # apparent-power capacity, p.u.

    def validate(self):
        if self.p_min > self.p_max:
            raise CaseError(f"ddg[{self.node}].p_min exceeds p_max")
        if self.s_max < 0:
            raise CaseError(f"ddg[{self.node}].s_max must be >= 0")


@dataclass(frozen=True)
class NetworkCase:
    """Immutable radial feeder with profiles, limits and device placements."""

    name: str
    v0: float                      # slack squared voltage, p.u.^2
    dt: float                      # step length, hours
    prices: np.ndarray             # (T,)
    up: np.ndarray                 # (L+1,) int; up[0] = -1
    r: np.ndarray                  # (L+1,)
    x: np.ndarray                  # (L+1,)
    v_min: np.ndarray              # (L+1,) p.u.^2
    v_max: np.ndarray              # (L+1,) p.u.^2
    i_max: np.ndarray              # (L+1,) squared current
    p_max: np.ndarray              # (L+1,)
    q_max: np.ndarray              # (L+1,)
    p_load: np.ndarray             # (L+1, T) consumption-positive
    q_load: np.ndarray             # (L+1, T)
    ddgs: tuple[DdgSpec, ...] = ()
    bess: tuple[BessSpec, ...] = ()

    def __post_init__(self):
        for name in ("prices", "up", "r", "x", "v_min", "v_max", "i_max",
                     "p_max", "q_max", "p_load", "q_load"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_lines(self) -> int:
        return len(self.up) - 1

    @property
    def n_steps(self) -> int:
        return len(self.prices)

    @property
    def z(self) -> np.ndarray:
        return self.r + 1j * self.x

    def lines(self):
        return range(1, self.n_lines + 1)

    def root_lines(self):
        return [l for l in self.lines() if self.up[l] == 0]

    def children(self):
        """children[l] = lines whose up() is l, for l in 0..L."""
        ch = [[] for _ in range(self.n_lines + 1)]
        for l in self.lines():
            ch[self.up[l]].append(l)
        return ch

    def depth_order(self):
        """Lines ordered root-to-leaf (parents before children)."""
        order, stack = [], list(self.children()[0])
        ch = self.children()
        while stack:
            l = stack.pop()
            order.append(l)
            stack.extend(ch[l])
        return order

    def bess_at(self, node):
        for spec in self.bess:
            if spec.node == node:
                return spec
        return None


@dataclass(frozen=True)
class GraphMatrices:
    """Adjacency G (G[k-1,l-1]=1 iff k=up(l)) and path matrix H=(I-G)^-1."""

    G: np.ndarray                 # (L, L) int
    H: np.ndarray                 # (L, L) int
    e: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.e is None:
            object.__setattr__(self, "e", np.ones(len(self.G), dtype=int))
        self.G.setflags(write=False)
        self.H.setflags(write=False)
        self.e.setflags(write=False)


def graph_matrices(case: NetworkCase) -> GraphMatrices:
    """Build G and H in exact integer arithmetic via the nilpotent sum."""
    L = case.n_lines
    G = np.zeros((L, L), dtype=np.int64)
    for l in case.lines():
        k = case.up[l]
        if k >= 1:
            G[k - 1, l - 1] = 1
    H = np.eye(L, dtype=np.int64)
    P = G.copy()
    for _ in range(L):
        if not P.any():
            break
        H += P
        P = P @ G
    if P.any():
        raise TopologyError("adjacency matrix is not nilpotent (graph has a cycle)")
    return GraphMatrices(G=G, H=H)


# -- topology validation -------------------------------------------------------


def _check_tree(up):
    """Every node must reach the slack through up(); report cycles/orphans."""
    L = len(up) - 1
    state = [0] * (L + 1)   # 0 unseen, 1 on stack, 2 done
    state[0] = 2
    for start in range(1, L + 1):
        if state[start] == 2:
            continue
        path = []
        l = start
        while True:
            if l < 0 or l > L:
                raise TopologyError(
                    f"line {path[-1] if path else start} points to nonexistent "
                    f"node {l}", orphans=[l])
            if state[l] == 2:
                break
            if state[l] == 1:
                cycle = path[path.index(l):] + [l]
                raise TopologyError(
                    "feeder graph contains a cycle: "
                    + " -> ".join(str(n) for n in cycle), cycle=cycle)
            state[l] = 1
            path.append(l)
            l = up[l]
        for n in path:
            state[n] = 2


# -- JSON loading --------------------------------------------------------------


def _need(obj, key, where, kind=None):
    if key not in obj:
        raise CaseError(f"{where}: missing field '{key}'")
    val = obj[key]
    if kind == "num":
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise CaseError(f"{where}.{key}: expected a number")
        return float(val)
    if kind == "int":
        if not isinstance(val, int) or isinstance(val, bool):
            raise CaseError(f"{where}.{key}: expected an integer")
        return val
    if kind == "list":
        if not isinstance(val, list):
            raise CaseError(f"{where}.{key}: expected a list")
        return val
    return val


def _num_series(obj, key, where, T):
    vals = _need(obj, key, where, "list")
    if len(vals) != T:
        raise CaseError(f"{where}.{key}: expected {T} entries, got {len(vals)}")
    try:
        return np.asarray([float(v) for v in vals])
    except (TypeError, ValueError):
        raise CaseError(f"{where}.{key}: entries must be numbers") from None


def parse_case(doc: dict, name="case") -> NetworkCase:
    """Validate a case document and construct a NetworkCase."""
    if not isinstance(doc, dict):
        raise CaseError("case: top level must be an object")
    schema = doc.get("schema", SCHEMA_ID)
    if schema != SCHEMA_ID:
        raise CaseError(f"case.schema: unknown schema id {schema!r}")

    name = doc.get("name", name)
    v0 = _need(doc, "v0", "case", "num")
    dt = _need(doc, "dt_hours", "case", "num")
    prices = np.asarray([float(p) for p in _need(doc, "prices", "case", "list")])
    T = len(prices)
    if T == 0:
        raise CaseError("case.prices: at least one time step required")
    if dt <= 0:
        raise CaseError("case.dt_hours: must be > 0")
    if v0 <= 0:
        raise CaseError("case.v0: must be > 0")
    if np.any(prices < 0):
        raise CaseError("case.prices: negative prices are not supported "
                        "(import-cost objective)")

    lines = _need(doc, "lines", "case", "list")
    L = len(lines)
    if L == 0:
        raise CaseError("case.lines: at least one line required")
    nodes_seen = set()
    up = np.full(L + 1, -1, dtype=int)
    arrays = {k: np.zeros(L + 1) for k in
              ("r", "x", "v_min", "v_max", "i_max", "p_max", "q_max")}
    for i, ln in enumerate(lines):
        where = f"lines[{i}]"
        node = _need(ln, "node", where, "int")
        if node < 1 or node > L:
            raise CaseError(f"{where}.node: must be in 1..{L} (lines are "
                            "indexed by ending node)")
        if node in nodes_seen:
            raise CaseError(f"{where}.node: duplicate ending node {node}")
        nodes_seen.add(node)
        up[node] = _need(ln, "up", where, "int")
        for k in arrays:
            arrays[k][node] = _need(ln, k, where, "num")
        if arrays["r"][node] < 0:
            raise CaseError(f"{where}.r: must be >= 0")
        if arrays["v_min"][node] >= arrays["v_max"][node]:
            raise CaseError(f"{where}: v_min must be < v_max")
        for k in ("i_max", "p_max", "q_max"):
            if arrays[k][node] < 0:
                raise CaseError(f"{where}.{k}: must be >= 0")
    _check_tree(up)

    p_load = np.zeros((L + 1, T))
    q_load = np.zeros((L + 1, T))
    for i, entry in enumerate(doc.get("loads", [])):
        where = f"loads[{i}]"
        node = _need(entry, "node", where, "int")
        if node < 1 or node > L:
            raise CaseError(f"{where}.node: must be in 1..{L}")
        p_load[node] = _num_series(entry, "p", where, T)
        q_load[node] = _num_series(entry, "q", where, T)

    ddgs = []
    for i, entry in enumerate(doc.get("ddg", [])):
        where = f"ddg[{i}]"
        node = _need(entry, "node", where, "int")
        if node < 1 or node > L:
            raise CaseError(f"{where}.node: must be in 1..{L}")
        spec = DdgSpec(
            node=node,
            p_min=_need(entry, "p_min", where, "num"),
            p_max=_need(entry, "p_max", where, "num"),
            s_max=_need(entry, "s_max", where, "num"),
        )
        spec.validate()
        ddgs.append(spec)

    bess = []
    for i, entry in enumerate(doc.get("bess", [])):
        where = f"bess[{i}]"
        node = _need(entry, "node", where, "int")
        if node < 1 or node > L:
            raise CaseError(f"{where}.node: must be in 1..{L}")
        n_dsc = entry.get("n_dsc")
        spec = BessSpec(
            node=node,
            eta_c=_need(entry, "eta_c", where, "num"),
            eta_d=_need(entry, "eta_d", where, "num"),
            r_b=_need(entry, "r_b", where, "num"),
            e_cap=_need(entry, "e_cap", where, "num"),
            soc_min=_need(entry, "soc_min", where, "num"),
            soc_max=_need(entry, "soc_max", where, "num"),
            e_init=_need(entry, "e_init", where, "num"),
            i_max=_need(entry, "i_max", where, "num"),
            p_min=_need(entry, "p_min", where, "num"),
            p_max=_need(entry, "p_max", where, "num"),
            ramp_dn=_need(entry, "ramp_dn", where, "num"),
            ramp_up=_need(entry, "ramp_up", where, "num"),
            n_dsc=float("inf") if n_dsc is None else float(n_dsc),
        )
        spec.validate(where=where)
        bess.append(spec)

    return NetworkCase(
        name=name, v0=v0, dt=dt, prices=prices, up=up,
        r=arrays["r"], x=arrays["x"],
        v_min=arrays["v_min"], v_max=arrays["v_max"], i_max=arrays["i_max"],
        p_max=arrays["p_max"], q_max=arrays["q_max"],
        p_load=p_load, q_load=q_load,
        ddgs=tuple(ddgs), bess=tuple(bess),
    )


def load_case(path, format=SCHEMA_ID) -> NetworkCase:
    """Load and validate a case file (bundled name or filesystem path)."""
    if format != SCHEMA_ID:
        raise CaseError(f"unsupported case format {format!r}")
    text = None
    path = str(path)
    if not path.endswith(".json"):
        try:
            text = bundled_case_text(path)
        except FileNotFoundError:
            pass
    if text is None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise CaseError(f"cannot read case file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"case file {path} is not valid JSON: {exc}") from exc
    return parse_case(doc, name=path.rsplit("/", 1)[-1].removesuffix(".json"))


def bundled_case_text(name: str) -> str:
    ref = resources.files("maropf").joinpath(f"cases/{name}.json")
    if not ref.is_file():
        raise FileNotFoundError(name)
    return ref.read_text()


def list_bundled():
    base = resources.files("maropf").joinpath("cases")
    return sorted(p.name.removesuffix(".json")
                  for p in base.iterdir() if p.name.endswith(".json"))
