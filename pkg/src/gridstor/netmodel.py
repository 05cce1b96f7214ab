"""Three-phase radial feeder data model and the sectioned feeder file format."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

PHASES = ("A", "B", "C")

# Per-phase power base used by all solver math. The voltage base is the
# network's base_voltage (line-to-line) divided by sqrt(3).
S_BASE_KVA = 10.0


class FeederFormatError(ValueError):
    """Malformed feeder file; carries the offending line number."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(prefix + message)


class NetworkError(ValueError):
    """Network violates a structural invariant."""


@dataclass(frozen=True)
class PhaseTriple:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.a, self.b, self.c)):
            raise NetworkError(f"non-finite phase value in {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c], dtype=float)

    @classmethod
    def uniform(cls, value: float) -> PhaseTriple:
        return cls(value, value, value)


def _phase_set(phases) -> frozenset:
    out = frozenset(phases)
    if not out <= set(PHASES):
        raise NetworkError(f"unknown phase label in {sorted(out)}")
    return out


@dataclass(frozen=True)
class Bus:
    id: int
    phases_present: frozenset = frozenset(PHASES)
    has_load: frozenset = frozenset()
    has_pv: frozenset = frozenset()
    ess_candidate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "phases_present", _phase_set(self.phases_present))
        object.__setattr__(self, "has_load", _phase_set(self.has_load))
        object.__setattr__(self, "has_pv", _phase_set(self.has_pv))
        if not self.has_load <= self.phases_present or not self.has_pv <= self.phases_present:
            raise NetworkError(f"bus {self.id}: load/PV flag on an absent phase")


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    resistance: PhaseTriple
    reactance: PhaseTriple

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"line {self.from_bus}-{self.to_bus} is a self-loop")
        for name, trip in (("resistance", self.resistance), ("reactance", self.reactance)):
            if min(trip.a, trip.b, trip.c) <= 0.0:
                raise NetworkError(
                    f"line {self.from_bus}-{self.to_bus}: {name} must be strictly positive"
                )

    @property
    def key(self) -> tuple[int, int]:
        return (self.from_bus, self.to_bus)


@dataclass(frozen=True)
class RadialReport:
    """Outcome of a radiality check. ``ok`` is True iff the graph is a tree."""

    ok: bool
    cycle: tuple = ()
    disconnected: frozenset = frozenset()
    messages: tuple = ()


@dataclass(frozen=True)
class Topology:
    """Depth-ordered view of a radial network.

    Buses are indexed in breadth-first order from the substation (position 0).
    Branch ``k - 1`` is the line feeding the bus at position ``k``, so every
    branch array has length ``n_bus - 1``.
    """

    bus_ids: tuple
    parent: np.ndarray
    depth: np.ndarray
    branch_lines: tuple  # Line objects, oriented away from the substation
    downstream: np.ndarray  # (n_branch, n_bus) 0/1 incidence

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branch(self) -> int:
        return len(self.branch_lines)

    @cached_property
    def index(self) -> dict:
        return {b: k for k, b in enumerate(self.bus_ids)}


@dataclass(frozen=True)
class Network:
    buses: tuple
    lines: tuple
    substation_bus: int
    v_sub: float
    v_min: float
    v_max: float
    base_voltage: float

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        ids = [b.id for b in self.buses]
        seen = set()
        for bid in ids:
            if bid in seen:
                raise NetworkError(f"duplicate bus id {bid}")
            seen.add(bid)
        for ln in self.lines:
            for end in ln.key:
                if end not in seen:
                    raise NetworkError(f"line {ln.from_bus}-{ln.to_bus} references unknown bus {end}")
        if self.substation_bus not in seen:
            raise NetworkError(f"substation bus {self.substation_bus} not in BUS section")
        if not (self.v_min < self.v_sub < self.v_max):
            raise NetworkError("voltage limits must satisfy v_min < v_sub < v_max")
        if self.base_voltage <= 0:
            raise NetworkError("base_voltage must be positive")

    @cached_property
    def bus_map(self) -> dict:
        return {b.id: b for b in self.buses}

    @cached_property
    def topology(self) -> Topology:
        report = validate_radial(self)
        if not report.ok:
            raise NetworkError("network is not radial: " + "; ".join(report.messages))
        return _build_topology(self)

    # per-unit helpers -------------------------------------------------

    @property
    def v_base(self) -> float:
        """Phase-to-neutral voltage base in volts."""
        return self.base_voltage / math.sqrt(3.0)

    @property
    def z_base(self) -> float:
        return self.v_base**2 / (S_BASE_KVA * 1e3)

    @cached_property
    def r_pu(self) -> np.ndarray:
        """Branch resistances, shape (n_branch, 3), per-unit."""
        topo = self.topology
        return np.array([ln.resistance.as_array() for ln in topo.branch_lines]).reshape(-1, 3) / self.z_base

    @cached_property
    def x_pu(self) -> np.ndarray:
        topo = self.topology
        return np.array([ln.reactance.as_array() for ln in topo.branch_lines]).reshape(-1, 3) / self.z_base

    @property
    def v_sub_pu(self) -> float:
        return self.v_sub / self.v_base

    def candidates(self) -> list:
        return sorted(b.id for b in self.buses if b.ess_candidate)


def _adjacency(net: Network) -> dict:
    adj = {b.id: [] for b in net.buses}
    for k, ln in enumerate(net.lines):
        adj[ln.from_bus].append((ln.to_bus, k))
        adj[ln.to_bus].append((ln.from_bus, k))
    return adj


def validate_radial(net: Network) -> RadialReport:
    """Check that the line graph is a tree rooted at the substation.

    Violations are returned, never raised: the report lists one offending
    cycle (as a closed bus sequence) and every bus unreachable from the
    substation.
    """
    adj = _adjacency(net)
    root = net.substation_bus
    parent = {root: None}
    parent_line = {root: None}
    cycle: tuple = ()
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, k in adj[u]:
            if k == parent_line[u]:
                continue
            if v in parent:
                if not cycle:
                    cycle = _cycle_through(parent, u, v)
                continue
            parent[v] = u
            parent_line[v] = k
            queue.append(v)
    disconnected = frozenset(b.id for b in net.buses if b.id not in parent)
    messages = []
    if cycle:
        messages.append("cycle " + "-".join(str(b) for b in cycle))
    if disconnected:
        messages.append("disconnected buses " + ",".join(str(b) for b in sorted(disconnected)))
    if not cycle and len(net.lines) != len(net.buses) - 1:
        # parallel lines between the same pair show up here
        messages.append(f"{len(net.lines)} lines for {len(net.buses)} buses")
    return RadialReport(ok=not messages, cycle=cycle, disconnected=disconnected, messages=tuple(messages))


def _cycle_through(parent: dict, u, v) -> tuple:
    def path_to_root(x):
        out = []
        while x is not None:
            out.append(x)
            x = parent[x]
        return out

    pu, pv = path_to_root(u), path_to_root(v)
    common = set(pu) & set(pv)
    up = [x for x in pu if x not in common]
    vp = [x for x in pv if x not in common]
    meet = next(x for x in pu if x in common)
    return tuple(up + [meet] + vp[::-1] + [up[0] if up else meet])


def _build_topology(net: Network) -> Topology:
    adj = _adjacency(net)
    root = net.substation_bus
    order = [root]
    parent_pos = [-1]
    depth = [0]
    branch_lines = []
    pos = {root: 0}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        # neighbour order sorted by id keeps the layout independent of file order
        for v, k in sorted(adj[u]):
            if v in pos:
                continue
            pos[v] = len(order)
            order.append(v)
            parent_pos.append(pos[u])
            depth.append(depth[pos[u]] + 1)
            ln = net.lines[k]
            if ln.from_bus != u:
                ln = Line(u, v, ln.resistance, ln.reactance)
            branch_lines.append(ln)
            queue.append(v)
    n = len(order)
    down = np.zeros((n - 1, n))
    # BFS order puts children after parents; accumulate bottom-up
    for k in range(n - 1, 0, -1):
        down[k - 1, k] = 1.0
        p = parent_pos[k]
        if p > 0:
            down[p - 1] += down[k - 1]
    return Topology(
        bus_ids=tuple(order),
        parent=np.array(parent_pos),
        depth=np.array(depth),
        branch_lines=tuple(branch_lines),
        downstream=down,
    )


def downstream_sets(net: Network) -> dict:
    """Map each line ``(from_bus, to_bus)`` to the buses downstream of it.

    The key uses the line orientation as given in the network; the set is
    always on the side away from the substation.
    """
    topo = net.topology
    out = {}
    child_of = {}
    for k, ln in enumerate(topo.branch_lines):
        child_of[frozenset(ln.key)] = k
    for ln in net.lines:
        k = child_of[frozenset(ln.key)]
        out[ln.key] = frozenset(topo.bus_ids[j] for j in np.flatnonzero(topo.downstream[k]))
    return out


# ---------------------------------------------------------------------------
# file format


def _flags(token: str, lineno: int) -> frozenset:
    if token == "-":
        return frozenset()
    if not set(token) <= set(PHASES) or len(set(token)) != len(token):
        raise FeederFormatError(f"bad phase set {token!r}", lineno)
    return frozenset(token)


def _float(token: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise FeederFormatError(f"expected a number, got {token!r}", lineno) from None
    if not math.isfinite(value):
        raise FeederFormatError(f"non-finite number {token!r}", lineno)
    return value


def _int(token: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise FeederFormatError(f"expected an integer, got {token!r}", lineno) from None


def parse_network(text: str) -> Network:
    """Parse a feeder file with ``[BUS]``, ``[LINE]`` and ``[SOURCE]`` sections.

    Raises:
        FeederFormatError: syntax problems, duplicate bus ids, dangling line
            endpoints, or a non-radial graph.
    """
    section = None
    buses: list[Bus] = []
    bus_lines: dict[int, int] = {}
    lines: list[tuple[Line, int]] = []
    source = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            name = body.strip("[]").strip().upper()
            if name not in ("BUS", "LINE", "SOURCE") or not body.endswith("]"):
                raise FeederFormatError(f"unknown section {body!r}", lineno)
            section = name
            continue
        tok = body.split()
        if section is None:
            raise FeederFormatError("record outside of any section", lineno)
        if section == "BUS":
            if len(tok) != 5:
                raise FeederFormatError("BUS record needs 5 fields", lineno)
            bid = _int(tok[0], lineno)
            if bid in bus_lines:
                raise FeederFormatError(f"duplicate bus id {bid} (first on line {bus_lines[bid]})", lineno)
            if tok[4] not in ("0", "1"):
                raise FeederFormatError("ess_candidate must be 0 or 1", lineno)
            try:
                buses.append(
                    Bus(bid, _flags(tok[1], lineno), _flags(tok[2], lineno), _flags(tok[3], lineno), tok[4] == "1")
                )
            except NetworkError as exc:
                raise FeederFormatError(str(exc), lineno) from None
            bus_lines[bid] = lineno
        elif section == "LINE":
            if len(tok) != 8:
                raise FeederFormatError("LINE record needs 8 fields", lineno)
            vals = [_float(t, lineno) for t in tok[2:]]
            try:
                ln = Line(_int(tok[0], lineno), _int(tok[1], lineno), PhaseTriple(*vals[:3]), PhaseTriple(*vals[3:]))
            except NetworkError as exc:
                raise FeederFormatError(str(exc), lineno) from None
            lines.append((ln, lineno))
        else:
            if source is not None:
                raise FeederFormatError("more than one SOURCE record", lineno)
            if len(tok) != 5:
                raise FeederFormatError("SOURCE record needs 5 fields", lineno)
            source = (_int(tok[0], lineno), *[_float(t, lineno) for t in tok[1:]], lineno)
    if source is None:
        raise FeederFormatError("missing [SOURCE] record")
    for ln, lineno in lines:
        for end in ln.key:
            if end not in bus_lines:
                raise FeederFormatError(f"line endpoint {end} is not a defined bus", lineno)
    sub, v_sub, v_min, v_max, base, src_line = source
    if sub not in bus_lines:
        raise FeederFormatError(f"substation bus {sub} is not a defined bus", src_line)
    try:
        net = Network(tuple(buses), tuple(ln for ln, _ in lines), sub, v_sub, v_min, v_max, base)
    except NetworkError as exc:
        raise FeederFormatError(str(exc), src_line) from None
    report = validate_radial(net)
    if not report.ok:
        raise FeederFormatError("network is not radial: " + "; ".join(report.messages))
    return net


def _fmt_flags(flags: frozenset) -> str:
    return "".join(p for p in PHASES if p in flags) or "-"


def format_network(net: Network) -> str:
    """Serialize to the feeder file format; ``parse_network`` inverts it."""
    out = ["[BUS]", "# id phases load pv ess_candidate"]
    for b in net.buses:
        out.append(
            f"{b.id} {_fmt_flags(b.phases_present)} {_fmt_flags(b.has_load)} "
            f"{_fmt_flags(b.has_pv)} {int(b.ess_candidate)}"
        )
    out += ["", "[LINE]", "# from to Ra Rb Rc Xa Xb Xc (ohm)"]
    for ln in net.lines:
        vals = (*ln.resistance.as_array(), *ln.reactance.as_array())
        out.append(f"{ln.from_bus} {ln.to_bus} " + " ".join(repr(float(v)) for v in vals))
    out += ["", "[SOURCE]", "# bus v_sub v_min v_max base_voltage (V)"]
    out.append(
        f"{net.substation_bus} {net.v_sub!r} {net.v_min!r} {net.v_max!r} {net.base_voltage!r}"
    )
    return "\n".join(out) + "\n"


def read_network(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())
