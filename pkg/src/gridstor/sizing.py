"""ESS siting and sizing as a mixed-integer QP over the linearized feeder.

The continuous part (schedules, capacities, flows, voltages) is one sparse
convex QP whose only integer variables are the per-candidate installation
binaries. Fixing a binary pattern or relaxing it to [0, 1] only changes
variable bounds, so the same QP and solver workspace serve every
branch-and-bound node.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .netmodel import S_BASE_KVA, Network
from .powerflow import Injection, branch_losses, lin_flows, lin_voltages
from .profiles import ProfileSet, TimeGrid
from .qpsolve import INFEASIBLE, OPTIMAL, AdmmSolver, QpProblem, QpSettings, QpSolution
from .storage import EssSchedule, Placement, placement_injection

log = logging.getLogger(__name__)

INTEGRALITY_TOL = 1e-6
TIE_RTOL = 1e-6
ENUMERATION_BUDGET = 10_000


class SizingError(RuntimeError):
    pass


class SizingInfeasible(SizingError):
    pass


@dataclass(frozen=True)
class EssDefaults:
    """Storage template for sizing.

    With ``p_max_charge``/``p_max_discharge`` left as None the rate limits
    follow the capacity: ``capacity / c_hours`` (three-phase kW).
    """

    eta_plus: float = 1.0
    eta_minus: float = 1.0
    e_min: float = 0.0
    c_hours: float = 2.0
    p_max_charge: float | None = None
    p_max_discharge: float | None = None

    def __post_init__(self):
        if not (0 < self.eta_plus <= 1 and 0 < self.eta_minus <= 1):
            raise ValueError("efficiencies must lie in (0, 1]")
        if self.e_min < 0 or self.c_hours <= 0:
            raise ValueError("need e_min >= 0 and c_hours > 0")
        if (self.p_max_charge is None) != (self.p_max_discharge is None):
            raise ValueError("give both fixed rate limits or neither")

    @property
    def rate_linked(self) -> bool:
        return self.p_max_charge is None

    @property
    def lossless(self) -> bool:
        return self.eta_plus == 1.0 and self.eta_minus == 1.0


@dataclass(frozen=True)
class SizingProblem:
    net: Network
    profiles: ProfileSet
    grid: TimeGrid
    candidates: tuple
    n_ess: int | None = 1
    aggregate_cap: float | None = None
    capacity_bound: float | None = None
    ess: EssDefaults = EssDefaults()
    qp: QpSettings = QpSettings()
    node_limit: int = 100_000

    def __post_init__(self):
        cands = tuple(sorted(set(self.candidates)))
        object.__setattr__(self, "candidates", cands)
        for c in cands:
            if c not in self.net.bus_map:
                raise SizingError(f"candidate bus {c} is not in the network")
            if c == self.net.substation_bus:
                raise SizingError("the substation bus cannot host storage")
            if self.net.bus_map[c].phases_present != frozenset("ABC"):
                raise SizingError(f"candidate bus {c} lacks a phase; three-phase storage needs all three")
        if self.n_ess is not None and not 0 <= self.n_ess <= len(cands):
            raise SizingError(f"N = {self.n_ess} outside 0..{len(cands)}")
        if self.aggregate_cap is not None and self.aggregate_cap < 0:
            raise SizingError("aggregate capacity must be non-negative")
        if self.capacity_bound is not None and self.capacity_bound <= 0:
            raise SizingError("capacity bound must be positive")
        if self.profiles.n_days != self.grid.n_days or self.profiles.n_hours != self.grid.hours_per_day:
            raise SizingError("profiles do not match the time grid")
        if tuple(self.profiles.bus_ids) != tuple(self.net.topology.bus_ids):
            raise SizingError("profiles were built for a different bus ordering")

    @property
    def big_m(self) -> float:
        if self.capacity_bound is not None:
            return self.capacity_bound
        if self.aggregate_cap is not None:
            return max(self.aggregate_cap, 1e-9)
        return generous_capacity_bound(self)


def generous_capacity_bound(prob: SizingProblem) -> float:
    """Upper bound on useful storage: the largest daily energy moved by loads and PV."""
    prof = prob.profiles
    daily = (prof.p_load + prof.p_pv).sum(axis=(1, 2, 3)) * prob.grid.delta_t
    return float(max(daily.max(initial=0.0), 1.0))


@dataclass(frozen=True)
class SolverStats:
    nodes: int
    qp_solves: int
    qp_iterations: int
    wall_time: float


@dataclass(frozen=True)
class SizingSolution:
    placements: tuple
    objective_kwh: float
    base_objective_kwh: float
    assignment: tuple
    stats: SolverStats
    optimality_gap: float
    qp: QpSolution | None = None

    @property
    def buses(self) -> tuple:
        return tuple(p.bus for p in self.placements)

    @property
    def total_capacity(self) -> float:
        return float(sum(p.capacity_kwh for p in self.placements))

    @property
    def loss_reduction(self) -> float:
        if self.base_objective_kwh <= 0:
            return 0.0
        return 1.0 - self.objective_kwh / self.base_objective_kwh


# ---------------------------------------------------------------------------
# QP assembly


@dataclass(frozen=True)
class QpLayout:
    n_cand: int
    n_days: int
    hours: int
    n_branch: int
    off_b: int
    off_cap: int
    off_e0: int
    off_pp: int
    off_pm: int
    off_e: int
    off_flow: int
    off_v: int
    n: int

    def ess(self, off: int, c: int, d: int, t) -> int:
        return off + (c * self.n_days + d) * self.hours + t

    def flow(self, d: int, t: int, b, f) -> int:
        return self.off_flow + ((d * self.hours + t) * self.n_branch + b) * 3 + f

    def volt(self, d: int, t: int, k, f) -> int:
        # k is the bus position (>= 1); the substation has no variable
        return self.off_v + ((d * self.hours + t) * self.n_branch + (k - 1)) * 3 + f

    @property
    def binaries(self) -> slice:
        return slice(self.off_b, self.off_b + self.n_cand)


def _layout(prob: SizingProblem) -> QpLayout:
    C = len(prob.candidates)
    nD, H = prob.grid.n_days, prob.grid.hours_per_day
    nb = prob.net.topology.n_branch
    off = 0
    off_b, off_cap, off_e0 = 0, C, 2 * C
    off = 3 * C
    n_ess = C * nD * H
    off_pp, off_pm, off_e = off, off + n_ess, off + 2 * n_ess
    off += 3 * n_ess
    n_net = nD * H * nb * 3
    off_flow, off_v = off, off + n_net
    return QpLayout(C, nD, H, nb, off_b, off_cap, off_e0, off_pp, off_pm, off_e, off_flow, off_v, off + 2 * n_net)


class _Rows:
    def __init__(self, n: int):
        self.n = n
        self.r: list = []
        self.c: list = []
        self.v: list = []
        self.lo: list = []
        self.hi: list = []

    def add(self, cols, vals, lo, hi) -> None:
        k = len(self.lo)
        self.r.extend([k] * len(cols))
        self.c.extend(cols)
        self.v.extend(vals)
        self.lo.append(lo)
        self.hi.append(hi)

    def matrix(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.v, (self.r, self.c)), shape=(len(self.lo), self.n))


@dataclass(frozen=True)
class SizingQp:
    """The assembled QP plus what is needed to interpret its solution."""

    qp: QpProblem
    layout: QpLayout
    problem: SizingProblem
    big_m: float

    def bounds_for(self, lb_b: np.ndarray, ub_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lb = self.qp.lb.copy()
        ub = self.qp.ub.copy()
        lay = self.layout
        ub_b = np.asarray(ub_b, float)
        lb[lay.binaries] = np.asarray(lb_b, float) * self.big_m
        ub[lay.binaries] = ub_b * self.big_m
        # a candidate fixed off carries no storage; pinning its columns is implied
        # by the big-M rows but spares the solver from resolving them
        for ci in np.flatnonzero(ub_b < 0.5):
            ub[lay.off_cap + ci] = ub[lay.off_e0 + ci] = 0.0
            for off in (lay.off_pp, lay.off_pm, lay.off_e):
                start = lay.ess(off, ci, 0, 0)
                ub[start : start + lay.n_days * lay.hours] = 0.0
        return lb, ub


def build_qp(prob: SizingProblem, fixed_binaries=None) -> SizingQp:
    """Assemble the loss-minimizing QP.

    ``fixed_binaries`` is None for the [0, 1] relaxation or a 0/1 sequence
    aligned with ``prob.candidates``; fixed binaries are imposed as equal
    variable bounds, which collapses the big-M rows.
    """
    net, grid, prof, ess = prob.net, prob.grid, prob.profiles, prob.ess
    topo = net.topology
    lay = _layout(prob)
    C, nD, H, nb = lay.n_cand, lay.n_days, lay.hours, lay.n_branch
    dt = grid.delta_t
    M = prob.big_m
    r_pu, x_pu = net.r_pu, net.x_pu
    vs = net.v_sub_pu
    cand_pos = [topo.index[c] for c in prob.candidates]

    # base (storage-free) flows in pu, shape (nD, H, nb, 3)
    base_p, base_q = lin_flows(net, Injection(prof.net_p(), prof.net_q()))
    base_p = base_p / S_BASE_KVA
    base_q = base_q / S_BASE_KVA

    # objective: weighted kWh of R (p^2 + q^2) / v_sub^2
    w = (grid.weights * dt * S_BASE_KVA)[:, None, None, None] * (r_pu / vs**2)[None, None, :, :]
    w = np.broadcast_to(w, (nD, H, nb, 3))
    q_diag = np.zeros(lay.n)
    q_diag[lay.off_flow : lay.off_v] = 2.0 * w.ravel()
    Q = sp.diags(q_diag, format="csc")
    c = np.zeros(lay.n)
    offset = float(np.sum(w * base_q**2))

    eq = _Rows(lay.n)
    ineq = _Rows(lay.n)

    D = topo.downstream
    # flow definitions
    for d in range(nD):
        for t in range(H):
            for b in range(nb):
                down = [ci for ci, k in enumerate(cand_pos) if D[b, k] > 0]
                for f in range(3):
                    cols = [lay.flow(d, t, b, f)]
                    vals = [1.0]
                    for ci in down:
                        cols += [lay.ess(lay.off_pp, ci, d, t), lay.ess(lay.off_pm, ci, d, t)]
                        vals += [-1.0 / S_BASE_KVA, 1.0 / S_BASE_KVA]
                    eq.add(cols, vals, base_p[d, t, b, f], base_p[d, t, b, f])

    # linear voltage drop along every branch
    parent = topo.parent
    for d in range(nD):
        for t in range(H):
            for k in range(1, topo.n_bus):
                b = k - 1
                for f in range(3):
                    rhs = -x_pu[b, f] * base_q[d, t, b, f] / vs
                    cols = [lay.volt(d, t, k, f), lay.flow(d, t, b, f)]
                    vals = [1.0, r_pu[b, f] / vs]
                    if parent[k] == 0:
                        rhs += vs
                    else:
                        cols.append(lay.volt(d, t, parent[k], f))
                        vals.append(-1.0)
                    eq.add(cols, vals, rhs, rhs)

    # state of charge and daily cycle
    k_plus = 3.0 * dt * ess.eta_plus
    k_minus = 3.0 * dt / ess.eta_minus
    for ci in range(C):
        e0 = lay.off_e0 + ci
        cap = lay.off_cap + ci
        # the installation column holds M * B (kWh) so big-M rows stay well scaled
        bvar = lay.off_b + ci
        for d in range(nD):
            for t in range(H):
                e_t = lay.ess(lay.off_e, ci, d, t)
                prev = e0 if t == 0 else lay.ess(lay.off_e, ci, d, t - 1)
                eq.add(
                    [e_t, prev, lay.ess(lay.off_pp, ci, d, t), lay.ess(lay.off_pm, ci, d, t)],
                    [1.0, -1.0, -k_plus, k_minus],
                    0.0,
                    0.0,
                )
                ineq.add([e_t, cap], [1.0, -1.0], -np.inf, 0.0)
                if ess.e_min > 0:
                    ineq.add([e_t, bvar], [1.0, -ess.e_min / M], 0.0, np.inf)
                for off, pmax in ((lay.off_pp, ess.p_max_charge), (lay.off_pm, ess.p_max_discharge)):
                    col = lay.ess(off, ci, d, t)
                    if ess.rate_linked:
                        ineq.add([col, cap], [3.0, -1.0 / ess.c_hours], -np.inf, 0.0)
                    else:
                        ineq.add([col, bvar], [3.0, -pmax / M], -np.inf, 0.0)
            eq.add([lay.ess(lay.off_e, ci, d, H - 1), e0], [1.0, -1.0], 0.0, 0.0)
        ineq.add([e0, cap], [1.0, -1.0], -np.inf, 0.0)
        if ess.e_min > 0:
            ineq.add([e0, bvar], [1.0, -ess.e_min / M], 0.0, np.inf)
        ineq.add([cap, bvar], [1.0, -1.0], -np.inf, 0.0)

    if C and prob.n_ess is not None:
        eq.add(list(range(lay.off_b, lay.off_b + C)), [1.0 / M] * C, float(prob.n_ess), float(prob.n_ess))
    if prob.aggregate_cap is not None:
        if C == 0 and prob.aggregate_cap > 0:
            raise SizingInfeasible("aggregate capacity requested without candidates")
        if C:
            eq.add(list(range(lay.off_cap, lay.off_cap + C)), [1.0] * C, prob.aggregate_cap, prob.aggregate_cap)

    lb = np.full(lay.n, -np.inf)
    ub = np.full(lay.n, np.inf)
    lb[lay.off_b : lay.off_b + C] = 0.0
    ub[lay.off_b : lay.off_b + C] = M
    lb[lay.off_cap : lay.off_pp] = 0.0  # capacities and initial SoC
    lb[lay.off_pp : lay.off_flow] = 0.0  # rates and SoC
    lb[lay.off_v :] = net.v_min / net.v_base
    ub[lay.off_v :] = net.v_max / net.v_base

    qp = QpProblem(
        Q=Q,
        c=c,
        A_eq=eq.matrix(),
        b_eq=np.array(eq.lo),
        A_in=ineq.matrix(),
        l_in=np.array(ineq.lo),
        u_in=np.array(ineq.hi),
        lb=lb,
        ub=ub,
        offset=offset,
    )
    out = SizingQp(qp=qp, layout=lay, problem=prob, big_m=M)
    if fixed_binaries is not None:
        fixed = _check_assignment(prob, fixed_binaries)
        lbq, ubq = out.bounds_for(fixed, fixed)
        out = replace(out, qp=qp.with_bounds(lbq, ubq))
    return out


def _check_assignment(prob: SizingProblem, assignment) -> np.ndarray:
    a = np.asarray(assignment, dtype=float).reshape(-1)
    if a.shape != (len(prob.candidates),):
        raise SizingError("assignment length must match the candidate count")
    if not np.all((a == 0) | (a == 1)):
        raise SizingError("fixed binaries must be 0 or 1")
    if prob.n_ess is not None and a.sum() != prob.n_ess:
        raise SizingError(f"assignment installs {int(a.sum())} units but N = {prob.n_ess}")
    return a


def base_losses_kwh(prob: SizingProblem) -> float:
    """Weighted annual loss of the storage-free linearized model (kWh)."""
    p, q = lin_flows(prob.net, Injection(prob.profiles.net_p(), prob.profiles.net_q()))
    _, total = branch_losses(prob.net, p, q)
    daily = total.sum(axis=-1) * prob.grid.delta_t
    return float(prob.grid.weights @ daily)


def linear_objective_kwh(prob: SizingProblem, placements) -> float:
    """Weighted annual linearized loss with the given placements superimposed."""
    prof, grid = prob.profiles, prob.grid
    ess = placement_injection(prof.bus_ids, placements, grid.n_days, grid.hours_per_day)
    p, q = lin_flows(prob.net, Injection(prof.net_p() + ess, prof.net_q()))
    _, total = branch_losses(prob.net, p, q)
    return float(grid.weights @ (total.sum(axis=-1) * grid.delta_t))


def linear_voltages(prob: SizingProblem, placements) -> np.ndarray:
    """Linearized voltage magnitudes (V), shape (days, hours, buses, 3)."""
    prof, grid = prob.profiles, prob.grid
    ess = placement_injection(prof.bus_ids, placements, grid.n_days, grid.hours_per_day)
    p, q = lin_flows(prob.net, Injection(prof.net_p() + ess, prof.net_q()))
    return lin_voltages(prob.net, p, q)


# ---------------------------------------------------------------------------
# solution extraction


def _close_cycles(pp: np.ndarray, pm: np.ndarray, ess: EssDefaults) -> tuple[np.ndarray, np.ndarray]:
    """Trim the larger of daily charge or discharge so every day returns to its start SoC."""
    pp, pm = pp.copy(), pm.copy()
    for d in range(pp.shape[0]):
        charge = ess.eta_plus * pp[d].sum()
        discharge = pm[d].sum() / ess.eta_minus
        if charge > discharge:
            pp[d] *= discharge / charge
        elif discharge > charge:
            pm[d] *= charge / discharge
    return pp, pm


def _minimal_size(pp: np.ndarray, pm: np.ndarray, ess: EssDefaults, dt: float) -> tuple[float, float]:
    """Lowest e0 keeping SoC above ``e_min`` and the smallest capacity admitting the schedule."""
    step = 3.0 * dt * (ess.eta_plus * pp - pm / ess.eta_minus)
    cum = np.concatenate([np.zeros((pp.shape[0], 1)), np.cumsum(step, axis=1)], axis=1)
    e0 = ess.e_min - float(cum.min())
    cap = e0 + float(cum.max())
    if ess.rate_linked:
        cap = max(cap, ess.c_hours * 3.0 * float(max(pp.max(initial=0.0), pm.max(initial=0.0))))
    return e0, cap


def _placements_from_x(sq: SizingQp, x: np.ndarray, assignment: np.ndarray) -> tuple:
    """Turn a QP solution into canonical placements.

    For lossless storage the schedule is netted, e0 is the lowest start that
    keeps SoC above ``e_min`` and the capacity is the smallest one that
    admits the schedule; with an aggregate-capacity equality the slack is
    shared in proportion to those minimal capacities.
    """
    prob, lay = sq.problem, sq.layout
    ess, grid = prob.ess, prob.grid
    H, nD = lay.hours, lay.n_days
    dt = grid.delta_t
    raw = []
    for ci, bus in enumerate(prob.candidates):
        if assignment[ci] < 0.5:
            continue
        sl = lambda off: x[lay.ess(off, ci, 0, 0) : lay.ess(off, ci, 0, 0) + nD * H].reshape(nD, H)
        pp, pm = sl(lay.off_pp), sl(lay.off_pm)
        scale = max(1.0, float(np.max(np.abs(pp), initial=0.0)), float(np.max(np.abs(pm), initial=0.0)))
        if ess.lossless:
            net = pp - pm
            net[np.abs(net) < 1e-9 * scale] = 0.0
            pp, pm = np.maximum(net, 0.0), np.maximum(-net, 0.0)
        else:
            pp = np.where(pp < 1e-9 * scale, 0.0, pp)
            pm = np.where(pm < 1e-9 * scale, 0.0, pm)
        pp, pm = _close_cycles(pp, pm, ess)
        raw.append([bus, pp, pm])
    if prob.aggregate_cap is not None and raw:
        # solver tolerance can leave the minimal sizes a hair above the
        # aggregate; shrink the schedules until they fit, then share the slack
        for _ in range(5):
            total = sum(_minimal_size(pp, pm, ess, dt)[1] for _, pp, pm in raw)
            if total <= prob.aggregate_cap or total <= 0:
                break
            f = prob.aggregate_cap / total
            raw = [[bus, pp * f, pm * f] for bus, pp, pm in raw]
    sized = []
    for bus, pp, pm in raw:
        e0, cap = _minimal_size(pp, pm, ess, dt)
        sized.append([bus, cap, e0, pp, pm])
    raw = sized
    if prob.aggregate_cap is not None and raw:
        total = sum(r[1] for r in raw)
        slack = max(prob.aggregate_cap - total, 0.0)
        for r in raw:
            share = r[1] / total if total > 0 else 1.0 / len(raw)
            r[1] = r[1] + slack * share
    out = []
    for bus, cap, e0, pp, pm in raw:
        if ess.rate_linked:
            pmax_c = pmax_d = cap / ess.c_hours
        else:
            pmax_c, pmax_d = ess.p_max_charge, ess.p_max_discharge
        out.append(
            Placement(
                bus=bus,
                capacity_kwh=float(cap),
                e0_kwh=float(e0),
                schedules=tuple(EssSchedule(pp[d].copy(), pm[d].copy()) for d in range(nD)),
                p_max_charge=float(pmax_c),
                p_max_discharge=float(pmax_d),
                e_min=ess.e_min,
                eta_plus=ess.eta_plus,
                eta_minus=ess.eta_minus,
            )
        )
    return tuple(out)


# ---------------------------------------------------------------------------
# fixed-assignment evaluation shared by branch-and-bound and enumeration


class _Evaluator:
    def __init__(self, sq: SizingQp):
        self.sq = sq
        self.solver = AdmmSolver(sq.qp, sq.problem.qp)
        self.cache: dict = {}
        self.qp_solves = 0
        self.qp_iterations = 0

    def solve(self, lb_b, ub_b, warm: QpSolution | None = None) -> QpSolution:
        self.solver.update_bounds(*self.sq.bounds_for(lb_b, ub_b))
        if warm is not None:
            res = self.solver.solve(warm.x, warm.y)
        else:
            res = self.solver.solve()
        self.qp_solves += 1
        self.qp_iterations += res.iterations
        if res.status not in (OPTIMAL, INFEASIBLE):
            raise SizingError(
                f"QP solver stopped with status {res.status} after {res.iterations} iterations "
                f"(primal {res.primal_residual:.3g}, dual {res.dual_residual:.3g})"
            )
        return res

    def fixed(self, assignment) -> QpSolution:
        key = tuple(int(a) for a in assignment)
        if key not in self.cache:
            a = np.asarray(key, dtype=float)
            # cold start so the value depends on the assignment alone
            self.cache[key] = self.solve(a, a)
        return self.cache[key]


def _tie_tol(value: float) -> float:
    return TIE_RTOL * max(1.0, abs(value))


def _better(obj: float, buses: tuple, best_obj: float, best_buses: tuple | None) -> bool:
    if best_buses is None:
        return True
    if obj < best_obj - _tie_tol(best_obj):
        return True
    return abs(obj - best_obj) <= _tie_tol(best_obj) and buses < best_buses


def _finish(sq: SizingQp, ev: _Evaluator, assignment, res: QpSolution, nodes, t0, gap) -> SizingSolution:
    prob = sq.problem
    a = np.asarray(assignment, dtype=float)
    placements = _placements_from_x(sq, res.x, a)
    return SizingSolution(
        placements=placements,
        objective_kwh=float(res.objective_value),
        base_objective_kwh=base_losses_kwh(prob),
        assignment=tuple(int(v) for v in a),
        stats=SolverStats(nodes=nodes, qp_solves=ev.qp_solves, qp_iterations=ev.qp_iterations, wall_time=time.perf_counter() - t0),
        optimality_gap=gap,
        qp=res,
    )


def _structurally_feasible(prob: SizingProblem, lb_b: np.ndarray, ub_b: np.ndarray) -> bool:
    if prob.n_ess is None:
        return True
    return lb_b.sum() <= prob.n_ess + 1e-9 and ub_b.sum() >= prob.n_ess - 1e-9


def solve_miqp(prob: SizingProblem) -> SizingSolution:
    """Best-first branch-and-bound over the installation binaries.

    Ties within ``TIE_RTOL`` are resolved towards the lexicographically
    smallest tuple of installed bus ids, so nodes whose bound ties the
    incumbent are still explored.
    """
    t0 = time.perf_counter()
    sq = build_qp(prob)
    ev = _Evaluator(sq)
    C = len(prob.candidates)
    if C == 0:
        if prob.n_ess:
            raise SizingInfeasible("N > 0 but there are no candidate buses")
        res = ev.fixed(())
        if res.status == INFEASIBLE:
            raise SizingInfeasible("voltage limits cannot be met")
        return _finish(sq, ev, (), res, 1, t0, 0.0)

    best_obj = math.inf
    best_assign = None
    best_buses = None
    counter = itertools.count()
    lb0, ub0 = np.zeros(C), np.ones(C)
    heap = []
    nodes = 0
    root = ev.solve(lb0, ub0) if _structurally_feasible(prob, lb0, ub0) else None
    if root is not None and root.status == OPTIMAL:
        heapq.heappush(heap, (root.objective_value, next(counter), lb0, ub0, root))
    nodes += 1
    while heap:
        if nodes >= prob.node_limit:
            log.warning("node limit %d reached", prob.node_limit)
            break
        bound, _, lb_b, ub_b, res = heapq.heappop(heap)
        if best_buses is not None and bound > best_obj + _tie_tol(best_obj):
            heap.clear()
            break
        b = res.x[sq.layout.binaries] / sq.big_m
        b = np.clip(b, lb_b, ub_b)
        frac = np.minimum(b - np.floor(b), np.ceil(b) - b)
        free = ub_b - lb_b > 0.5
        frac = np.where(free, frac, 0.0)
        if np.all(frac <= INTEGRALITY_TOL):
            assign = np.round(b)
            if _structurally_feasible(prob, assign, assign):
                fixed = ev.fixed(assign)
                if fixed.status == OPTIMAL:
                    buses = tuple(c for c, a in zip(prob.candidates, assign) if a > 0.5)
                    if _better(fixed.objective_value, buses, best_obj, best_buses):
                        best_obj, best_assign, best_buses = fixed.objective_value, assign, buses
            # a tie could still hide a lower-id placement among the free binaries
            if not np.any(free):
                continue
            j = int(np.flatnonzero(free)[0])
        else:
            # most fractional, lowest candidate index on ties
            j = int(np.argmax(frac))
        for val in (0.0, 1.0) if b[j] < 0.5 else (1.0, 0.0):
            lb_c, ub_c = lb_b.copy(), ub_b.copy()
            lb_c[j] = ub_c[j] = val
            nodes += 1
            if not _structurally_feasible(prob, lb_c, ub_c):
                continue
            child = ev.solve(lb_c, ub_c, warm=res)
            if child.status != OPTIMAL:
                continue
            if best_buses is not None and child.objective_value > best_obj + _tie_tol(best_obj):
                continue
            heapq.heappush(heap, (child.objective_value, next(counter), lb_c, ub_c, child))
    if best_assign is None:
        raise SizingInfeasible("no installation pattern satisfies the constraints")
    open_bound = min((h[0] for h in heap), default=best_obj)
    best_bound = min(open_bound, best_obj)
    gap = max(0.0, (best_obj - best_bound) / abs(best_obj)) if best_obj != 0 else 0.0
    return _finish(sq, ev, best_assign, ev.fixed(best_assign), nodes, t0, gap)


def enumerate_oracle(prob: SizingProblem, budget: int = ENUMERATION_BUDGET) -> SizingSolution:
    """Solve the QP for every binary pattern and keep the best one."""
    t0 = time.perf_counter()
    C = len(prob.candidates)
    if prob.n_ess is not None:
        count = math.comb(C, prob.n_ess)
        patterns = itertools.combinations(range(C), prob.n_ess)
    else:
        count = 2**C
        patterns = itertools.chain.from_iterable(itertools.combinations(range(C), k) for k in range(C + 1))
    if count > budget:
        raise SizingError(f"{count} assignments exceed the enumeration budget of {budget}")
    sq = build_qp(prob)
    ev = _Evaluator(sq)
    best = None
    nodes = 0
    for combo in patterns:
        a = np.zeros(C)
        a[list(combo)] = 1.0
        res = ev.fixed(a)
        nodes += 1
        if res.status != OPTIMAL:
            continue
        buses = tuple(prob.candidates[i] for i in combo)
        if best is None or _better(res.objective_value, buses, best[0], best[1]):
            best = (res.objective_value, buses, a, res)
    if best is None:
        raise SizingInfeasible("no installation pattern satisfies the constraints")
    return _finish(sq, ev, best[2], best[3], nodes, t0, 0.0)


def default_capacity_bound(prob: SizingProblem) -> float:
    """Twice the capacity of the single-unit optimum found under a generous bound."""
    single = replace(prob, n_ess=1, aggregate_cap=None, capacity_bound=generous_capacity_bound(prob))
    sol = solve_miqp(single)
    cap = sol.total_capacity
    return 2.0 * cap if cap > 0 else generous_capacity_bound(prob)


# ---------------------------------------------------------------------------
# community versus distributed storage


@dataclass(frozen=True)
class DessRow:
    n: int
    buses: tuple
    capacities: tuple
    objective_kwh: float
    loss_kwh: float
    loss_reduction_pct: float
    hosting_kw: float
    hosting_increase_pct: float
    vuf_max_percent: float
    vuf_max_bus: int
    vuf_avg_percent: float
    solution: SizingSolution


@dataclass(frozen=True)
class DessStudy:
    base_loss_kwh: float
    base_hosting_kw: float
    base_vuf_max_percent: float
    base_vuf_avg_percent: float
    hosting_day: str
    rows: tuple


def dess_study(
    prob: SizingProblem,
    n_values,
    hosting_day: str | None = None,
    tol_kw: float = 0.01,
    unit_rating_kw: float = 1.0,
    jobs: int = 1,
) -> DessStudy:
    """Solve the aggregate-capacity MIQP for each N and evaluate the indices.

    Losses, hosting and VUF come from exact power flow; the reductions are
    relative to the storage-free feeder. With ``jobs > 1`` the N values are
    solved in worker processes; rows keep the order of ``n_values``.
    """
    from . import analysis

    if prob.aggregate_cap is None:
        raise SizingError("the distributed study needs aggregate_cap from a prior single-unit solve")
    n_values = [int(n) for n in n_values]
    if any(n < 1 for n in n_values):
        raise SizingError("N values must be at least 1")
    net, prof, grid = prob.net, prob.profiles, prob.grid
    day = hosting_day if hosting_day is not None else analysis.default_hosting_day(grid)
    base_loss = analysis.annual_losses(net, prof, grid)
    base_host = analysis.hosting_capacity(net, prof, grid, day, (), tol_kw, unit_rating_kw)
    base_vuf = analysis.vuf_study(net, prof, grid)
    args = [(prob, n, day, tol_kw, unit_rating_kw, base_loss.annual_kwh, base_host.total_kw) for n in n_values]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
            rows = list(pool.map(_dess_row, args))
    else:
        rows = [_dess_row(a) for a in args]
    return DessStudy(
        base_loss_kwh=base_loss.annual_kwh,
        base_hosting_kw=base_host.total_kw,
        base_vuf_max_percent=base_vuf.max_percent,
        base_vuf_avg_percent=base_vuf.avg_percent,
        hosting_day=day,
        rows=tuple(rows),
    )


def _dess_row(args) -> DessRow:
    from . import analysis

    prob, n, day, tol_kw, unit_rating_kw, base_loss, base_host = args
    net, prof, grid = prob.net, prob.profiles, prob.grid
    sol = solve_miqp(replace(prob, n_ess=n))
    loss = analysis.annual_losses(net, prof, grid, sol.placements)
    host = analysis.hosting_capacity(net, prof, grid, day, sol.placements, tol_kw, unit_rating_kw)
    vs = analysis.vuf_study(net, prof, grid, sol.placements)
    return DessRow(
        n=n,
        buses=sol.buses,
        capacities=tuple(p.capacity_kwh for p in sol.placements),
        objective_kwh=sol.objective_kwh,
        loss_kwh=loss.annual_kwh,
        loss_reduction_pct=_pct_change(base_loss, loss.annual_kwh, reduction=True),
        hosting_kw=host.total_kw,
        hosting_increase_pct=_pct_change(host.total_kw, base_host),
        vuf_max_percent=vs.max_percent,
        vuf_max_bus=vs.bus,
        vuf_avg_percent=vs.avg_percent,
        solution=sol,
    )


def _pct_change(a: float, b: float, reduction: bool = False) -> float:
    """Percent change of ``a`` over ``b``, or percent reduction from ``a`` to ``b``."""
    if reduction:
        return 100.0 * (1.0 - b / a) if a > 0 else 0.0
    return 100.0 * (a / b - 1.0) if b > 0 else 0.0
