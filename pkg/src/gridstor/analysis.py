"""Performance indices from exact power flow: annual losses, PV hosting
capacity and the voltage unbalance factor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netmodel import PHASES, Network
from .powerflow import Injection, PowerFlowError, PowerFlowSolution, solve_exact
from .profiles import ProfileSet, TimeGrid
from .storage import placement_injection

_ALPHA = np.exp(2j * np.pi / 3)
_HALF_SQRT3 = math.sqrt(3.0) / 2.0
_ZERO_SEQUENCE_RTOL = 1e-12
VUF_LIMIT_PERCENT = 2.0
MAX_PV_SCALE = 1e4


class ConvergenceError(PowerFlowError):
    def __init__(self, day: str, hour: int):
        super().__init__(f"power flow did not converge on day {day!r} hour {hour}")
        self.day = day
        self.hour = hour


class HostingError(RuntimeError):
    pass


class UndefinedVufError(ValueError):
    pass


def _injection(prof: ProfileSet, placements) -> Injection:
    ess = placement_injection(prof.bus_ids, placements, prof.n_days, prof.n_hours) if placements else 0.0
    return Injection(prof.p_load - prof.p_pv + ess, prof.q_load - prof.q_pv)


def _solve_checked(net: Network, inj: Injection, grid: TimeGrid) -> PowerFlowSolution:
    sol = solve_exact(net, inj)
    if sol.converged:
        return sol
    # locate the first failing snapshot
    for d in range(inj.p.shape[0]):
        for t in range(inj.p.shape[1]):
            one = solve_exact(net, Injection(inj.p[d, t], inj.q[d, t]))
            if not one.converged:
                raise ConvergenceError(grid.days[d].id, t)
    raise ConvergenceError(grid.days[0].id, 0)


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossReport:
    annual_kwh: float
    seasonal_kwh: dict
    daily_kwh: tuple  # unweighted loss of each representative day

    def reduction_vs(self, base: LossReport) -> float:
        if base.annual_kwh <= 0:
            return 0.0
        return 1.0 - self.annual_kwh / base.annual_kwh


def annual_losses(net: Network, profiles: ProfileSet, grid: TimeGrid, placements=()) -> LossReport:
    """Weighted annual feeder losses (kWh) from an exact solve of every hour."""
    sol = _solve_checked(net, _injection(profiles, placements), grid)
    daily = sol.total_loss.sum(axis=-1) * grid.delta_t
    seasonal: dict = {}
    for day, energy in zip(grid.days, daily):
        seasonal[day.season] = seasonal.get(day.season, 0.0) + day.weight * float(energy)
    annual = float(sum(seasonal.values()))
    return LossReport(annual, seasonal, tuple(float(e) for e in daily))


# ---------------------------------------------------------------------------
# hosting capacity


@dataclass(frozen=True)
class HostingResult:
    scale: float
    per_unit_rating_kw: float
    total_kw: float
    bus: int | None  # binding location, None when there is no PV to scale
    hour: int | None
    phase: str | None
    day: str


def _overvoltage(net: Network, inj: Injection):
    """First (hour, bus, phase) above the upper limit, or None.

    A non-converged solve counts as a violation at its worst voltage.
    """
    sol = solve_exact(net, inj)
    vm = np.where(np.isfinite(sol.vmag), sol.vmag, np.inf)
    if sol.converged and vm.max(initial=0.0) <= net.v_max:
        return None
    t, k, f = np.unravel_index(int(np.argmax(vm - net.v_max)), vm.shape)
    return int(t), sol.bus_ids[k], PHASES[f]


def hosting_capacity(
    net: Network,
    profiles: ProfileSet,
    grid: TimeGrid,
    day: str,
    placements=(),
    tol_kw: float = 0.01,
    unit_rating_kw: float = 1.0,
    max_scale: float = MAX_PV_SCALE,
) -> HostingResult:
    """Largest uniform PV scaling keeping every voltage at or below ``v_max``.

    ``unit_rating_kw`` is the rating of one PV system at scale 1; the search
    stops once the bracket is narrower than ``tol_kw`` of that rating. ESS
    schedules are held fixed while PV grows.
    """
    if tol_kw <= 0 or unit_rating_kw <= 0:
        raise ValueError("tolerance and unit rating must be positive")
    if not math.isfinite(net.v_max):
        raise HostingError("search bound exhausted: the upper voltage limit is infinite")
    k = grid.day_index(day)
    prof = profiles.select_day(k)
    ess = (
        placement_injection(prof.bus_ids, placements, profiles.n_days, prof.n_hours)[k]
        if placements
        else np.zeros(prof.p_load.shape[1:])
    )
    p_load, q_load = prof.p_load[0] + ess, prof.q_load[0]
    p_pv, q_pv = prof.p_pv[0], prof.q_pv[0]

    def violation(alpha: float):
        return _overvoltage(net, Injection(p_load - alpha * p_pv, q_load - alpha * q_pv))

    base = solve_exact(net, Injection(p_load - p_pv, q_load - q_pv))
    if not base.converged or base.vmag.max() > net.v_max or base.vmag[..., 1:, :].min() < net.v_min:
        raise HostingError(f"base case on day {day!r} already violates the voltage limits")
    if not np.any(p_pv > 0):
        # nothing to scale: the feeder hosts no PV on this day
        return HostingResult(0.0, 0.0, 0.0, None, None, None, day)

    lo, hi = 1.0, 2.0
    worst = violation(hi)
    while worst is None:
        lo, hi = hi, 2.0 * hi
        if hi > max_scale:
            raise HostingError(f"search bound exhausted: no violation up to {max_scale:g}x PV")
        worst = violation(hi)
    step = tol_kw / unit_rating_kw
    while hi - lo > step:
        mid = 0.5 * (lo + hi)
        v = violation(mid)
        if v is None:
            lo = mid
        else:
            hi, worst = mid, v
    hour, bus, phase = worst
    total = float(lo * prof.pv_peaks().sum())
    return HostingResult(lo, lo * unit_rating_kw, total, bus, hour, phase, day)


# ---------------------------------------------------------------------------
# voltage unbalance


def sequence_components(va, vb, vc) -> tuple[np.ndarray, np.ndarray]:
    """Magnitudes of the positive- and negative-sequence voltages."""
    va, vb, vc = (np.asarray(v, dtype=complex) for v in (va, vb, vc))
    pos = np.abs(va + _ALPHA * vb + _ALPHA**2 * vc) / 3.0
    neg = np.abs(va + _ALPHA**2 * vb + _ALPHA * vc) / 3.0
    return pos, neg


def _check_positive(pos, va, vb, vc) -> None:
    # a positive sequence lost in rounding counts as zero
    scale = (np.abs(va) + np.abs(vb) + np.abs(vc)) / 3.0
    if np.any(pos <= _ZERO_SEQUENCE_RTOL * scale):
        raise UndefinedVufError("positive-sequence voltage is zero; VUF undefined")


def vuf_from_phasors(va, vb, vc):
    """Voltage unbalance factor ``100 v- / v+`` in percent."""
    pos, neg = sequence_components(va, vb, vc)
    _check_positive(pos, va, vb, vc)
    out = 100.0 * neg / pos
    return float(out) if np.ndim(out) == 0 else out


def _local_vuf(wa, wb, wc):
    """VUF from phasors in their own phase frames.

    Removing the nominal angles turns the sequence sums into
    ``v+ = (wa + wb + wc) / 3`` and ``v- = (wa - (wb + wc) / 2 + j sqrt(3)/2 (wb - wc)) / 3``,
    which vanish exactly when the three phases agree.
    """
    pos = np.abs(wa + wb + wc) / 3.0
    neg = np.abs(wa - 0.5 * (wb + wc) + 1j * _HALF_SQRT3 * (wb - wc)) / 3.0
    _check_positive(pos, wa, wb, wc)
    out = 100.0 * neg / pos
    return float(out) if np.ndim(out) == 0 else out


def vuf(sol: PowerFlowSolution, bus: int):
    """VUF (%) at one bus, over all batch axes of the solution."""
    w = sol.voltage_local[..., sol.bus_position(bus), :]
    return _local_vuf(w[..., 0], w[..., 1], w[..., 2])


@dataclass(frozen=True)
class VufSummary:
    max_percent: float
    bus: int
    day: str
    hour: int
    avg_percent: float
    series: np.ndarray  # [day, hour, bus] for the buses in ``buses``
    buses: tuple


def vuf_study(net: Network, profiles: ProfileSet, grid: TimeGrid, placements=()) -> VufSummary:
    """Maximum and day-weighted mean VUF over all three-phase non-source buses."""
    sol = _solve_checked(net, _injection(profiles, placements), grid)
    buses = tuple(
        b for b in sol.bus_ids if b != net.substation_bus and net.bus_map[b].phases_present == frozenset(PHASES)
    )
    if not buses:
        raise UndefinedVufError("no three-phase buses to evaluate")
    series = np.stack([vuf(sol, b) for b in buses], axis=-1)
    d, t, k = np.unravel_index(int(np.argmax(series)), series.shape)
    w = grid.weights
    avg = float(np.sum(w[:, None, None] * series) / (w.sum() * series.shape[1] * series.shape[2]))
    return VufSummary(float(series[d, t, k]), buses[k], grid.days[d].id, int(t), avg, series, buses)


# ---------------------------------------------------------------------------
# combined report


@dataclass(frozen=True)
class IndexReport:
    annual_loss_kwh: float
    seasonal_loss_kwh: dict
    hosting_kw: float
    hosting_per_unit_rating_kw: float
    hosting_day: str
    hosting_bus: int | None
    hosting_hour: int | None
    vuf_max_percent: float
    vuf_max_bus: int
    vuf_max_day: str
    vuf_max_hour: int
    vuf_avg_percent: float


def index_report(
    net: Network,
    profiles: ProfileSet,
    grid: TimeGrid,
    placements=(),
    hosting_day: str | None = None,
    tol_kw: float = 0.01,
    unit_rating_kw: float = 1.0,
) -> IndexReport:
    losses = annual_losses(net, profiles, grid, placements)
    day = hosting_day if hosting_day is not None else default_hosting_day(grid)
    host = hosting_capacity(net, profiles, grid, day, placements, tol_kw, unit_rating_kw)
    vs = vuf_study(net, profiles, grid, placements)
    return IndexReport(
        annual_loss_kwh=losses.annual_kwh,
        seasonal_loss_kwh=losses.seasonal_kwh,
        hosting_kw=host.total_kw,
        hosting_per_unit_rating_kw=host.per_unit_rating_kw,
        hosting_day=host.day,
        hosting_bus=host.bus,
        hosting_hour=host.hour,
        vuf_max_percent=vs.max_percent,
        vuf_max_bus=vs.bus,
        vuf_max_day=vs.day,
        vuf_max_hour=vs.hour,
        vuf_avg_percent=vs.avg_percent,
    )


def default_hosting_day(grid: TimeGrid) -> str:
    """The first summer day (lightest loading, strongest PV), else the first day."""
    for d in grid.days:
        if d.season == "summer":
            return d.id
    return grid.days[0].id
