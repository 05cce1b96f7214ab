"""Three-phase ESS state-of-charge model and schedule feasibility checks."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

CYCLE_TOL_KWH = 1e-6
SCHEDULE_HEADER = ("hour", "p_plus_kw_per_phase", "p_minus_kw_per_phase")


@dataclass(frozen=True)
class EssSpec:
    """Storage parameters. Rates are three-phase totals, energies in kWh."""

    e_max: float
    p_max_charge: float
    p_max_discharge: float
    e_min: float = 0.0
    e0: float = 0.0
    eta_plus: float = 1.0
    eta_minus: float = 1.0

    def __post_init__(self):
        if not (0 < self.eta_plus <= 1 and 0 < self.eta_minus <= 1):
            raise ValueError("efficiencies must lie in (0, 1]")
        if not 0 <= self.e_min <= self.e0 <= self.e_max:
            raise ValueError("need 0 <= e_min <= e0 <= e_max")
        if self.p_max_charge < 0 or self.p_max_discharge < 0:
            raise ValueError("rate limits must be non-negative")

    @classmethod
    def from_capacity(cls, capacity: float, c_hours: float = 2.0, e0: float | None = None, **kw) -> EssSpec:
        """Spec whose rate limits follow the capacity (``capacity / c_hours``)."""
        rate = capacity / c_hours
        return cls(e_max=capacity, p_max_charge=rate, p_max_discharge=rate, e0=capacity if e0 is None else e0, **kw)


@dataclass(frozen=True)
class EssSchedule:
    """Per-phase charge and discharge rates (kW) for each hour of one cycle."""

    p_plus: np.ndarray
    p_minus: np.ndarray

    def __post_init__(self):
        p_plus = np.asarray(self.p_plus, dtype=float)
        p_minus = np.asarray(self.p_minus, dtype=float)
        if p_plus.shape != p_minus.shape or p_plus.ndim != 1:
            raise ValueError("schedule arrays must be 1-D and of equal length")
        object.__setattr__(self, "p_plus", p_plus)
        object.__setattr__(self, "p_minus", p_minus)

    def __len__(self) -> int:
        return len(self.p_plus)

    @property
    def net(self) -> np.ndarray:
        """Per-phase net consumption (charging positive)."""
        return self.p_plus - self.p_minus

    @classmethod
    def zeros(cls, hours: int = 24) -> EssSchedule:
        return cls(np.zeros(hours), np.zeros(hours))

    @classmethod
    def from_net(cls, net: np.ndarray) -> EssSchedule:
        net = np.asarray(net, dtype=float)
        return cls(np.maximum(net, 0.0), np.maximum(-net, 0.0))

    def netted(self) -> EssSchedule:
        """Equivalent schedule with simultaneous charge/discharge cancelled."""
        return EssSchedule.from_net(self.net)


@dataclass(frozen=True)
class Violation:
    kind: str
    hour: int | None
    magnitude: float

    def __str__(self) -> str:
        where = "cycle" if self.hour is None else f"hour {self.hour}"
        return f"{self.kind} at {where}: {self.magnitude:.6g}"


def soc_trajectory(spec: EssSpec, sched: EssSchedule, delta_t: float = 1.0) -> np.ndarray:
    """SoC series ``e_0 .. e_T`` (length T + 1) under the per-phase schedule."""
    step = 3.0 * (spec.eta_plus * sched.p_plus - sched.p_minus / spec.eta_minus) * delta_t
    return spec.e0 + np.concatenate(([0.0], np.cumsum(step)))


def cycle_imbalance(spec: EssSpec, sched: EssSchedule, delta_t: float = 1.0) -> float:
    """Net stored energy over the cycle (kWh, three-phase)."""
    return float(3.0 * delta_t * np.sum(spec.eta_plus * sched.p_plus - sched.p_minus / spec.eta_minus))


def check_cycle(spec: EssSpec, sched: EssSchedule, delta_t: float = 1.0) -> list[Violation]:
    """Empty list iff the cycle returns the SoC to its starting value."""
    imbalance = cycle_imbalance(spec, sched, delta_t)
    if abs(imbalance) > CYCLE_TOL_KWH:
        return [Violation("cycle", None, abs(imbalance))]
    return []


def check_limits(spec: EssSpec, sched: EssSchedule, delta_t: float = 1.0, tol: float = 1e-9) -> list[Violation]:
    """Flag every hour breaching a rate limit or the SoC window.

    Rate violations carry the 0-based schedule hour; SoC violations carry the
    trajectory index ``t`` of the offending ``e_t`` (1..T).
    """
    out = []
    for h, (pp, pm) in enumerate(zip(sched.p_plus, sched.p_minus)):
        if pp < -tol:
            out.append(Violation("negative_charge", h, -pp))
        if pm < -tol:
            out.append(Violation("negative_discharge", h, -pm))
        if 3 * pp > spec.p_max_charge + tol:
            out.append(Violation("charge_rate", h, 3 * pp - spec.p_max_charge))
        if 3 * pm > spec.p_max_discharge + tol:
            out.append(Violation("discharge_rate", h, 3 * pm - spec.p_max_discharge))
    soc = soc_trajectory(spec, sched, delta_t)
    for t in range(1, len(soc)):
        e = soc[t]
        if e > spec.e_max + tol:
            out.append(Violation("soc_high", t, e - spec.e_max))
        elif e < spec.e_min - tol:
            out.append(Violation("soc_low", t, spec.e_min - e))
    return out


def simultaneous_hours(sched: EssSchedule, tol: float = 1e-9) -> list[int]:
    """Hours with both charging and discharging (a warning, not a violation)."""
    return [int(h) for h in np.flatnonzero((sched.p_plus > tol) & (sched.p_minus > tol))]


def format_schedule(sched: EssSchedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCHEDULE_HEADER)
    for h, (pp, pm) in enumerate(zip(sched.p_plus, sched.p_minus)):
        w.writerow([h, repr(float(pp)), repr(float(pm))])
    return buf.getvalue()


def parse_schedule(text: str) -> EssSchedule:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != SCHEDULE_HEADER:
        raise ValueError("schedule header must be " + ",".join(SCHEDULE_HEADER))
    body = [r for r in rows[1:] if r]
    hours = [int(r[0]) for r in body]
    if hours != list(range(len(body))):
        raise ValueError("schedule hours must run 0..T-1 in order")
    return EssSchedule(np.array([float(r[1]) for r in body]), np.array([float(r[2]) for r in body]))



@dataclass(frozen=True)
class Placement:
    """An installed three-phase unit with one schedule per representative day."""

    bus: int
    capacity_kwh: float
    e0_kwh: float
    schedules: tuple
    p_max_charge: float
    p_max_discharge: float
    e_min: float = 0.0
    eta_plus: float = 1.0
    eta_minus: float = 1.0

    @property
    def spec(self) -> EssSpec:
        return EssSpec(
            e_max=self.capacity_kwh,
            p_max_charge=self.p_max_charge,
            p_max_discharge=self.p_max_discharge,
            e_min=self.e_min,
            e0=self.e0_kwh,
            eta_plus=self.eta_plus,
            eta_minus=self.eta_minus,
        )

    def net_array(self) -> np.ndarray:
        """Per-phase net consumption, shape (n_days, hours)."""
        return np.array([s.net for s in self.schedules])

    def violations(self, delta_t: float = 1.0) -> list[Violation]:
        out = []
        spec = self.spec
        for sched in self.schedules:
            out += check_cycle(spec, sched, delta_t) + check_limits(spec, sched, delta_t)
        return out


def placement_injection(bus_ids, placements, n_days: int, hours: int) -> np.ndarray:
    """ESS consumption per phase as an array ``[day, hour, bus position, phase]``."""
    index = {b: k for k, b in enumerate(bus_ids)}
    out = np.zeros((n_days, hours, len(bus_ids), 3))
    for pl in placements:
        net = pl.net_array()
        if net.shape != (n_days, hours):
            raise ValueError(f"placement at bus {pl.bus}: schedules do not match the time grid")
        out[:, :, index[pl.bus], :] += net[:, :, None]
    return out
