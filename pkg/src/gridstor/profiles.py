"""Hourly per-phase load and PV profiles over weighted representative days."""

from __future__ import annotations

import contextlib
import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .netmodel import PHASES, Network

CSV_HEADER = ("bus", "phase", "day", "hour", "p_load_kw", "q_load_kvar", "p_pv_kw", "q_pv_kvar")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class Day:
    id: str
    season: str
    weight: float


DEFAULT_DAYS = (
    Day("summer", "summer", 90.0),
    Day("autumn", "autumn", 91.0),
    Day("winter", "winter", 92.0),
    Day("spring", "spring", 92.0),
)


@dataclass(frozen=True)
class TimeGrid:
    days: tuple = DEFAULT_DAYS
    hours_per_day: int = 24
    delta_t: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "days", tuple(self.days))
        if self.delta_t <= 0:
            raise ProfileError("delta_t must be positive")
        if self.hours_per_day <= 0:
            raise ProfileError("hours_per_day must be positive")
        if not self.days:
            raise ProfileError("time grid needs at least one day")
        if len({d.id for d in self.days}) != len(self.days):
            raise ProfileError("duplicate day id")
        total = sum(d.weight for d in self.days)
        if abs(total - 365.0) > 0.5:
            raise ProfileError(f"day weights sum to {total}, expected 365 +/- 0.5")

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def weights(self) -> np.ndarray:
        return np.array([d.weight for d in self.days])

    def day_index(self, day_id: str) -> int:
        for k, d in enumerate(self.days):
            if d.id == day_id:
                return k
        raise ProfileError(f"unknown day id {day_id!r}")


def single_day_grid(day_id: str = "day", season: str = "summer", hours: int = 24) -> TimeGrid:
    """One representative day standing for the whole year."""
    return TimeGrid(days=(Day(day_id, season, 365.0),), hours_per_day=hours)


@dataclass(frozen=True)
class ProfileSet:
    """Per-phase series indexed ``[day, hour, bus position, phase]``.

    Bus positions follow ``bus_ids`` (the network's depth order). Powers are
    in kW/kvar, loads positive. PV is stored unscaled (``p_pv0``) together
    with a scalar multiplier so repeated scaling composes exactly.
    """

    bus_ids: tuple
    p_load: np.ndarray
    q_load: np.ndarray
    p_pv0: np.ndarray
    q_pv0: np.ndarray
    pv_scale: float = 1.0

    def __post_init__(self):
        shape = self.p_load.shape
        for name in ("q_load", "p_pv0", "q_pv0"):
            if getattr(self, name).shape != shape:
                raise ProfileError(f"{name} shape mismatch")
        if len(shape) != 4 or shape[2] != len(self.bus_ids) or shape[3] != 3:
            raise ProfileError(f"bad profile array shape {shape}")
        if np.any(self.p_load < 0):
            raise ProfileError("negative load")
        if np.any(self.p_pv0 < 0) or self.pv_scale < 0:
            raise ProfileError("negative PV generation")
        for name in ("p_load", "q_load", "p_pv0", "q_pv0"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ProfileError(f"non-finite values in {name}")
            arr.setflags(write=False)

    @cached_property
    def p_pv(self) -> np.ndarray:
        if self.pv_scale == 1.0:
            return self.p_pv0
        out = self.p_pv0 * self.pv_scale
        out.setflags(write=False)
        return out

    @cached_property
    def q_pv(self) -> np.ndarray:
        if self.pv_scale == 1.0:
            return self.q_pv0
        out = self.q_pv0 * self.pv_scale
        out.setflags(write=False)
        return out

    @property
    def n_days(self) -> int:
        return self.p_load.shape[0]

    @property
    def n_hours(self) -> int:
        return self.p_load.shape[1]

    def net_p(self) -> np.ndarray:
        return self.p_load - self.p_pv

    def net_q(self) -> np.ndarray:
        return self.q_load - self.q_pv

    def pv_peaks(self) -> np.ndarray:
        """Peak PV output of each (bus, phase) system across all days."""
        if self.n_days == 0:
            return np.zeros((len(self.bus_ids), 3))
        return self.p_pv.max(axis=(0, 1))

    def annual_energy_kwh(self, grid: TimeGrid) -> float:
        """Weighted annual energy of load plus PV (both counted positive)."""
        daily = (self.p_load + self.p_pv).sum(axis=(1, 2, 3)) * grid.delta_t
        return float(grid.weights @ daily)

    def select_day(self, k: int) -> ProfileSet:
        sl = slice(k, k + 1)
        return ProfileSet(
            self.bus_ids, self.p_load[sl], self.q_load[sl], self.p_pv0[sl], self.q_pv0[sl], self.pv_scale
        )


def zero_profiles(net: Network, grid: TimeGrid) -> ProfileSet:
    shape = (grid.n_days, grid.hours_per_day, net.topology.n_bus, 3)
    return ProfileSet(net.topology.bus_ids, *(np.zeros(shape) for _ in range(4)))


def _check_flags(prof: ProfileSet, net: Network) -> None:
    topo = net.topology
    for k, bid in enumerate(topo.bus_ids):
        bus = net.bus_map[bid]
        for f, ph in enumerate(PHASES):
            if ph not in bus.has_load and (
                np.any(prof.p_load[:, :, k, f] != 0) or np.any(prof.q_load[:, :, k, f] != 0)
            ):
                raise ProfileError(f"load on bus {bid} phase {ph} which has no load flag")
            if ph not in bus.has_pv and (np.any(prof.p_pv[:, :, k, f] != 0) or np.any(prof.q_pv[:, :, k, f] != 0)):
                raise ProfileError(f"PV on bus {bid} phase {ph} which has no PV flag")


def load_profiles(source, net: Network, grid: TimeGrid) -> ProfileSet:
    """Read the profile CSV (path, file object or CSV text).

    Every (bus, phase) carrying a load or PV flag must have a complete series
    for every day and hour; unflagged pairs are zero.
    """
    if isinstance(source, str) and "\n" in source:
        fh = io.StringIO(source)
    elif hasattr(source, "read"):
        fh = contextlib.nullcontext(source)
    else:
        fh = open(source, encoding="utf-8", newline="")
    with fh as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ProfileError("empty profile file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ProfileError(f"profile header must be {','.join(CSV_HEADER)}")
        topo = net.topology
        shape = (grid.n_days, grid.hours_per_day, topo.n_bus, 3)
        arrays = [np.zeros(shape) for _ in range(4)]
        seen = np.zeros(shape, dtype=bool)
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ProfileError(f"row {rowno}: expected {len(CSV_HEADER)} fields")
            try:
                bid = int(row[0])
                hour = int(row[3])
                vals = [float(v) for v in row[4:]]
            except ValueError as exc:
                raise ProfileError(f"row {rowno}: {exc}") from None
            if bid not in topo.index:
                raise ProfileError(f"row {rowno}: unknown bus {bid}")
            if row[1] not in PHASES:
                raise ProfileError(f"row {rowno}: unknown phase {row[1]!r}")
            if not 0 <= hour < grid.hours_per_day:
                raise ProfileError(f"row {rowno}: hour {hour} out of range")
            try:
                d = grid.day_index(row[2])
            except ProfileError as exc:
                raise ProfileError(f"row {rowno}: {exc}") from None
            if vals[0] < 0:
                raise ProfileError(f"row {rowno}: negative load")
            idx = (d, hour, topo.index[bid], PHASES.index(row[1]))
            if seen[idx]:
                raise ProfileError(f"row {rowno}: duplicate record")
            seen[idx] = True
            for arr, v in zip(arrays, vals):
                arr[idx] = v
    for k, bid in enumerate(topo.bus_ids):
        bus = net.bus_map[bid]
        for f, ph in enumerate(PHASES):
            if ph in bus.has_load or ph in bus.has_pv:
                count = int(seen[:, :, k, f].sum())
                if count != grid.n_days * grid.hours_per_day:
                    missing = np.argwhere(~seen[:, :, k, f])
                    d, h = missing[0]
                    raise ProfileError(
                        f"bus {bid} phase {ph}: series length {count}, expected "
                        f"{grid.n_days * grid.hours_per_day} (missing day {grid.days[d].id} hour {h})"
                    )
    prof = ProfileSet(topo.bus_ids, *arrays)
    _check_flags(prof, net)
    return prof


def _num(x: float) -> str:
    # shortest round-trip positional form, never exponent notation
    return np.format_float_positional(float(x), unique=True, trim="0")


def format_profiles(prof: ProfileSet, net: Network, grid: TimeGrid) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    topo = net.topology
    for bid in sorted(topo.bus_ids):
        bus = net.bus_map[bid]
        k = topo.index[bid]
        for f, ph in enumerate(PHASES):
            if ph not in bus.has_load and ph not in bus.has_pv:
                continue
            for d, day in enumerate(grid.days):
                for h in range(grid.hours_per_day):
                    idx = (d, h, k, f)
                    writer.writerow(
                        [bid, ph, day.id, h]
                        + [_num(a[idx]) for a in (prof.p_load, prof.q_load, prof.p_pv, prof.q_pv)]
                    )
    return buf.getvalue()


def save_profiles(prof: ProfileSet, net: Network, grid: TimeGrid, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_profiles(prof, net, grid))


@dataclass(frozen=True)
class SeasonParams:
    """Shape parameters of one season's synthetic day.

    Load is a base level plus morning and evening bumps reaching
    ``peak_load_kw``; PV is a half-sine between ``sunrise`` and ``sunset``
    peaking at ``pv_rating_kw`` on the midpoint hour.
    """

    peak_load_kw: float
    base_load_kw: float
    pv_rating_kw: float
    sunrise: int
    sunset: int
    evening_peak_hour: int = 18
    morning_peak_hour: int = 8
    morning_fraction: float = 0.5

    def validate(self) -> None:
        if self.base_load_kw < 0 or self.peak_load_kw < self.base_load_kw:
            raise ProfileError("need 0 <= base_load_kw <= peak_load_kw")
        if self.pv_rating_kw < 0:
            raise ProfileError("pv_rating_kw must be non-negative")
        if not 0 <= self.sunrise < self.sunset <= 24:
            raise ProfileError("need 0 <= sunrise < sunset <= 24")
        if not 0 <= self.morning_fraction <= 1:
            raise ProfileError("morning_fraction must lie in [0, 1]")


DEFAULT_SEASONS = {
    "summer": SeasonParams(peak_load_kw=1.2, base_load_kw=0.3, pv_rating_kw=1.0, sunrise=5, sunset=21, evening_peak_hour=19),
    "autumn": SeasonParams(peak_load_kw=1.6, base_load_kw=0.35, pv_rating_kw=1.0, sunrise=7, sunset=19),
    "winter": SeasonParams(peak_load_kw=2.4, base_load_kw=0.45, pv_rating_kw=1.0, sunrise=8, sunset=16, evening_peak_hour=17),
    "spring": SeasonParams(peak_load_kw=1.4, base_load_kw=0.3, pv_rating_kw=1.0, sunrise=6, sunset=20),
}


def pv_shape(params: SeasonParams, hours: int = 24) -> np.ndarray:
    """Clear-sky per-unit PV output; exactly 1 on the midpoint hour when it is integral."""
    h = np.arange(hours, dtype=float)
    span = params.sunset - params.sunrise
    out = np.sin(np.pi * (h - params.sunrise) / span)
    out[(h <= params.sunrise) | (h >= params.sunset)] = 0.0
    return np.clip(out, 0.0, None)


def _bump(h: np.ndarray, centre: float, width: float) -> np.ndarray:
    # periodic over the day so the evening peak wraps past midnight smoothly
    d = np.minimum(np.abs(h - centre), 24 - np.abs(h - centre))
    return np.exp(-0.5 * (d / width) ** 2)


def load_shape(params: SeasonParams, hours: int = 24) -> np.ndarray:
    """Per-unit load (0 = base, 1 = peak) with morning and evening bumps."""
    h = np.arange(hours, dtype=float)
    shape = params.morning_fraction * _bump(h, params.morning_peak_hour, 1.5) + _bump(h, params.evening_peak_hour, 2.0)
    return shape / shape.max()


def synth_profiles(
    seed: int,
    net: Network,
    grid: TimeGrid,
    params: dict | None = None,
    power_factor: float = 0.95,
    noise: float = 0.15,
) -> ProfileSet:
    """Seeded synthetic load and PV series for every flagged (bus, phase).

    ``params`` maps season label to :class:`SeasonParams`. Each consumer gets
    a random scale and a multiplicative hourly jitter of relative size
    ``noise``; PV is deterministic clear-sky so that its peak equals the rating.
    """
    params = DEFAULT_SEASONS if params is None else params
    if not 0 < power_factor <= 1:
        raise ProfileError("power_factor must lie in (0, 1]")
    if noise < 0:
        raise ProfileError("noise must be non-negative")
    for day in grid.days:
        if day.season not in params:
            raise ProfileError(f"no season parameters for {day.season!r}")
        params[day.season].validate()
    rng = np.random.default_rng(seed)
    topo = net.topology
    H = grid.hours_per_day
    shape = (grid.n_days, H, topo.n_bus, 3)
    p_load = np.zeros(shape)
    p_pv = np.zeros(shape)
    tan_phi = math.tan(math.acos(power_factor))
    # iterate in sorted-id order so the draw sequence does not depend on tree layout
    for bid in sorted(topo.bus_ids):
        bus = net.bus_map[bid]
        k = topo.index[bid]
        for f, ph in enumerate(PHASES):
            if ph not in bus.has_load:
                continue
            scale = rng.uniform(0.7, 1.3)
            for d, day in enumerate(grid.days):
                sp = params[day.season]
                base = sp.base_load_kw + (sp.peak_load_kw - sp.base_load_kw) * load_shape(sp, H)
                jitter = 1.0 + noise * rng.standard_normal(H)
                p_load[d, :, k, f] = np.clip(scale * base * jitter, 0.0, None)
    for d, day in enumerate(grid.days):
        sp = params[day.season]
        shape_pv = sp.pv_rating_kw * pv_shape(sp, H)
        for bid in topo.bus_ids:
            bus = net.bus_map[bid]
            k = topo.index[bid]
            for f, ph in enumerate(PHASES):
                if ph in bus.has_pv:
                    p_pv[d, :, k, f] = shape_pv
    q_load = p_load * tan_phi
    return ProfileSet(topo.bus_ids, p_load, q_load, p_pv, np.zeros(shape))


@dataclass(frozen=True)
class PvScaling:
    alpha: float

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ProfileError("PV scaling must be finite and non-negative")


def scale_pv(prof: ProfileSet, s: PvScaling | float) -> ProfileSet:
    """Multiply every PV series by ``s.alpha``; loads are untouched."""
    alpha = s.alpha if isinstance(s, PvScaling) else PvScaling(float(s)).alpha
    return ProfileSet(prof.bus_ids, prof.p_load, prof.q_load, prof.p_pv0, prof.q_pv0, prof.pv_scale * alpha)
