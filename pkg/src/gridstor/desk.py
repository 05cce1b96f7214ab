"""Small synthetic feeders and profiles used by tests, scripts and the CLI.

The reference feeder is a 12-bus unbalanced LV main with a lateral. Each
load bus aggregates a few single-phase homes, unevenly spread over the
phases, every home carrying rooftop PV.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .netmodel import PHASES, Bus, Line, Network, PhaseTriple
from .profiles import DEFAULT_SEASONS, SeasonParams, TimeGrid, synth_profiles

V_SUB = 230.0
V_MIN = 216.2  # -6 %
V_MAX = 253.0  # +10 %
BASE_VOLTAGE = 400.0


def line(a: int, b: int, r: float, x: float | None = None) -> Line:
    x = r if x is None else x
    return Line(a, b, PhaseTriple.uniform(r), PhaseTriple.uniform(x))


def two_bus(r: float = 0.1, x: float = 0.1, load: str = "ABC", pv: str = "", v_max: float = V_MAX) -> Network:
    buses = (Bus(1), Bus(2, frozenset(PHASES), frozenset(load), frozenset(pv), True))
    return Network(buses, (line(1, 2, r, x),), 1, V_SUB, V_MIN, v_max, BASE_VOLTAGE)


def chain(n: int, r: float = 0.05, x: float | None = None, loads: str = "ABC", pv: str = "ABC",
          candidates=None, v_min: float = V_MIN, v_max: float = V_MAX) -> Network:
    """Buses 1..n in a line; bus 1 is the substation."""
    candidates = set(range(2, n + 1)) if candidates is None else set(candidates)
    buses = [Bus(1)]
    for k in range(2, n + 1):
        buses.append(Bus(k, frozenset(PHASES), frozenset(loads), frozenset(pv), k in candidates))
    lines = [line(k - 1, k, r, x) for k in range(2, n + 1)]
    return Network(tuple(buses), tuple(lines), 1, V_SUB, v_min, v_max, BASE_VOLTAGE)


def star(n_leaves: int = 4, r: float = 0.05) -> Network:
    buses = [Bus(1)] + [Bus(k, frozenset(PHASES), frozenset("ABC"), frozenset(), True) for k in range(2, n_leaves + 2)]
    lines = [line(1, k, r) for k in range(2, n_leaves + 2)]
    return Network(tuple(buses), tuple(lines), 1, V_SUB, V_MIN, V_MAX, BASE_VOLTAGE)


def random_tree(n: int, seed: int, r_range=(0.01, 0.05), n_candidates: int = 0,
                v_min: float = V_MIN, v_max: float = V_MAX, balanced: bool = False) -> Network:
    """Random radial feeder: bus k attaches to a random earlier bus.

    Every non-source bus gets a random non-empty subset of load phases with
    PV on the same phases (all phases when ``balanced``). Candidates are the
    ``n_candidates`` deepest buses, lowest id first on ties.
    """
    rng = np.random.default_rng(seed)
    parent = {k: int(rng.integers(1, k)) for k in range(2, n + 1)}
    depth = {1: 0}
    for k in range(2, n + 1):
        depth[k] = depth[parent[k]] + 1
    deep = sorted(range(2, n + 1), key=lambda k: (-depth[k], k))[:n_candidates]
    buses = [Bus(1)]
    for k in range(2, n + 1):
        if balanced:
            ph = frozenset(PHASES)
        else:
            mask = rng.random(3) < 0.5
            if not mask.any():
                mask[rng.integers(3)] = True
            ph = frozenset(p for p, m in zip(PHASES, mask) if m)
        buses.append(Bus(k, frozenset(PHASES), ph, ph, k in deep))
    lines = []
    for k in range(2, n + 1):
        if balanced:
            r = float(rng.uniform(*r_range))
            lines.append(line(parent[k], k, r, 0.6 * r))
        else:
            r = rng.uniform(*r_range, size=3)
            lines.append(Line(parent[k], k, PhaseTriple(*r), PhaseTriple(*(0.6 * r))))
    return Network(tuple(buses), tuple(lines), 1, V_SUB, v_min, v_max, BASE_VOLTAGE)


# bus, parent, (homes on A, B, C), ess candidate
_REFERENCE_LAYOUT = (
    (2, 1, (1, 1, 0), False),
    (3, 2, (2, 1, 1), True),
    (4, 3, (1, 2, 1), False),
    (5, 4, (2, 1, 0), True),
    (6, 5, (1, 1, 2), False),
    (7, 6, (2, 2, 1), True),
    (8, 7, (1, 0, 1), False),
    (9, 8, (2, 1, 1), True),
    (10, 5, (1, 1, 0), False),
    (11, 10, (2, 1, 1), True),
    (12, 11, (1, 2, 0), False),
)


def reference_feeder(r_per_segment: float = 0.012, x_over_r: float = 0.6) -> Network:
    """12-bus unbalanced reference feeder (main 1-9 with lateral 5-10-11-12)."""
    buses = [Bus(1)]
    lines = []
    for bid, par, homes, cand in _REFERENCE_LAYOUT:
        ph = frozenset(p for p, h in zip(PHASES, homes) if h > 0)
        buses.append(Bus(bid, frozenset(PHASES), ph, ph, cand))
        # slight per-phase spread keeps the phases from being identical
        r = np.array([1.0, 1.05, 0.95]) * r_per_segment
        lines.append(Line(par, bid, PhaseTriple(*r), PhaseTriple(*(x_over_r * r))))
    return Network(tuple(buses), tuple(lines), 1, V_SUB, V_MIN, V_MAX, BASE_VOLTAGE)


def reference_homes() -> dict:
    """Number of homes behind each (bus id, phase index)."""
    return {(bid, f): h for bid, _, homes, _ in _REFERENCE_LAYOUT for f, h in enumerate(homes) if h}


def reference_profiles(net: Network, grid: TimeGrid | None = None, seed: int = 7, pv_rating_kw: float = 1.0,
                       seasons: dict | None = None):
    """Synthetic profiles for the reference feeder, scaled by homes per phase.

    ``pv_rating_kw`` is the per-home PV rating; each (bus, phase) series is
    the per-home series times the number of homes on it.
    """
    grid = grid or TimeGrid()
    seasons = dict(DEFAULT_SEASONS if seasons is None else seasons)
    seasons = {k: _with_rating(v, pv_rating_kw) for k, v in seasons.items()}
    prof = synth_profiles(seed, net, grid, seasons)
    homes = reference_homes()
    mult = np.zeros((len(prof.bus_ids), 3))
    for k, bid in enumerate(prof.bus_ids):
        for f in range(3):
            mult[k, f] = homes.get((bid, f), 0)
    return type(prof)(
        prof.bus_ids,
        prof.p_load * mult,
        prof.q_load * mult,
        prof.p_pv0 * mult,
        prof.q_pv0 * mult,
        prof.pv_scale,
    )


def _with_rating(sp: SeasonParams, rating: float) -> SeasonParams:
    return replace(sp, pv_rating_kw=rating)
