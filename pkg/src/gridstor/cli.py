"""Scenario driver: ``gridstor <command> --config <path> [--out DIR] [--seed N] [--jobs N]``.

Commands: validate, baseline, size, sweep, report. Exit codes: 0 ok,
2 configuration error, 3 solver failure, 4 infeasible. Failures leave an
``error.json`` record in the output directory and print it on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli

from . import analysis, desk
from .analysis import ConvergenceError, HostingError, UndefinedVufError
from .netmodel import FeederFormatError, Network, NetworkError, read_network, validate_radial
from .powerflow import PowerFlowError
from .profiles import DEFAULT_DAYS, DEFAULT_SEASONS, Day, ProfileError, TimeGrid, load_profiles, synth_profiles
from .qpsolve import QpError, QpSettings
from .sizing import (
    EssDefaults,
    SizingError,
    SizingInfeasible,
    SizingProblem,
    SizingSolution,
    dess_study,
    default_capacity_bound,
    solve_miqp,
)
from .storage import soc_trajectory

log = logging.getLogger("gridstor")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INFEASIBLE = 4

COMMANDS = ("validate", "baseline", "size", "sweep", "report")
BUILTIN_FEEDERS = {"reference": desk.reference_feeder, "two_bus": desk.two_bus}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a run depends on; resolved values are echoed to ``config_resolved.json``."""

    base_dir: str
    feeder_path: str | None = None
    feeder_builtin: str | None = None
    profiles_source: str = "synth"  # "file", "synth" or "reference"
    profiles_path: str | None = None
    seed: int = 0
    pv_rating_kw: float = 1.0
    power_factor: float = 0.95
    noise: float = 0.15
    days: tuple = DEFAULT_DAYS
    hours_per_day: int = 24
    delta_t: float = 1.0
    candidates: tuple | None = None
    n_ess: int = 1
    n_sweep: tuple = (1, 2, 3)
    aggregate_cap: str | float = "from-cess"
    capacity_bound: str | float = "auto"
    node_limit: int = 100_000
    ess: EssDefaults = EssDefaults()
    qp: QpSettings = QpSettings()
    hosting_day: str | None = None
    hosting_tol_kw: float = 0.01
    unit_rating_kw: float = 1.0
    vuf_limit_percent: float = analysis.VUF_LIMIT_PERCENT
    out_dir: str = "out"

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.days, self.hours_per_day, self.delta_t)

    def as_record(self) -> dict:
        rec = asdict(self)
        rec.pop("base_dir")
        rec["days"] = [asdict(d) for d in self.days]
        return rec


_SECTIONS = {
    "feeder": {"path", "builtin"},
    "profiles": {"source", "path", "seed", "pv_rating_kw", "power_factor", "noise"},
    "grid": {"hours_per_day", "delta_t", "days"},
    "sizing": {"candidates", "n_ess", "n_sweep", "aggregate_cap", "capacity_bound", "node_limit"},
    "ess": {"eta_plus", "eta_minus", "e_min", "c_hours", "p_max_charge", "p_max_discharge"},
    "solver": {
        "eps_abs", "eps_rel", "max_iter", "rho", "sigma", "alpha", "check_interval",
        "adaptive_rho_tolerance", "scaling_iter", "eps_prim_inf", "eps_dual_inf",
        "divergence_window", "polish",
    },
    "analysis": {"hosting_day", "hosting_tol_kw", "unit_rating_kw", "vuf_limit_percent"},
    "output": {"dir"},
}


def parse_config(text: str, base_dir: str = ".") -> ScenarioConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    for name, body in raw.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        extra = set(body) - _SECTIONS[name]
        if extra:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")
    sec = {k: raw.get(k, {}) for k in _SECTIONS}
    kw: dict = {"base_dir": str(base_dir)}

    fd = sec["feeder"]
    if ("path" in fd) == ("builtin" in fd):
        raise ConfigError("[feeder] needs exactly one of 'path' or 'builtin'")
    if "builtin" in fd and fd["builtin"] not in BUILTIN_FEEDERS:
        raise ConfigError(f"unknown builtin feeder {fd['builtin']!r}")
    kw["feeder_path"] = fd.get("path")
    kw["feeder_builtin"] = fd.get("builtin")

    pr = sec["profiles"]
    source = pr.get("source", "file" if "path" in pr else "synth")
    if source not in ("file", "synth", "reference"):
        raise ConfigError(f"unknown profile source {source!r}")
    if source == "file" and "path" not in pr:
        raise ConfigError("file profiles need [profiles] path")
    kw["profiles_source"] = source
    kw["profiles_path"] = pr.get("path")
    for key, typ in (("seed", int), ("pv_rating_kw", float), ("power_factor", float), ("noise", float)):
        if key in pr:
            kw[key] = _typed(pr[key], typ, f"profiles.{key}")

    gr = sec["grid"]
    if "hours_per_day" in gr:
        kw["hours_per_day"] = _typed(gr["hours_per_day"], int, "grid.hours_per_day")
    if "delta_t" in gr:
        kw["delta_t"] = _typed(gr["delta_t"], float, "grid.delta_t")
    if "days" in gr:
        try:
            kw["days"] = tuple(Day(str(d["id"]), str(d["season"]), float(d["weight"])) for d in gr["days"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError("grid.days entries need id, season and weight") from None

    sz = sec["sizing"]
    if "candidates" in sz:
        if not isinstance(sz["candidates"], list):
            raise ConfigError("sizing.candidates must be a list of bus ids")
        kw["candidates"] = tuple(_typed(c, int, "sizing.candidates") for c in sz["candidates"])
    if "n_ess" in sz:
        kw["n_ess"] = _typed(sz["n_ess"], int, "sizing.n_ess")
    if "n_sweep" in sz:
        if not isinstance(sz["n_sweep"], list) or not sz["n_sweep"]:
            raise ConfigError("sizing.n_sweep must be a non-empty list")
        kw["n_sweep"] = tuple(_typed(n, int, "sizing.n_sweep") for n in sz["n_sweep"])
    if "aggregate_cap" in sz:
        agg = sz["aggregate_cap"]
        if isinstance(agg, str):
            if agg not in ("free", "from-cess"):
                raise ConfigError("sizing.aggregate_cap must be 'free', 'from-cess' or a number")
            kw["aggregate_cap"] = agg
        else:
            kw["aggregate_cap"] = _typed(agg, float, "sizing.aggregate_cap")
    if "capacity_bound" in sz:
        cb = sz["capacity_bound"]
        kw["capacity_bound"] = cb if cb == "auto" else _typed(cb, float, "sizing.capacity_bound")
    if "node_limit" in sz:
        kw["node_limit"] = _typed(sz["node_limit"], int, "sizing.node_limit")

    try:
        kw["ess"] = EssDefaults(**{k: _typed(v, float, f"ess.{k}") for k, v in sec["ess"].items()})
        solver = {}
        for k, v in sec["solver"].items():
            default = getattr(QpSettings, k)
            solver[k] = _typed(v, type(default), f"solver.{k}")
        kw["qp"] = QpSettings(**solver)
    except (ValueError, QpError) as exc:
        raise ConfigError(str(exc)) from None

    an = sec["analysis"]
    if "hosting_day" in an:
        kw["hosting_day"] = str(an["hosting_day"])
    for key in ("hosting_tol_kw", "unit_rating_kw", "vuf_limit_percent"):
        if key in an:
            kw[key] = _typed(an[key], float, f"analysis.{key}")
    if "dir" in sec["output"]:
        kw["out_dir"] = str(sec["output"]["dir"])

    cfg = ScenarioConfig(**kw)
    _check_config(cfg)
    return cfg


def _typed(value, typ, name):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number")
    if typ is int:
        if value != int(value):
            raise ConfigError(f"{name} must be an integer")
        return int(value)
    return float(value)


def _check_config(cfg: ScenarioConfig) -> None:
    if cfg.n_ess < 1:
        raise ConfigError("sizing.n_ess must be at least 1")
    if any(n < 1 for n in cfg.n_sweep):
        raise ConfigError("sizing.n_sweep entries must be at least 1")
    if cfg.hosting_tol_kw <= 0 or cfg.unit_rating_kw <= 0:
        raise ConfigError("hosting tolerance and unit rating must be positive")
    if isinstance(cfg.capacity_bound, float) and cfg.capacity_bound <= 0:
        raise ConfigError("sizing.capacity_bound must be positive")
    if isinstance(cfg.aggregate_cap, float) and cfg.aggregate_cap < 0:
        raise ConfigError("sizing.aggregate_cap must be non-negative")
    try:
        cfg.grid
    except ProfileError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=str(path.parent))


# ---------------------------------------------------------------------------
# scenario assembly


@dataclass
class Scenario:
    cfg: ScenarioConfig
    net: Network
    grid: TimeGrid
    profiles: object
    candidates: tuple = field(default_factory=tuple)

    def problem(self, n_ess: int, aggregate_cap: float | None = None) -> SizingProblem:
        return SizingProblem(
            self.net,
            self.profiles,
            self.grid,
            self.candidates,
            n_ess=n_ess,
            aggregate_cap=aggregate_cap,
            capacity_bound=self.cfg.capacity_bound if isinstance(self.cfg.capacity_bound, float) else None,
            ess=self.cfg.ess,
            qp=self.cfg.qp,
            node_limit=self.cfg.node_limit,
        )


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    """Load feeder and profiles; any problem here is a configuration error."""
    try:
        if cfg.feeder_builtin is not None:
            net = BUILTIN_FEEDERS[cfg.feeder_builtin]()
        else:
            path = cfg.resolve(cfg.feeder_path)
            if not path.is_file():
                raise ConfigError(f"feeder file {path} does not exist")
            net = read_network(path)
        report = validate_radial(net)
        if not report.ok:
            raise ConfigError("feeder is not radial: " + "; ".join(report.messages))
        grid = cfg.grid
        if cfg.profiles_source == "file":
            path = cfg.resolve(cfg.profiles_path)
            if not path.is_file():
                raise ConfigError(f"profile file {path} does not exist")
            prof = load_profiles(path, net, grid)
        elif cfg.profiles_source == "reference":
            prof = desk.reference_profiles(net, grid, seed=cfg.seed, pv_rating_kw=cfg.pv_rating_kw)
        else:
            params = {k: replace(v, pv_rating_kw=cfg.pv_rating_kw) for k, v in DEFAULT_SEASONS.items()}
            prof = synth_profiles(cfg.seed, net, grid, params, cfg.power_factor, cfg.noise)
        cands = cfg.candidates if cfg.candidates is not None else tuple(net.candidates())
        # surfaces bad candidates and profile/grid mismatches as configuration errors
        SizingProblem(net, prof, grid, cands, n_ess=None)
        if cfg.hosting_day is not None:
            grid.day_index(cfg.hosting_day)
    except (FeederFormatError, NetworkError, ProfileError, SizingError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    return Scenario(cfg, net, grid, prof, tuple(sorted(cands)))


# ---------------------------------------------------------------------------
# output helpers


def atomic_write(path: Path, text: str) -> None:
    """Write ``text`` to a temporary sibling and rename it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(a) for a in v)
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _write_csv(out: Path, name: str, header, rows) -> None:
    atomic_write(out / name, csv_text(header, rows))


def _write_json(out: Path, name: str, obj) -> None:
    atomic_write(out / name, json.dumps(obj, indent=2, sort_keys=True, default=_fmt) + "\n")


INDEX_HEADER = ("index", "value", "unit", "bus", "day", "hour")
VUF_HEADER = ("day", "hour", "bus", "vuf_percent")


def _index_rows(rep: analysis.IndexReport, cfg: ScenarioConfig) -> list:
    rows = [("annual_loss", rep.annual_loss_kwh, "kWh", None, None, None)]
    for season, value in rep.seasonal_loss_kwh.items():
        rows.append((f"loss_{season}", value, "kWh", None, None, None))
    rows += [
        ("hosting_total", rep.hosting_kw, "kW", rep.hosting_bus, rep.hosting_day, rep.hosting_hour),
        ("hosting_per_unit_rating", rep.hosting_per_unit_rating_kw, "kW", rep.hosting_bus, rep.hosting_day, rep.hosting_hour),
        ("vuf_max", rep.vuf_max_percent, "%", rep.vuf_max_bus, rep.vuf_max_day, rep.vuf_max_hour),
        ("vuf_avg", rep.vuf_avg_percent, "%", None, None, None),
        ("vuf_limit", cfg.vuf_limit_percent, "%", None, None, None),
    ]
    return rows


def _vuf_rows(vs: analysis.VufSummary, grid: TimeGrid) -> list:
    rows = []
    for d, day in enumerate(grid.days):
        for t in range(vs.series.shape[1]):
            for k, bus in enumerate(vs.buses):
                rows.append((day.id, t, bus, vs.series[d, t, k]))
    return rows


def _indices(sc: Scenario, placements) -> tuple[analysis.IndexReport, analysis.VufSummary]:
    cfg = sc.cfg
    day = cfg.hosting_day or analysis.default_hosting_day(sc.grid)
    rep = analysis.index_report(sc.net, sc.profiles, sc.grid, placements, day, cfg.hosting_tol_kw, cfg.unit_rating_kw)
    vs = analysis.vuf_study(sc.net, sc.profiles, sc.grid, placements)
    return rep, vs


def _solution_text(sol: SizingSolution, grid: TimeGrid) -> str:
    out = ["# gridstor sizing solution", "[SUMMARY]"]
    out.append(f"objective_kwh {sol.objective_kwh!r}")
    out.append(f"base_objective_kwh {sol.base_objective_kwh!r}")
    out.append(f"loss_reduction_percent {100.0 * sol.loss_reduction!r}")
    out.append(f"total_capacity_kwh {sol.total_capacity!r}")
    for pl in sol.placements:
        out += ["", "[PLACEMENT]", "# bus capacity_kwh e0_kwh p_max_charge_kw p_max_discharge_kw"]
        out.append(f"{pl.bus} {pl.capacity_kwh!r} {pl.e0_kwh!r} {pl.p_max_charge!r} {pl.p_max_discharge!r}")
        for day in grid.days:
            out.append(f"schedule {day.id} {_schedule_name(pl.bus, day.id)}")
    st = sol.stats
    out += ["", "[STATS]", f"optimality_gap {sol.optimality_gap!r}", f"nodes {st.nodes}"]
    out += [f"qp_solves {st.qp_solves}", f"qp_iterations {st.qp_iterations}"]
    return "\n".join(out) + "\n"


def _schedule_name(bus: int, day: str) -> str:
    return f"schedule_bus{bus}_{day}.csv"


def _write_solution(out: Path, sol: SizingSolution, grid: TimeGrid) -> None:
    atomic_write(out / "solution.txt", _solution_text(sol, grid))
    soc_rows = []
    for pl in sol.placements:
        for d, day in enumerate(grid.days):
            sched = pl.schedules[d]
            rows = [(h, sched.p_plus[h], sched.p_minus[h]) for h in range(len(sched))]
            _write_csv(out, _schedule_name(pl.bus, day.id), ("hour", "p_plus_kw_per_phase", "p_minus_kw_per_phase"), rows)
            soc = soc_trajectory(pl.spec, sched, grid.delta_t)
            for t, e in enumerate(soc):
                soc_rows.append((pl.bus, day.id, t, e, 3.0 * (sched.net[t] if t < len(sched) else 0.0)))
    _write_csv(out, "plot_soc.csv", ("bus", "day", "hour", "soc_kwh", "p_net_kw_3ph"), soc_rows)


# ---------------------------------------------------------------------------
# commands


def cmd_validate(sc: Scenario, out: Path, jobs: int) -> dict:
    report = validate_radial(sc.net)
    topo = sc.net.topology
    rec = {
        "status": "ok",
        "buses": topo.n_bus,
        "lines": topo.n_branch,
        "radial": report.ok,
        "candidates": list(sc.candidates),
        "days": [d.id for d in sc.grid.days],
        "hours_per_day": sc.grid.hours_per_day,
        "annual_energy_kwh": sc.profiles.annual_energy_kwh(sc.grid),
    }
    _write_json(out, "validate.json", rec)
    return rec


INDEX_DEFINITIONS = {
    "annual_loss": "exact three-phase sweep losses summed over hours, weighted by representative-day weights (kWh/yr)",
    "hosting_total": "total PV rating at the largest uniform PV scaling keeping every phase voltage <= v_max "
    "on the hosting day, storage schedules held fixed (kW)",
    "vuf": "|V-| / |V+| * 100 at three-phase non-source buses from exact phasors (%)",
    "vuf_max": "maximum over buses, hours and representative days",
    "vuf_avg": "mean over buses and hours, with representative days weighted by days/year "
    "(a time and network average)",
}


def _write_definitions(out: Path) -> None:
    _write_json(out, "index_definitions.json", INDEX_DEFINITIONS)


def cmd_baseline(sc: Scenario, out: Path, jobs: int) -> dict:
    rep, vs = _indices(sc, ())
    _write_definitions(out)
    _write_csv(out, "baseline_indices.csv", INDEX_HEADER, _index_rows(rep, sc.cfg))
    _write_csv(out, "baseline_vuf.csv", VUF_HEADER, _vuf_rows(vs, sc.grid))
    return {"status": "ok", "annual_loss_kwh": rep.annual_loss_kwh}


def _check_n(sc: Scenario, values) -> None:
    largest = max(values)
    if largest > len(sc.candidates):
        raise ConfigError(f"N = {largest} exceeds the {len(sc.candidates)} candidate buses")


def _aggregate(sc: Scenario) -> float | None:
    agg = sc.cfg.aggregate_cap
    if isinstance(agg, float):
        return agg
    if agg == "free":
        return None
    cess = solve_miqp(sc.problem(1))
    return cess.total_capacity


def cmd_size(sc: Scenario, out: Path, jobs: int) -> dict:
    n = sc.cfg.n_ess
    _check_n(sc, [n])
    agg = _aggregate(sc) if n > 1 else (sc.cfg.aggregate_cap if isinstance(sc.cfg.aggregate_cap, float) else None)
    prob = sc.problem(n, agg)
    if sc.cfg.capacity_bound == "auto" and agg is None and n > 1:
        prob = replace(prob, capacity_bound=default_capacity_bound(prob))
    t0 = time.perf_counter()
    sol = solve_miqp(prob)
    log.info("sizing finished in %.2f s (%d nodes)", time.perf_counter() - t0, sol.stats.nodes)
    _write_solution(out, sol, sc.grid)
    rep, vs = _indices(sc, sol.placements)
    _write_csv(out, "size_indices.csv", INDEX_HEADER, _index_rows(rep, sc.cfg))
    _write_definitions(out)
    _write_csv(out, "size_vuf.csv", VUF_HEADER, _vuf_rows(vs, sc.grid))
    return {"status": "ok", "buses": list(sol.buses), "objective_kwh": sol.objective_kwh}


SWEEP_HEADER = (
    "n_ess",
    "buses",
    "capacities_kwh",
    "total_capacity_kwh",
    "objective_kwh",
    "loss_kwh",
    "loss_reduction_percent",
    "hosting_kw",
    "hosting_increase_percent",
    "vuf_max_percent",
    "vuf_max_bus",
    "vuf_avg_percent",
)


def cmd_sweep(sc: Scenario, out: Path, jobs: int) -> dict:
    cfg = sc.cfg
    if cfg.aggregate_cap == "free":
        raise ConfigError("sweep compares equal aggregate capacities; set sizing.aggregate_cap to 'from-cess' or a number")
    _check_n(sc, cfg.n_sweep)
    agg = _aggregate(sc)
    prob = sc.problem(1, agg)
    study = dess_study(prob, cfg.n_sweep, cfg.hosting_day, cfg.hosting_tol_kw, cfg.unit_rating_kw, jobs=jobs)
    rows = [
        (
            r.n, r.buses, r.capacities, sum(r.capacities), r.objective_kwh, r.loss_kwh, r.loss_reduction_pct,
            r.hosting_kw, r.hosting_increase_pct, r.vuf_max_percent, r.vuf_max_bus, r.vuf_avg_percent,
        )
        for r in study.rows
    ]
    _write_csv(out, "sweep.csv", SWEEP_HEADER, rows)
    _write_definitions(out)
    base = ("base", study.base_loss_kwh, study.base_hosting_kw, study.base_vuf_max_percent, study.base_vuf_avg_percent)
    _write_csv(
        out,
        "plot_loss_vs_n.csv",
        ("n_ess", "loss_kwh", "loss_reduction_percent"),
        [(0, study.base_loss_kwh, 0.0)] + [(r.n, r.loss_kwh, r.loss_reduction_pct) for r in study.rows],
    )
    _write_csv(
        out,
        "plot_hosting_vs_n.csv",
        ("n_ess", "hosting_kw", "hosting_increase_percent"),
        [(0, study.base_hosting_kw, 0.0)] + [(r.n, r.hosting_kw, r.hosting_increase_pct) for r in study.rows],
    )
    _write_csv(
        out,
        "sweep_base.csv",
        ("case", "loss_kwh", "hosting_kw", "vuf_max_percent", "vuf_avg_percent"),
        [base],
    )
    return {"status": "ok", "aggregate_cap_kwh": agg, "rows": len(rows)}


REPORT_SOURCES = ("baseline_indices.csv", "size_indices.csv", "sweep.csv", "sweep_base.csv")


def cmd_report(sc: Scenario, out: Path, jobs: int) -> dict:
    """Merge whatever result tables exist in the output directory."""
    rows = []
    found = []
    for name in REPORT_SOURCES:
        path = out / name
        if not path.is_file():
            continue
        found.append(name)
        with open(path, encoding="utf-8", newline="") as fh:
            table = list(csv.reader(fh))
        header, body = table[0], table[1:]
        for k, rec in enumerate(body):
            for col, value in zip(header, rec):
                rows.append((name, k, col, value))
    if not found:
        raise ConfigError(f"nothing to report in {out}; run baseline, size or sweep first")
    _write_csv(out, "report.csv", ("source", "row", "field_with_unit", "value"), rows)
    return {"status": "ok", "sources": found}


HANDLERS = {
    "validate": cmd_validate,
    "baseline": cmd_baseline,
    "size": cmd_size,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, SizingInfeasible):
        return EXIT_INFEASIBLE, "infeasible"
    if isinstance(exc, (SizingError, QpError, ConvergenceError, PowerFlowError, HostingError, UndefinedVufError)):
        return EXIT_SOLVER, "solver"
    raise exc


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridstor", description="ESS siting and sizing on unbalanced LV feeders")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="scenario TOML file")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--seed", type=int, help="profile synthesis seed (overrides [profiles] seed)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, config_path, out: str | None = None, seed: int | None = None, jobs: int = 1) -> int:
    """Execute one command; returns the process exit code."""
    out_dir = Path(out) if out is not None else None
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out_dir is None:
            out_dir = cfg.resolve(cfg.out_dir)
        if jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        sc = build_scenario(cfg)
        _write_json(out_dir, "config_resolved.json", cfg.as_record())
        result = HANDLERS[command](sc, out_dir, jobs)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code, kind = _classify(exc)
        record = {"status": "error", "code": code, "kind": kind, "command": command, "message": str(exc)}
        if isinstance(exc, ConvergenceError):
            record["day"], record["hour"] = exc.day, exc.hour
        if out_dir is not None:
            try:
                _write_json(out_dir, "error.json", record)
            except OSError:
                pass
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return code
    stale = out_dir / "error.json"
    if stale.exists():
        stale.unlink()
    print(json.dumps(result, sort_keys=True, default=_fmt))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return run(args.command, args.config, args.out, args.seed, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
