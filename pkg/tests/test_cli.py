import csv
import json
import os
import re
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gridstor import cli, desk
from gridstor.cli import ConfigError, parse_config, run
from gridstor.netmodel import format_network
from gridstor.profiles import format_profiles, single_day_grid, synth_profiles, zero_profiles

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

ONE_DAY = '[{ id = "summer", season = "summer", weight = 365 }]'

# Columns that are identifiers or counts rather than physical quantities.
UNITLESS = {"index", "unit", "bus", "buses", "day", "hour", "n_ess", "vuf_max_bus", "source", "row",
            "field_with_unit", "value", "status", "case"}
UNIT_SUFFIX = re.compile(r"_(kw|kwh|kvar|percent|v|pu|h|kw_per_phase|kwh_per_phase|kw_3ph)$")


def write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def two_bus_case(tmp_path: Path, prof=None, extra: str = "") -> Path:
    net = desk.two_bus()
    grid = single_day_grid("summer")
    if prof is None:
        prof = synth_profiles(3, net, grid)
    write(tmp_path / "two_bus.feeder", format_network(net))
    write(tmp_path / "profiles.csv", format_profiles(prof, net, grid))
    body = f"""
[feeder]
path = "two_bus.feeder"

[profiles]
path = "profiles.csv"

[grid]
days = {ONE_DAY}

[output]
dir = "out"
{extra}
"""
    return write(tmp_path / "case.toml", body)


def read_csv(path: Path) -> tuple[list, list]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def error_record(out: Path) -> dict:
    return json.loads((out / "error.json").read_text(encoding="utf-8"))


def snapshot(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    """One-day reference sweep over N = 1, 2 shared by the slower checks."""
    root = tmp_path_factory.mktemp("sweep")
    cfg = write(root / "sweep.toml", f"""
[feeder]
builtin = "reference"

[profiles]
source = "reference"
seed = 7

[grid]
days = {ONE_DAY}

[sizing]
n_sweep = [1, 2]
aggregate_cap = "from-cess"

[output]
dir = "out"
""")
    assert run("sweep", cfg) == cli.EXIT_OK
    assert run("baseline", cfg) == cli.EXIT_OK
    return cfg, root / "out"


# ---------------------------------------------------------------------------
# config parsing


def test_shipped_configs_parse():
    for path in sorted(CONFIGS.glob("*.toml")):
        cfg = cli.load_config(path)
        assert cfg.out_dir


def test_unknown_section_and_key_rejected():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config('[feeder]\nbuiltin = "two_bus"\n[bogus]\nx = 1\n')
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config('[feeder]\nbuiltin = "two_bus"\nvoltage = 3\n')


def test_feeder_source_must_be_unique():
    with pytest.raises(ConfigError):
        parse_config("[profiles]\nsource = 'synth'\n")
    with pytest.raises(ConfigError):
        parse_config('[feeder]\nbuiltin = "two_bus"\npath = "x.feeder"\n')
    with pytest.raises(ConfigError, match="unknown builtin"):
        parse_config('[feeder]\nbuiltin = "ieee13"\n')


def test_type_errors_are_config_errors():
    with pytest.raises(ConfigError):
        parse_config('[feeder]\nbuiltin = "two_bus"\n[sizing]\nn_ess = "two"\n')
    with pytest.raises(ConfigError):
        parse_config('[feeder]\nbuiltin = "two_bus"\n[solver]\nrho = -1.0\n')
    with pytest.raises(ConfigError):
        parse_config('[feeder]\nbuiltin = "two_bus"\n[sizing]\nn_sweep = [0, 1]\n')


def test_invalid_toml():
    with pytest.raises(ConfigError, match="invalid TOML"):
        parse_config("[feeder\n")


# ---------------------------------------------------------------------------
# commands


def test_validate_two_bus(tmp_path):
    cfg = two_bus_case(tmp_path)
    assert run("validate", cfg) == cli.EXIT_OK
    out = tmp_path / "out"
    rec = json.loads((out / "validate.json").read_text(encoding="utf-8"))
    assert rec["status"] == "ok"
    assert (out / "config_resolved.json").is_file()
    assert not (out / "error.json").exists()


def test_main_parses_arguments(tmp_path, capsys):
    cfg = two_bus_case(tmp_path)
    out = tmp_path / "elsewhere"
    assert cli.main(["validate", "--config", str(cfg), "--out", str(out), "--seed", "5", "--jobs", "1"]) == 0
    assert (out / "validate.json").is_file()
    assert json.loads(capsys.readouterr().out)["status"] == "ok"


def test_zero_load_baseline_reports_zero(tmp_path):
    net = desk.two_bus()
    grid = single_day_grid("summer")
    cfg = two_bus_case(tmp_path, prof=zero_profiles(net, grid))
    assert run("baseline", cfg) == cli.EXIT_OK
    header, rows = read_csv(tmp_path / "out" / "baseline_indices.csv")
    assert header == list(cli.INDEX_HEADER)
    k = header.index("index")
    v = header.index("value")
    zero = [r for r in rows if r[k] == "annual_loss" or r[k].startswith("loss_") or r[k] in ("vuf_max", "vuf_avg")]
    assert len(zero) >= 4
    for r in zero:
        assert float(r[v]) == 0.0


def test_size_two_bus_writes_solution(tmp_path):
    cfg = two_bus_case(tmp_path)
    assert run("size", cfg) == cli.EXIT_OK
    out = tmp_path / "out"
    for name in ("solution.txt", "size_indices.csv", "size_vuf.csv", "plot_soc.csv"):
        assert (out / name).is_file(), name
    schedules = sorted(out.glob("schedule_bus*_summer.csv"))
    assert len(schedules) == 1
    header, rows = read_csv(schedules[0])
    assert len(rows) == 24
    defs = json.loads((out / "index_definitions.json").read_text(encoding="utf-8"))
    assert {"annual_loss", "hosting_total", "vuf_max", "vuf_avg"} <= set(defs)


def test_sweep_table_shape(sweep_dir):
    _, out = sweep_dir
    header, rows = read_csv(out / "sweep.csv")
    assert header == list(cli.SWEEP_HEADER)
    assert [int(r[0]) for r in rows] == [1, 2]
    col = {h: i for i, h in enumerate(header)}
    loss = [float(r[col["loss_kwh"]]) for r in rows]
    obj = [float(r[col["objective_kwh"]]) for r in rows]
    total = [float(r[col["total_capacity_kwh"]]) for r in rows]
    assert all(b <= a * (1 + 1e-6) for a, b in zip(loss, loss[1:]))
    assert all(b <= a * (1 + 1e-6) for a, b in zip(obj, obj[1:]))
    assert np.allclose(total, total[0], rtol=1e-9)
    for r in rows:
        caps = [float(c) for c in r[col["capacities_kwh"]].split()]
        assert len(caps) == len(r[col["buses"]].split())
        assert sum(caps) == pytest.approx(total[0], rel=1e-9)
    for name in ("plot_loss_vs_n.csv", "plot_hosting_vs_n.csv", "sweep_base.csv"):
        assert (out / name).is_file()


def test_report_merges_existing_tables(sweep_dir):
    cfg, out = sweep_dir
    assert run("report", cfg) == cli.EXIT_OK
    header, rows = read_csv(out / "report.csv")
    assert header == ["source", "row", "field_with_unit", "value"]
    sources = {r[0] for r in rows}
    assert {"sweep.csv", "baseline_indices.csv", "sweep_base.csv"} <= sources


def test_report_with_nothing_is_config_error(tmp_path):
    cfg = two_bus_case(tmp_path)
    assert run("report", cfg) == cli.EXIT_CONFIG
    assert error_record(tmp_path / "out")["kind"] == "config"


def test_every_csv_header_declares_units(sweep_dir, tmp_path):
    _, out = sweep_dir
    cfg = two_bus_case(tmp_path)
    assert run("size", cfg) == cli.EXIT_OK
    files = list(out.glob("*.csv")) + list((tmp_path / "out").glob("*.csv"))
    assert len(files) >= 8
    for path in files:
        header, _ = read_csv(path)
        has_unit_column = "unit" in header or "field_with_unit" in header
        for name in header:
            assert name in UNITLESS or UNIT_SUFFIX.search(name), f"{path.name}: {name}"
        if "value" in header:
            assert has_unit_column, path.name


# ---------------------------------------------------------------------------
# determinism and output hygiene


def test_rerun_is_byte_identical(tmp_path):
    cfg = two_bus_case(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("size", cfg, out=str(a), seed=11) == cli.EXIT_OK
    assert run("size", cfg, out=str(b), seed=11) == cli.EXIT_OK
    assert snapshot(a) == snapshot(b)


def test_seed_changes_synth_outputs(tmp_path):
    cfg = write(tmp_path / "synth.toml", f"""
[feeder]
builtin = "two_bus"

[profiles]
source = "synth"

[grid]
days = {ONE_DAY}
""")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("baseline", cfg, out=str(a), seed=1) == cli.EXIT_OK
    assert run("baseline", cfg, out=str(b), seed=2) == cli.EXIT_OK
    assert (a / "baseline_indices.csv").read_bytes() != (b / "baseline_indices.csv").read_bytes()
    resolved = json.loads((a / "config_resolved.json").read_text(encoding="utf-8"))
    assert resolved["seed"] == 1


def test_no_temporary_files_left(tmp_path):
    cfg = two_bus_case(tmp_path)
    assert run("size", cfg) == cli.EXIT_OK
    leftovers = [p.name for p in (tmp_path / "out").iterdir() if p.name.endswith(".tmp")]
    assert leftovers == []


def test_atomic_write_keeps_old_file_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "f.csv"
    cli.atomic_write(target, "old\n")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        cli.atomic_write(target, "new\n")
    assert target.read_text(encoding="utf-8") == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["f.csv"]


# ---------------------------------------------------------------------------
# exit codes


def test_missing_config_exit_2(tmp_path):
    assert run("validate", tmp_path / "nope.toml", out=str(tmp_path / "out")) == cli.EXIT_CONFIG
    rec = error_record(tmp_path / "out")
    assert rec["code"] == 2 and rec["kind"] == "config" and rec["command"] == "validate"


def test_missing_feeder_exit_2(tmp_path):
    cfg = write(tmp_path / "c.toml", '[feeder]\npath = "missing.feeder"\n[output]\ndir = "out"\n')
    assert run("baseline", cfg) == cli.EXIT_CONFIG
    assert "does not exist" in error_record(tmp_path / "out")["message"]


def test_bad_candidate_exit_2(tmp_path):
    cfg = two_bus_case(tmp_path, extra="[sizing]\ncandidates = [9]\n")
    assert run("size", cfg) == cli.EXIT_CONFIG


def test_sweep_with_free_cap_exit_2(tmp_path):
    cfg = two_bus_case(tmp_path, extra='[sizing]\naggregate_cap = "free"\n')
    assert run("sweep", cfg) == cli.EXIT_CONFIG


def test_infeasible_exit_4(tmp_path):
    # heavy evening load drives the far bus below v_min and the storage is capped
    net = desk.two_bus()
    grid = single_day_grid("summer")
    base = zero_profiles(net, grid)
    p_load = base.p_load.copy()
    p_load[0, 18:22, 1, :] = 45.0
    prof = replace(base, p_load=p_load)
    cfg = two_bus_case(tmp_path, prof=prof, extra="[sizing]\ncapacity_bound = 0.5\n")
    assert run("size", cfg) == cli.EXIT_INFEASIBLE
    rec = error_record(tmp_path / "out")
    assert rec["code"] == 4 and rec["kind"] == "infeasible"


def test_solver_failure_exit_3(tmp_path):
    cfg = two_bus_case(tmp_path, extra="[solver]\nmax_iter = 3\n")
    assert run("size", cfg) == cli.EXIT_SOLVER
    rec = error_record(tmp_path / "out")
    assert rec["code"] == 3 and rec["kind"] == "solver"


def test_success_clears_stale_error(tmp_path):
    cfg = two_bus_case(tmp_path, extra="[solver]\nmax_iter = 3\n")
    assert run("size", cfg) == cli.EXIT_SOLVER
    good = two_bus_case(tmp_path)
    assert run("size", good) == cli.EXIT_OK
    assert not (tmp_path / "out" / "error.json").exists()
