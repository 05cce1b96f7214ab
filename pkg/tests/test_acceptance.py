"""Acceptance criteria, each run at its stated tolerance.

Every check records one PASS/FAIL line that is echoed in the pytest terminal
summary under "acceptance criteria".
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gridstor import cli, desk
from gridstor.analysis import hosting_capacity, vuf_from_phasors, vuf_study
from gridstor.powerflow import Injection, branch_losses, lin_flows, lin_voltages, solve_exact
from gridstor.profiles import ProfileSet, TimeGrid, synth_profiles
from gridstor.qpsolve import INFEASIBLE, OPTIMAL, QpProblem, solve_qp
from gridstor.sizing import SizingProblem, dess_study, enumerate_oracle, solve_miqp
from gridstor.storage import EssSchedule, EssSpec, Placement, check_cycle, check_limits, soc_trajectory

from oracles import constructed_qp, feasible_case, polar, random_schedule, simulate_storage, symmetric_components
from test_sizing import small_problem

pytestmark = pytest.mark.slow

REFERENCE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "reference.toml"
INF = np.inf


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


@pytest.fixture(scope="module")
def ref_study(reference):
    """N = 1 optimum on the reference feeder and the equal-aggregate study over N = 1, 2, 3."""
    net, grid, prof = reference
    prob = SizingProblem(net, prof, grid, tuple(net.candidates()), n_ess=1)
    single = solve_miqp(prob)
    study = dess_study(replace(prob, aggregate_cap=single.total_capacity), [1, 2, 3], hosting_day="summer")
    return prob, single, study


# ---------------------------------------------------------------------------
# power flow


def test_linearization_fidelity(reference, criterion):
    net, grid, prof = reference
    t0 = time.perf_counter()
    inj = Injection(prof.p_load - prof.p_pv, prof.q_load - prof.q_pv)
    exact = solve_exact(net, inj)
    p, q = lin_flows(net, inj)
    lin = lin_voltages(net, p, q)
    elapsed = time.perf_counter() - t0
    spread = np.max(np.abs(exact.vmag - net.v_sub)) / net.v_sub
    err = np.max(np.abs(lin - exact.vmag)) / net.v_sub
    assert exact.converged and spread <= 0.05, "fixture must keep exact voltages within 5 % of v_sub"
    ok = err < 0.01 and elapsed < 5.0
    criterion("linearization fidelity", ok, f"max error {100 * err:.3f} % of v_sub, {elapsed:.3f} s "
              f"({len(net.buses)} buses, {grid.n_days}x{grid.hours_per_day} hours)")
    assert ok


def test_loss_model_fidelity(reference, criterion):
    net, grid, prof = reference
    inj = Injection(prof.p_load - prof.p_pv, prof.q_load - prof.q_pv)
    exact = solve_exact(net, inj)
    p, q = lin_flows(net, inj)
    _, model = branch_losses(net, p, q)
    w = np.array([d.weight for d in grid.days])
    model_kwh = float(w @ model.sum(axis=1))
    exact_kwh = float(w @ exact.total_loss.sum(axis=1))
    gap = abs(model_kwh - exact_kwh) / exact_kwh
    ok = gap < 0.05
    criterion("loss-model fidelity", ok, f"model {model_kwh:.2f} kWh vs exact {exact_kwh:.2f} kWh ({100 * gap:.2f} %)")
    assert ok


# ---------------------------------------------------------------------------
# sizing


def test_miqp_matches_enumeration(criterion):
    t0 = time.perf_counter()
    mismatches = []
    for k in range(20):
        rng = np.random.default_rng(100 + k)
        n = int(rng.integers(5, 9))
        prob = small_problem(n=n, seed=100 + k, n_cand=int(rng.integers(2, min(5, n - 1) + 1)),
                             n_ess=int(rng.integers(1, 3)))
        assert len(prob.candidates) <= 5 and prob.n_ess <= 2
        a, b = solve_miqp(prob), enumerate_oracle(prob)
        if a.buses != b.buses or _rel(a.objective_kwh, b.objective_kwh) > 1e-5:
            mismatches.append((k, a.buses, b.buses, a.objective_kwh, b.objective_kwh))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 300
    criterion("MIQP vs enumeration", ok, f"{20 - len(mismatches)}/20 match, {elapsed:.1f} s")
    assert ok, mismatches


def test_cess_reduces_losses(ref_study, criterion):
    _, single, study = ref_study
    reduction = study.rows[0].loss_reduction_pct
    ok = reduction > 1.0
    criterion("CESS loss reduction", ok,
              f"bus {single.buses[0]}, {single.total_capacity:.2f} kWh, weighted annual losses -{reduction:.2f} %")
    assert ok


def test_dess_non_increasing(ref_study, criterion):
    _, _, study = ref_study
    objs = [r.objective_kwh for r in study.rows]
    ok = all(b <= a * (1 + 1e-6) for a, b in zip(objs, objs[1:]))
    caps = [sum(r.capacities) for r in study.rows]
    ok = ok and np.allclose(caps, caps[0], rtol=1e-9)
    criterion("DESS dominance", ok, "objective " + " >= ".join(f"{o:.4f}" for o in objs) + " kWh")
    assert ok


def test_hosting_capacity_gain(ref_study, criterion):
    prob, single, study = ref_study
    net, prof, grid = prob.net, prob.profiles, prob.grid
    base = study.base_hosting_kw
    with_ess = study.rows[0].hosting_kw
    again = hosting_capacity(net, prof, grid, "summer", single.placements).total_kw
    gain = 100 * (with_ess / base - 1)
    ok = with_ess > base * 1.05 and abs(again - with_ess) <= 0.01
    criterion("hosting capacity gain", ok,
              f"{base:.3f} kW -> {with_ess:.3f} kW (+{gain:.2f} %), rerun differs by {abs(again - with_ess):.4f} kW")
    assert ok


# ---------------------------------------------------------------------------
# VUF


def test_vuf_balanced_is_zero(criterion):
    worst = 0.0
    for mag in (100.0, 230.0, 253.0):
        for rot in np.linspace(-180, 180, 13):
            worst = max(worst, vuf_from_phasors(*(polar(mag, rot + a) for a in (0, -120, 120))))
    ok = worst <= 1e-10
    criterion("VUF balanced set", ok, f"max {worst:.2e} %")
    assert ok


@pytest.mark.xfail(strict=True, reason="the stated 4.41 % omits the 1/3 of the sequence transform; "
                                       "the complex oracle gives v- = 10/3 V and 1.4706 %")
def test_vuf_hand_triple(criterion):
    va, vb, vc = polar(230, 0), polar(220, -120), polar(230, 120)
    pos, neg = symmetric_components(va, vb, vc)
    got = vuf_from_phasors(va, vb, vc)
    ok = abs(got - 4.41) <= 0.01
    criterion("VUF hand triple 4.41 %", ok,
              f"oracle v+ = {pos:.2f} V, v- = {neg:.4f} V, VUF = {got:.4f} % (stated 226.67 V, 10.0 V, 4.41 %)")
    assert ok


def test_vuf_balanced_feeder_with_ess(criterion):
    net = desk.chain(6)
    grid = TimeGrid()
    raw = synth_profiles(4, net, grid)
    arrs = [np.repeat(a[..., :1], 3, axis=-1) for a in (raw.p_load, raw.q_load, raw.p_pv0, raw.q_pv0)]
    prof = ProfileSet(raw.bus_ids, *arrs, raw.pv_scale)
    sched = EssSchedule.from_net(0.8 * np.sin(np.linspace(0, 2 * np.pi, 24, endpoint=False)))
    ess = tuple(Placement(b, 40.0, 20.0, tuple(sched for _ in grid.days), 10.0, 10.0) for b in (3, 5))
    assert all(p.violations() == [] for p in ess)
    base = vuf_study(net, prof, grid)
    with_ess = vuf_study(net, prof, grid, ess)
    ok = base.max_percent == 0.0 and with_ess.max_percent == 0.0 and with_ess.avg_percent == 0.0
    criterion("VUF balanced feeder + ESS", ok, f"max {with_ess.max_percent!r} %, avg {with_ess.avg_percent!r} %")
    assert ok


# ---------------------------------------------------------------------------
# storage


def test_storage_model_agrees_with_simulator(criterion):
    rng = np.random.default_rng(2024)
    disagree = 0
    worst_cycle = 0.0
    feasible = 0
    for k in range(1000):
        if k % 2 == 0:
            spec, sched = feasible_case(rng)
        else:
            spec = EssSpec(e_max=40.0, p_max_charge=8.0, p_max_discharge=8.0, e0=float(rng.uniform(0, 40)))
            sched = random_schedule(rng, p_max=9.0, feasible_bias=bool(k % 4 == 1))
        sim_ok, soc, imbalance = simulate_storage(spec, sched)
        passed = not check_cycle(spec, sched) and not check_limits(spec, sched)
        disagree += passed != sim_ok
        disagree += not np.allclose(soc_trajectory(spec, sched), soc, atol=1e-9)
        if passed:
            feasible += 1
            worst_cycle = max(worst_cycle, abs(imbalance))
    ok = disagree == 0 and worst_cycle <= 1e-6 and feasible >= 500
    criterion("storage model", ok, f"1000 schedules, {disagree} disagreements, {feasible} feasible, "
              f"max cyclic imbalance {worst_cycle:.1e} kWh")
    assert ok


# ---------------------------------------------------------------------------
# QP solver


def test_qp_solver(criterion):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 16))
        m_eq = int(rng.integers(0, n)) if n > 1 else 0
        m_in = int(rng.integers(0, 8))
        Q, c, A_eq, b_eq, A_in, l_in, u_in, lb, ub, x_star = constructed_qp(rng, n, m_eq, m_in)
        sol = solve_qp(QpProblem(Q, c, A_eq, b_eq, A_in, l_in, u_in, lb, ub))
        err = np.max(np.abs(sol.x - x_star)) / max(1.0, np.max(np.abs(x_star)))
        worst = max(worst, err if sol.status == OPTIMAL else np.inf)

    analytic = [
        (QpProblem(Q=2 * np.eye(2), c=[-6.0, -4.0], A_eq=[[1.0, 1.0]], b_eq=[4.0], offset=13.0), [2.5, 1.5], 0.5),
        (QpProblem(Q=[[2.0]], c=[0.0], lb=[1.0]), [1.0], 1.0),
        (QpProblem(Q=np.diag([2.0, 4.0]), c=[-2.0, -8.0], ub=[0.5, INF]), [0.5, 2.0], -8.75),
    ]
    kkt = 0.0
    for prob, x, f in analytic:
        sol = solve_qp(prob)
        kkt = max(kkt, np.max(np.abs(sol.x - x)), abs(sol.objective_value - f))

    infeasible = [
        QpProblem(Q=[[2.0]], c=[0.0], lb=[2.0], ub=[1.0]),
        QpProblem(Q=[[2.0]], c=[0.0], A_in=[[1.0], [1.0]], l_in=[2.0, -INF], u_in=[INF, 1.0]),
        QpProblem(Q=np.eye(2), c=[0.0, 0.0], A_eq=[[1.0, 1.0], [1.0, 1.0]], b_eq=[1.0, 2.0]),
        QpProblem(Q=np.eye(2), c=[1.0, 1.0], A_in=[[1.0, 1.0]], l_in=[3.0], u_in=[INF], ub=[1.0, 1.0]),
    ]
    detected = sum(solve_qp(p).status == INFEASIBLE for p in infeasible)
    ok = worst < 1e-5 and kkt < 1e-8 and detected == len(infeasible)
    criterion("QP solver", ok, f"constructed max rel error {worst:.1e}, analytic {kkt:.1e}, "
              f"infeasible {detected}/{len(infeasible)} detected")
    assert ok


# ---------------------------------------------------------------------------
# determinism


def test_sweep_byte_identical(tmp_path, criterion):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run("sweep", REFERENCE_CONFIG, out=str(a), seed=7) == cli.EXIT_OK
    assert cli.run("sweep", REFERENCE_CONFIG, out=str(b), seed=7, jobs=2) == cli.EXIT_OK
    files_a = sorted(p.name for p in a.iterdir())
    same = files_a == sorted(p.name for p in b.iterdir())
    same = same and all((a / n).read_bytes() == (b / n).read_bytes() for n in files_a)
    criterion("sweep determinism", same, f"{len(files_a)} files compared (serial vs two workers)")
    assert same
