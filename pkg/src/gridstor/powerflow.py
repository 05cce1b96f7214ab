"""Exact backward/forward sweep and the linearized branch-flow model.

All functions broadcast over leading batch axes, so one call can evaluate a
whole day of hourly snapshots: injections have shape ``(..., n_bus, 3)`` and
branch quantities ``(..., n_branch, 3)`` with buses in topology order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import PHASES, S_BASE_KVA, Network

_A = np.exp(2j * np.pi / 3)
# nominal phase angles A, B, C
PHASE_ROTATION = np.array([1.0, _A**2, _A])


class PowerFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class Injection:
    """Net per-phase consumption in kW/kvar (positive = load)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if self.p.shape != self.q.shape or self.p.shape[-1] != 3:
            raise ValueError("injection arrays must share shape (..., n_bus, 3)")

    def __add__(self, other: Injection) -> Injection:
        return Injection(self.p + other.p, self.q + other.q)

    def check(self, net: Network) -> None:
        topo = net.topology
        if self.p.shape[-2] != topo.n_bus:
            raise ValueError("injection bus axis does not match network")
        for k, bid in enumerate(topo.bus_ids):
            present = net.bus_map[bid].phases_present
            for f, ph in enumerate(PHASES):
                if ph not in present and (np.any(self.p[..., k, f] != 0) or np.any(self.q[..., k, f] != 0)):
                    raise ValueError(f"nonzero injection on absent phase {ph} of bus {bid}")

    @classmethod
    def zeros(cls, net: Network, batch: tuple = ()) -> Injection:
        shape = (*batch, net.topology.n_bus, 3)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True)
class PowerFlowSolution:
    """Bus voltages and sending-end branch flows (kW, kvar).

    ``voltage_local`` holds each phase in its own frame (nominal angle
    removed); :attr:`voltage` restores the absolute phasors in volts.
    """

    voltage_local: np.ndarray
    p_flow: np.ndarray
    q_flow: np.ndarray
    loss: np.ndarray
    converged: bool
    iterations: int
    injection: Injection
    bus_ids: tuple = ()

    def bus_position(self, bus: int) -> int:
        try:
            return self.bus_ids.index(bus)
        except ValueError:
            raise KeyError(f"bus {bus} not in solution") from None

    @property
    def voltage(self) -> np.ndarray:
        return self.voltage_local * PHASE_ROTATION

    @property
    def total_loss(self) -> np.ndarray:
        return self.loss.sum(axis=(-2, -1))

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.voltage)


def _down(net: Network) -> np.ndarray:
    return net.topology.downstream


def solve_exact(net: Network, inj: Injection, tol: float = 1e-8, max_iter: int = 100) -> PowerFlowSolution:
    """Backward/forward sweep with constant-power loads and flat start.

    Phases are decoupled, so each is solved in its own frame with a real
    source voltage; identical phases give bit-identical results.
    Convergence is declared when the largest complex voltage update falls
    below ``tol`` (per-unit); otherwise ``converged`` is False.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    D = _down(net)
    z = net.r_pu + 1j * net.x_pu
    s = (inj.p + 1j * inj.q) / S_BASE_KVA
    v0 = np.full(3, net.v_sub_pu, dtype=complex)
    v = np.broadcast_to(v0, s.shape).astype(complex)
    converged = False
    it = 0
    i_branch = np.zeros(s.shape[:-2] + (D.shape[0], 3), dtype=complex)
    for it in range(1, max_iter + 1):
        i_load = np.conj(s / v)
        i_branch = np.einsum("bk,...kf->...bf", D, i_load)
        drop = np.einsum("bk,...bf->...kf", D, z * i_branch)
        v_new = v0 - drop
        if not np.all(np.isfinite(v_new)):
            break
        delta = np.max(np.abs(v_new - v)) if v.size else 0.0
        v = v_new
        if delta < tol:
            converged = True
            break
    parent = net.topology.parent[1:]
    v_send = v[..., parent, :]
    s_flow = v_send * np.conj(i_branch) * S_BASE_KVA
    loss = np.abs(i_branch) ** 2 * net.r_pu * S_BASE_KVA
    return PowerFlowSolution(
        voltage_local=v * net.v_base,
        p_flow=s_flow.real,
        q_flow=s_flow.imag,
        loss=loss,
        converged=converged,
        iterations=it,
        injection=inj,
        bus_ids=net.topology.bus_ids,
    )


def bus_mismatch(net: Network, sol: PowerFlowSolution) -> float:
    """Largest per-phase complex power imbalance at any non-source bus (pu)."""
    D = _down(net)
    v = sol.voltage / net.v_base
    parent = net.topology.parent[1:]
    s_flow = (sol.p_flow + 1j * sol.q_flow) / S_BASE_KVA
    i_branch = np.conj(s_flow / v[..., parent, :])
    n = v.shape[-2]
    # current into bus k minus currents leaving it to children
    inc = np.zeros((n, D.shape[0]))
    for b, p in enumerate(parent):
        inc[b + 1, b] += 1.0
        inc[p, b] -= 1.0
    i_net = np.einsum("kb,...bf->...kf", inc, i_branch)
    s_cons = v * np.conj(i_net)
    s_spec = (sol.injection.p + 1j * sol.injection.q) / S_BASE_KVA
    return float(np.max(np.abs(s_cons[..., 1:, :] - s_spec[..., 1:, :]), initial=0.0))


def lin_flows(net: Network, inj: Injection) -> tuple[np.ndarray, np.ndarray]:
    """Lossless branch flows: each branch carries its downstream net injection."""
    D = _down(net)
    p = np.einsum("bk,...kf->...bf", D, inj.p)
    q = np.einsum("bk,...kf->...bf", D, inj.q)
    return p, q


def lin_voltages(net: Network, p_flow: np.ndarray, q_flow: np.ndarray) -> np.ndarray:
    """Voltage magnitudes (V) from the linear drop ``(pR + qX) / v_sub`` per branch."""
    D = _down(net)
    r = net.r_pu
    x = net.x_pu
    drop = (p_flow * r + q_flow * x) / S_BASE_KVA / net.v_sub_pu
    v = net.v_sub_pu - np.einsum("bk,...bf->...kf", D, drop)
    return v * net.v_base


def branch_losses(net: Network, p_flow: np.ndarray, q_flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic loss ``R (p^2 + q^2) / v_sub^2`` with the source voltage fixed.

    Returns (three-phase loss per branch, network total), both in kW.
    """
    per_phase = net.r_pu * ((p_flow / S_BASE_KVA) ** 2 + (q_flow / S_BASE_KVA) ** 2) / net.v_sub_pu**2
    per_line = per_phase.sum(axis=-1) * S_BASE_KVA
    return per_line, per_line.sum(axis=-1)


def solve_linear(net: Network, inj: Injection) -> PowerFlowSolution:
    """Linearized model packaged like an exact solution (voltages at nominal angles)."""
    p, q = lin_flows(net, inj)
    vm = lin_voltages(net, p, q)
    per_phase = net.r_pu * ((p / S_BASE_KVA) ** 2 + (q / S_BASE_KVA) ** 2) / net.v_sub_pu**2 * S_BASE_KVA
    return PowerFlowSolution(
        voltage_local=vm.astype(complex),
        p_flow=p,
        q_flow=q,
        loss=per_phase,
        converged=True,
        iterations=0,
        injection=inj,
        bus_ids=net.topology.bus_ids,
    )


def distflow_residual(net: Network, sol: PowerFlowSolution) -> float:
    """Largest violation (pu) of the nonlinear branch-flow recursions.

    Active and reactive balances use the source-voltage loss denominator;
    the squared-voltage recursion divides by the receiving-end voltage as
    written, evaluated at the solution's own voltages.
    """
    topo = net.topology
    r, x = net.r_pu, net.x_pu
    vsub2 = net.v_sub_pu**2
    p = sol.p_flow / S_BASE_KVA
    q = sol.q_flow / S_BASE_KVA
    vm = np.abs(sol.voltage) / net.v_base
    pj = sol.injection.p / S_BASE_KVA
    qj = sol.injection.q / S_BASE_KVA
    parent = topo.parent[1:]
    # children flow sums: branch c is a child of branch b when parent[c] == b + 1
    child = np.zeros((topo.n_branch, topo.n_branch))
    for c, par in enumerate(parent):
        if par > 0:
            child[par - 1, c] = 1.0
    sq = p**2 + q**2
    p_child = np.einsum("bc,...cf->...bf", child, p)
    q_child = np.einsum("bc,...cf->...bf", child, q)
    res_p = p - (p_child + r * sq / vsub2 + pj[..., 1:, :])
    res_q = q - (q_child + x * sq / vsub2 + qj[..., 1:, :])
    vi2 = vm[..., parent, :] ** 2
    vj2 = vm[..., 1:, :] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        res_v = vj2 - (vi2 - 2 * (p * r + q * x) + (r**2 + x**2) * sq / vj2)
    return float(max(np.max(np.abs(a), initial=0.0) for a in (res_p, res_q, res_v)))
