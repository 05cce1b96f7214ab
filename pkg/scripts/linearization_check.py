"""How far the linear voltage and loss models drift from the exact sweep.

Scales the reference profiles by a range of factors and reports the worst
voltage error (% of v_sub) and the annual loss gap for each.

    python scripts/linearization_check.py --scales 0.5 1 2 3
"""

import argparse

import numpy as np

from gridstor import desk
from gridstor.powerflow import Injection, branch_losses, lin_flows, lin_voltages, solve_exact
from gridstor.profiles import TimeGrid


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scales", type=float, nargs="+", default=[0.5, 1.0, 1.5, 2.0, 3.0])
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    net = desk.reference_feeder()
    grid = TimeGrid()
    prof = desk.reference_profiles(net, grid, seed=args.seed)
    w = np.array([d.weight for d in grid.days])

    print(f"{'scale':>6} {'|V-Vsub| max %':>15} {'lin err %':>10} {'exact kWh/yr':>13} {'model kWh/yr':>13} {'gap %':>7}")
    for s in args.scales:
        inj = Injection(s * (prof.p_load - prof.p_pv), s * (prof.q_load - prof.q_pv))
        exact = solve_exact(net, inj)
        if not exact.converged:
            print(f"{s:>6.2f}  exact sweep did not converge")
            continue
        p, q = lin_flows(net, inj)
        lin = lin_voltages(net, p, q)
        _, model = branch_losses(net, p, q)
        spread = 100 * np.max(np.abs(exact.vmag - net.v_sub)) / net.v_sub
        err = 100 * np.max(np.abs(lin - exact.vmag)) / net.v_sub
        e_kwh = float(w @ exact.total_loss.sum(axis=1))
        m_kwh = float(w @ model.sum(axis=1))
        print(f"{s:>6.2f} {spread:>15.3f} {err:>10.3f} {e_kwh:>13.2f} {m_kwh:>13.2f} {100 * (m_kwh / e_kwh - 1):>7.2f}")


if __name__ == "__main__":
    main()
