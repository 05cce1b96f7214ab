"""Community vs distributed storage on the 12-bus reference feeder.

Sizes one unit, then splits the same aggregate capacity over N units and
prints the loss, hosting and VUF indices for each case.

    python scripts/reference_study.py --n 1 2 3 --seed 7
"""

import argparse
import logging
import time
from dataclasses import replace

from gridstor import desk
from gridstor.profiles import TimeGrid
from gridstor.sizing import SizingProblem, dess_study, solve_miqp


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, nargs="+", default=[1, 2, 3], help="numbers of units to compare")
    ap.add_argument("--seed", type=int, default=7, help="profile seed")
    ap.add_argument("--pv", type=float, default=1.0, help="PV rating per home (kW)")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    net = desk.reference_feeder()
    grid = TimeGrid()
    prof = desk.reference_profiles(net, grid, seed=args.seed, pv_rating_kw=args.pv)
    prob = SizingProblem(net, prof, grid, tuple(net.candidates()), n_ess=1)

    t0 = time.perf_counter()
    single = solve_miqp(prob)
    print(f"single unit: bus {single.buses[0]}, {single.total_capacity:.2f} kWh "
          f"(objective {single.objective_kwh:.2f} kWh, {time.perf_counter() - t0:.1f} s)")

    study = dess_study(replace(prob, aggregate_cap=single.total_capacity), args.n, jobs=args.jobs)
    print(f"\nno storage: losses {study.base_loss_kwh:.2f} kWh/yr, hosting {study.base_hosting_kw:.2f} kW, "
          f"VUF max {study.base_vuf_max_percent:.3f} % avg {study.base_vuf_avg_percent:.3f} %")
    print(f"\n{'N':>2} {'buses':<12} {'capacities (kWh)':<28} {'loss kWh':>10} {'red. %':>7} "
          f"{'host kW':>9} {'inc. %':>7} {'VUF max %':>9} {'VUF avg %':>9}")
    for r in study.rows:
        caps = " ".join(f"{c:.1f}" for c in r.capacities)
        buses = " ".join(str(b) for b in r.buses)
        print(f"{r.n:>2} {buses:<12} {caps:<28} {r.loss_kwh:>10.2f} {r.loss_reduction_pct:>7.2f} "
              f"{r.hosting_kw:>9.2f} {r.hosting_increase_pct:>7.2f} {r.vuf_max_percent:>9.3f} {r.vuf_avg_percent:>9.3f}")


if __name__ == "__main__":
    main()
