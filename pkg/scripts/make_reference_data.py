"""Write the 12-bus reference feeder and its seeded profiles to configs/data/."""

import argparse
from pathlib import Path

from gridstor import desk
from gridstor.netmodel import format_network
from gridstor.profiles import TimeGrid, format_profiles, single_day_grid, synth_profiles


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=Path(__file__).resolve().parents[1] / "configs" / "data", type=Path)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    net = desk.reference_feeder()
    grid = TimeGrid()
    (args.out / "reference.feeder").write_text(format_network(net), encoding="utf-8")
    prof = desk.reference_profiles(net, grid, seed=args.seed)
    (args.out / "reference_profiles.csv").write_text(format_profiles(prof, net, grid), encoding="utf-8")

    two = desk.two_bus()
    (args.out / "two_bus.feeder").write_text(format_network(two), encoding="utf-8")
    g1 = single_day_grid("summer")
    prof2 = synth_profiles(args.seed, two, g1)
    (args.out / "two_bus_profiles.csv").write_text(format_profiles(prof2, two, g1), encoding="utf-8")
    print(f"wrote reference and two-bus data to {args.out}")


if __name__ == "__main__":
    main()
