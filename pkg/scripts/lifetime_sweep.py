"""First-node-death lifetime of the bundled scenario across duty-cycle awake windows."""

import argparse
import math

from homewsn.energy import DutyCycle, lifetime
from homewsn.scenario import default_scenario, load_scenario


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenario")
    p.add_argument("--period", type=int, default=1000)
    p.add_argument("--awake", type=int, nargs="+", default=[10, 25, 50, 100, 200, 500, 1000])
    p.add_argument("--battery-mah", type=float)
    args = p.parse_args()

    sc = load_scenario(args.scenario) if args.scenario else default_scenario()
    cap = args.battery_mah or sc.battery_mah
    base = lifetime(sc, DutyCycle("always_on"), sc.energy, horizon=math.inf, capacity=cap)
    print(f"battery {cap} mAh, always_on: {base / 3.6e6:.2f} h")
    print(f"{'awake ms':>9} {'period ms':>10} {'hours':>9} {'x always_on':>12}")
    for awake in args.awake:
        duty = DutyCycle("duty_cycled", awake, args.period)
        ms = lifetime(sc, duty, sc.energy, horizon=math.inf, capacity=cap)
        print(f"{awake:>9} {args.period:>10} {ms / 3.6e6:>9.2f} {ms / base:>12.2f}")


if __name__ == "__main__":
    main()
