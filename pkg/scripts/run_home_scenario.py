"""Run the bundled four-room scenario for a few seeds and tabulate the headline numbers."""

import argparse
import tempfile
from pathlib import Path

from homewsn.scenario import default_scenario, load_scenario
from homewsn.simulation import simulate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenario")
    p.add_argument("--seeds", type=int, nargs="+", default=[42, 43, 44])
    p.add_argument("--out", help="keep run directories here (default: temporary)")
    args = p.parse_args()

    base = load_scenario(args.scenario) if args.scenario else default_scenario()
    root = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="homewsn-"))
    print(f"{'seed':>6} {'sent':>6} {'deliv':>6} {'lost':>5} {'records':>8} {'rule':>5} {'change':>6} "
          f"{'lat mean':>9} {'ratio':>6}")
    for seed in args.seeds:
        rep = simulate(base.with_seed(seed), root / f"seed-{seed}").report
        med, gw, comp = rep["medium"], rep["gateway"], rep["compression"]
        ratio = comp["compressed_bytes"] / comp["ascii_bytes"] if comp["ascii_bytes"] else float("nan")
        print(f"{seed:>6} {med['frames_originated']:>6} {med['delivered']:>6} {med['frames_lost']:>5} "
              f"{gw['records']:>8} {rep['alerts']['threshold_rule']:>5} {rep['alerts']['change_detected']:>6} "
              f"{med['delivery_delay_ms']['mean']:>9.2f} {ratio:>6.3f}")
    print(f"runs in {root}")


if __name__ == "__main__":
    main()
