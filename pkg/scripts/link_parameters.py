"""Single-link latency distribution and saturated goodput under the default link model."""

import argparse
import statistics

from homewsn.medium import COORDINATOR, Frame, LinkModel, Medium, Position, Topology


def one_link(seed, distance=30.0):
    topo = Topology(LinkModel())
    addr = topo.join(Position(distance, 0.0))
    return Medium(topo, seed=seed), addr


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("-n", type=int, default=10_000)
    args = p.parse_args()

    med, addr = one_link(args.seed)
    delays = []
    for i in range(args.n):
        out = med.transmit(Frame.build(addr, COORDINATOR, i % 256, b"R:kitchen;flame=1000;gas=180\n"), i * 1000.0)
        if out.delivered:
            delays.append(out.delay)
    q = statistics.quantiles(delays, n=20)
    print(f"latency ms: n={len(delays)} min={min(delays):.2f} p5={q[0]:.2f} median={statistics.median(delays):.2f} "
          f"p95={q[-1]:.2f} max={max(delays):.2f} mean={statistics.fmean(delays):.2f}")
    print(f"drops: {dict(med.drops)}")

    med, addr = one_link(args.seed)
    bits = 0
    last = 0.0
    for i in range(10_000):  # one 84-byte frame per ms for 10 s
        f = Frame.build(addr, COORDINATOR, i % 256, bytes(84))
        out = med.transmit(f, float(i))
        if out.delivered:
            bits += f.bits
            last = max(last, out.at)
    print(f"saturated goodput: {bits / (last / 1000):,.0f} bit/s (cap {med.topology.link.bit_rate_cap:,.0f})")


if __name__ == "__main__":
    main()
