"""Command line: simulate, export, serve, report, lifetime."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import scenario as scenario_mod
from .energy import DutyCycle, lifetime
from .nodes import UnknownField, UnknownRoom
from .simulation import simulate
from .store import STORE_URL_ENV, StoreError, backend_from_env, export, serve

log = logging.getLogger("homewsn")


def _load(path: str | None):
    return scenario_mod.load_scenario(path) if path else scenario_mod.default_scenario()


def cmd_simulate(args) -> int:
    sc = _load(args.scenario)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    backend = None
    if args.remote or os.environ.get(STORE_URL_ENV):
        backend = backend_from_env()
    result = simulate(sc, args.out, backend)
    med, gw = result.report["medium"], result.report["gateway"]
    print(f"seed {sc.seed}: {med['frames_originated']} frames sent, {med['delivered']} delivered, "
          f"{gw['records']} records, {sum(result.report['alerts'].values())} alerts -> {args.out}")
    return 0


def _store(args):
    return backend_from_env(args.store)


def cmd_export(args) -> int:
    text = export(_store(args), args.room, args.field, args.from_ts, args.to_ts, args.format, args.output)
    if args.output is None:
        sys.stdout.write(text)
    return 0


def cmd_serve(args) -> int:
    server = serve(_store(args), args.bind)
    print(f"serving {server.url} (GET /rooms, /rooms/<room>/fields, /series?room=&field=&from=&to=)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_report(args) -> int:
    report = json.loads((Path(args.run) / "report.json").read_text())
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    sc, med, gw = report["scenario"], report["medium"], report["gateway"]
    d = med["delivery_delay_ms"]
    print(f"scenario  seed={sc['seed']} duration={sc['duration_ms']} ms routing={sc['routing_mode']}")
    print(f"medium    sent={med['sent']} delivered={med['delivered']} drops={med['drops']} "
          f"retx={med['retransmissions']} lost={med['frames_lost']}")
    if d["count"]:
        print(f"latency   n={d['count']} min={d['min']:.1f} mean={d['mean']:.1f} max={d['max']:.1f} ms")
    print(f"gateway   messages={gw['messages_reassembled']} records={gw['records']} "
          f"dup_frames={gw['frames_duplicate']} timeouts={gw['reassembly_timeouts']} malformed={gw['messages_malformed']}")
    print(f"alerts    {report['alerts']}")
    comp = report["compression"]
    if comp["ascii_bytes"]:
        print(f"compress  {comp['ascii_bytes']} -> {comp['compressed_bytes']} bytes "
              f"({comp['compressed_bytes'] / comp['ascii_bytes']:.1%})")
    en = report["energy"]
    for addr, n in en["nodes"].items():
        print(f"energy    node {addr}: {n['consumed_mah']:.4f} mAh {n['joules']:.2f} J")
    print(f"lifetime  {en['network_lifetime_ms']} ms (first node death, capped at run length)")
    return 0


def cmd_lifetime(args) -> int:
    sc = _load(args.scenario)
    horizon = math.inf if args.unbounded else None
    for duty in (DutyCycle("always_on"), DutyCycle("duty_cycled", args.awake, args.period)):
        ms = lifetime(sc, duty, sc.energy, horizon=horizon)
        print(f"{duty.mode:12s} {ms:,.0f} ms ({ms / 3_600_000:.2f} h)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homewsn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write report + records")
    s.add_argument("--scenario", help="scenario JSON (default: bundled four-room home)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--remote", action="store_true", help=f"store through {STORE_URL_ENV}")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("export", help="export one room/field series as CSV or JSON")
    e.add_argument("--store", help=f"LocalStore directory (or set {STORE_URL_ENV})")
    e.add_argument("--room", required=True)
    e.add_argument("--field", required=True)
    e.add_argument("--from", dest="from_ts", type=int, default=0)
    e.add_argument("--to", dest="to_ts", type=int, default=2**62)
    e.add_argument("--format", choices=("csv", "json"), default="csv")
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_export)

    v = sub.add_parser("serve", help="read-only HTTP query endpoint")
    v.add_argument("--store", help=f"LocalStore directory (or set {STORE_URL_ENV})")
    v.add_argument("--bind", default="127.0.0.1:8080")
    v.set_defaults(func=cmd_serve)

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("--run", required=True)
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)

    lt = sub.add_parser("lifetime", help="first-node-death lifetime, always-on vs duty-cycled")
    lt.add_argument("--scenario")
    lt.add_argument("--awake", type=int, default=100)
    lt.add_argument("--period", type=int, default=1000)
    lt.add_argument("--unbounded", action="store_true", help="do not cap at the scenario duration")
    lt.set_defaults(func=cmd_lifetime)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (scenario_mod.ScenarioError, StoreError, UnknownRoom, UnknownField, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
