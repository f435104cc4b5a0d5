"""``coalesce-bench``: run the LBM + visualisation workload coalesced and direct."""

from __future__ import annotations

import argparse
import logging
import sys

from .bench import BenchConfig, render_table, run_bench
from .errors import CoalesceError, ConfigurationError

DEFAULT_IMAGES = (10, 100, 200)


def build_parser() -> argparse.ArgumentParser:
    d = BenchConfig()
    p = argparse.ArgumentParser(
        prog="coalesce-bench",
        description="Compare coalesced and direct communication on a lattice-Boltzmann "
                    "run with in-situ visualisation.",
    )
    p.add_argument("--ranks", type=int, default=d.ranks)
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--images", type=int, nargs="+", default=list(DEFAULT_IMAGES),
                   help="image counts to run (one row pair per value)")
    p.add_argument("--mode", choices=["coalesced", "direct", "both"], default=d.mode)
    p.add_argument("--transport", choices=["inproc", "tcp"], default=d.transport)
    p.add_argument("--alpha-us", type=float, default=d.alpha_us, help="per-message latency")
    p.add_argument("--beta-us-per-byte", type=float, default=d.beta_us_per_byte)
    p.add_argument("--sync-us", type=float, default=d.sync_us, help="cost per wait")
    p.add_argument("--nx", type=int, default=d.nx)
    p.add_argument("--ny", type=int, default=d.ny)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--force", type=float, default=d.force, help="body acceleration along +x")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--trace", help="event trace of rank 0")
    p.add_argument("--image-dir", help="write composited PGM images here")
    p.add_argument("--field-dump", help="write final rho/ux/uy fields here")
    p.add_argument("--monitor-every", type=int, default=d.monitor_every,
                   help="mass monitor period in steps; 0 disables it")
    p.add_argument("--overlap-credit", action="store_true",
                   help="subtract PreWait compute from wait cost")
    p.add_argument("--causal", action="store_true",
                   help="receives also wait for the sender's virtual clock")
    p.add_argument("--timeout", type=float, default=d.timeout_s, help="deadlock timeout in seconds")
    p.add_argument("--wall", action="store_true", help="add a wall_s column to the CSV")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> BenchConfig:
    return BenchConfig(
        ranks=args.ranks, steps=args.steps, images=tuple(args.images), mode=args.mode,
        transport=args.transport, alpha_us=args.alpha_us,
        beta_us_per_byte=args.beta_us_per_byte, sync_us=args.sync_us, nx=args.nx, ny=args.ny,
        tau=args.tau, force=args.force, seed=args.seed, monitor_every=args.monitor_every,
        overlap_credit=args.overlap_credit, causal=args.causal, timeout_s=args.timeout,
        out=args.out, trace=args.trace, image_dir=args.image_dir, field_dump=args.field_dump,
        wall=args.wall,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = config_from_args(args)
    try:
        rows = run_bench(config)
    except ConfigurationError as exc:
        print(f"coalesce-bench: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except CoalesceError as exc:
        print(f"coalesce-bench: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(render_table(rows, config))
    return 0


if __name__ == "__main__":
    sys.exit(main())
