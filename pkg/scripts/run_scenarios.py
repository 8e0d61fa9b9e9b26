"""Run presets and print a one-line summary per run.

    python scripts/run_scenarios.py                 # every preset
    python scripts/run_scenarios.py s1 s2 --out runs
"""

import argparse
import sys
from pathlib import Path

from gpfelin import cli
from gpfelin.simulator import SimulationAborted, run_closed_loop


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("presets", nargs="*", default=list(cli.PRESETS))
    p.add_argument("--out", default="runs")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    status = 0
    for name in args.presets:
        doc = cli.resolve({"preset": name, "seed": args.seed})
        cfg = cli.build_config(doc)
        try:
            trace = run_closed_loop(cfg)
        except SimulationAborted as exc:
            trace, status = exc.trace, cli.EXIT_NUMERIC
        m = cli.write_outputs(trace, cfg, doc, Path(args.out) / name)
        gap = "-" if m.min_gap is None else f"{m.min_gap:.3g}"
        print(f"{name:14s} events={m.events:5d} stored={m.final_size:4d} peak={m.max_size:4d} "
              f"min_gap={gap:>9s} final|e|={m.final_e_norm:.2e} wall={m.wall_clock:6.1f}s {m.status}")
    return status


if __name__ == "__main__":
    sys.exit(main())
