"""Event count and smallest gap per time window, for one preset.

Shows how the inter-event gap shrinks with |r| once forgetting removes the
data that covers the orbit.

    python scripts/event_rate.py s2-forget-all --t-sim 8 --window 1
"""

import argparse

import numpy as np

from gpfelin import cli
from gpfelin.simulator import SimulationAborted, run_closed_loop


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("preset")
    p.add_argument("--t-sim", type=float, default=8.0)
    p.add_argument("--window", type=float, default=1.0)
    p.add_argument("--max-events", type=int, default=20000)
    args = p.parse_args(argv)

    cfg = cli.parse_config(args.preset, {"t_sim": args.t_sim, "max_events": args.max_events})
    try:
        tr = run_closed_loop(cfg)
    except SimulationAborted as exc:
        tr = exc.trace
        print(f"# {exc}")
    ev = np.asarray(tr.events.times)
    print(f"{'window':>13s} {'events':>7s} {'min gap':>10s} {'max |r|':>10s} {'max |e|':>10s}")
    for a in np.arange(0.0, tr.t[-1] + 1e-12, args.window):
        b = a + args.window
        sel = ev[(ev >= a) & (ev < b)]
        rows = (tr.t >= a) & (tr.t < b)
        if not rows.any():
            break
        gap = f"{np.diff(sel).min():.2e}" if sel.size > 1 else "-"
        print(f"[{a:5.1f},{b:5.1f}) {sel.size:7d} {gap:>10s} {np.abs(tr.r[rows]).max():10.2e} "
              f"{tr.e_norm[rows].max():10.2e}")


if __name__ == "__main__":
    main()
