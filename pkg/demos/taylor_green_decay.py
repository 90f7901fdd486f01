"""Taylor-Green vortex decay against the analytic energy curve.

    python3 demos/taylor_green_decay.py --n 32 --blocks 2x2x1 --exchange nonblocking
"""
import argparse

import numpy as np

from sipflow import mesh
from sipflow.solver import CaseSetup, run_case


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--blocks", default="1x1x1")
    ap.add_argument("--exchange", choices=("blocking", "nonblocking"), default="blocking")
    ap.add_argument("--precision", choices=("double", "single"), default="double")
    ap.add_argument("--t-end", type=float, default=2 * np.pi)
    args = ap.parse_args()

    setup = CaseSetup.taylor_green(args.n, t_end=args.t_end, blocks=mesh.parse_blocks(args.blocks))
    res = run_case(setup, args.exchange, args.precision, record_events=False)
    ke, t = res.kinetic_energy, res.times
    exact = ke[0] * np.exp(-4 * setup.nu * t)
    every = max(1, len(t) // 10)
    print(f"{'t':>8} {'E':>14} {'E exact':>14} {'rel err':>10} {'divergence':>11}")
    for row, e in list(zip(res.rows, exact))[::every]:
        print(f"{row[1]:8.3f} {row[2]:14.8e} {e:14.8e} {row[2] / e - 1:10.2e} {row[3]:11.2e}")
    print(f"max relative energy error {np.abs(ke / exact - 1).max():.3e}, "
          f"factorizations per rank {res.factorizations}")


if __name__ == "__main__":
    main()
