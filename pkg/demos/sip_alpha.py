"""SIP convergence on a Neumann Poisson box for several cancellation parameters."""
import argparse

import numpy as np

from sipflow import mesh, sip


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--alphas", default="0,0.5,0.8,0.92")
    ap.add_argument("--reduction", type=float, default=1e-8)
    args = ap.parse_args()

    grid = mesh.GridSpec(args.n, args.n, args.n, bc=(("wall", "wall"),) * 3)
    su = np.random.default_rng(0).normal(size=grid.shape)
    print(f"{'alpha':>6} {'precision':>9} {'sweeps':>7} {'reduction':>10}")
    for alpha in (float(a) for a in args.alphas.split(",")):
        for precision in ("double", "single"):
            A = sip.assemble_poisson(grid=grid, pin=None)
            A.set_source(su - su.mean())
            cfg = sip.SipConfig(alpha=alpha, precision=precision, max_iters=5000,
                                reduction=args.reduction)
            _, rep = sip.solve(A, mesh.Field(grid.shape), cfg)
            print(f"{alpha:6.2f} {precision:>9} {rep.iterations:7d} {rep.reduction:10.2e}")


if __name__ == "__main__":
    main()
