"""Strong-scaling study of both exchange strategies with an iso-efficiency comparison.

    python3 demos/strong_scaling.py --n 64 --ranks 1,2,4,8
"""
import argparse

from sipflow import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--steps", type=int, default=4)
    ap.add_argument("--ranks", default="1,2,4,8")
    ap.add_argument("--threshold", type=float, default=0.5)
    args = ap.parse_args()

    setup = harness.benchmark_setup(n=args.n, steps=args.steps)
    ranks = [int(x) for x in args.ranks.split(",")]
    study = harness.strong_scaling(setup, ranks=ranks, threshold=args.threshold)
    print(study.summary())


if __name__ == "__main__":
    main()
