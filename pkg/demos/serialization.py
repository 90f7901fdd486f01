"""Ring exchange round time: blocking rendezvous chains vs non-blocking.

Logical-clock timing with every send in rendezvous mode, so the numbers
are deterministic. The blocking round time grows with the ring length
while the non-blocking one stays flat.
"""
import argparse

from sipflow import comm as cm
from sipflow import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ranks", default="2,4,8")
    ap.add_argument("--eager-threshold", type=int, default=0)
    args = ap.parse_args()

    net = cm.NetConfig(timing="logical", eager_threshold=args.eager_threshold)
    print(f"{'P':>3} {'blocking [us]':>14} {'nonblocking [us]':>17}")
    for p in (int(x) for x in args.ranks.split(",")):
        b = harness.ring_round_time(p, "blocking", net)
        nb = harness.ring_round_time(p, "nonblocking", net)
        print(f"{p:3d} {1e6 * b:14.2f} {1e6 * nb:17.2f}")


if __name__ == "__main__":
    main()
