"""Strong-scaling studies on virtual ranks.

A study keeps the global problem fixed and splits it into ``P`` x-slabs, one
per rank, so that the ranks form a ring (periodic in x). With the logical
clock the measured step times are deterministic and the efficiency curves can
be compared exactly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import comm as cm
from . import mesh, perf
from .solver import CaseSetup, run_case

STRATEGIES = cm.ExchangeContext.STRATEGIES


def benchmark_setup(n=64, nz=2, steps=4, fixed_outer=2, **kw):
    """Taylor-Green problem with a fixed amount of pressure work per step."""
    return CaseSetup.taylor_green(n, nz=nz, max_steps=steps, fixed_outer=fixed_outer, **kw)


def slab_setup(setup: CaseSetup, p):
    return dataclasses.replace(setup, blocks=(p, 1, 1))


@dataclass
class ScalingStudy:
    setup: CaseSetup
    net: cm.NetConfig
    reports: dict
    step_times: dict = field(default_factory=dict)
    threshold: float = perf.DEFAULT_THRESHOLD

    def iso(self, a="blocking", b="nonblocking"):
        """Iso-efficiency speedup of strategy ``b`` over ``a``."""
        return perf.iso_efficiency_compare(self.reports[a], self.reports[b], self.threshold)

    def csv(self):
        return perf.scaling_csv([self.reports[s] for s in self.reports])

    def summary(self):
        lines = [f"# strong scaling, {self.setup.grid.shape} cells, timing={self.net.timing}, "
                 f"eager threshold={self.net.eager_threshold} B, first step excluded",
                 f"# efficiency threshold {self.threshold}"]
        for name, rep in self.reports.items():
            for label, n, tp, _, eps in rep.rows():
                mark = "" if eps >= self.threshold else "  < threshold"
                lines.append(f"{label:12s} N={n:3d}  Tp={tp:.6e}  eps={eps:.4f}{mark}")
            lines.append(f"{name:12s} largest N meeting threshold: {rep.max_n_meeting}")
        if {"blocking", "nonblocking"} <= set(self.reports):
            iso = self.iso()
            sp = "n/a" if iso.speedup is None else f"{iso.speedup:.3f}"
            lines.append(f"iso-efficiency speedup nonblocking/blocking: {sp} ({iso.status})")
        return "\n".join(lines)


def strong_scaling(setup: CaseSetup | None = None, ranks=(1, 2, 4, 8), strategies=STRATEGIES,
                   net: cm.NetConfig | None = None, threshold=perf.DEFAULT_THRESHOLD,
                   precision="double"):
    """Time ``setup`` on each rank count and strategy; efficiency against one rank.

    ``T_p`` is the mean step time without the first step. Every strategy
    gets its own single-rank baseline, which is the first entry of ``ranks``
    scaled to one rank when ``ranks`` does not start at 1.
    """
    setup = setup or benchmark_setup()
    net = net or cm.NetConfig(timing="logical", eager_threshold=0)
    ranks = sorted(set(int(p) for p in ranks))
    for p in ranks:
        if p < 1 or setup.grid.nx % p:
            raise ValueError(f"ranks: {p} slabs do not divide nx={setup.grid.nx}")
    reports, times = {}, {}
    for strategy in strategies:
        records = []
        for p in ranks:
            res = run_case(slab_setup(setup, p), strategy, precision,
                           dataclasses.replace(net, nranks=p), record_events=False)
            tp = perf.mean_step_time(res.step_times)
            times[(strategy, p)] = list(res.step_times)
            records.append(perf.ScalingRecord(p, tp, strategy))
        if ranks[0] == 1:
            rep = perf.efficiency(records, records[0].tp, threshold, strategy)
        else:
            rep = perf.efficiency_based(records, ranks[0], records[0].tp, threshold, strategy)
        rep.metadata["warmup"] = "first step excluded"
        reports[strategy] = rep
    return ScalingStudy(setup, net, reports, times, threshold)


def _ring_body(rank, dec, tables, strategy, rounds):
    ctx = cm.ExchangeContext(rank, dec, tables[rank.rank], strategy)
    block = dec.blocks_of_rank(rank.rank)[0]
    f = mesh.Field(block.shape, block=block.id, name="q")
    f.interior[...] = rank.rank
    times = []
    for _ in range(rounds):
        rank.barrier()
        t0 = rank.now()
        ctx.exchange(f)
        times.append(rank.now() - t0)
    return times


def ring_round_time(p, strategy, net: cm.NetConfig | None = None, shape=(64, 64, 2), rounds=3):
    """Mean exchange-round time (max over ranks) for an x-slab ring of ``p`` ranks.

    Rounds start from a barrier, so the number only contains the exchange.
    """
    net = dataclasses.replace(net or cm.NetConfig(timing="logical", eager_threshold=0), nranks=p)
    grid = mesh.GridSpec(*shape)
    dec = mesh.decompose(grid, p, 1, 1)
    tables = mesh.build_transfer_tables(dec)
    per_rank = cm.run_ranks(net, _ring_body, dec, tables, strategy, rounds)
    return float(np.mean(np.max(np.array(per_rank), axis=0)))


__all__ = ["ScalingStudy", "strong_scaling", "benchmark_setup", "slab_setup", "ring_round_time"]
