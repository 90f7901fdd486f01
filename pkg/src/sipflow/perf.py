"""Timers, per-routine profiles and parallel-efficiency analysis.

Two clocks are supported. :class:`WallClock` measures real elapsed time.
:class:`LogicalClock` is advanced explicitly: compute regions charge a
modelled cost per cell and message transfers charge latency plus
bytes / bandwidth, which makes scaling studies deterministic.
"""
from __future__ import annotations

import io
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Mapping, Sequence

DEFAULT_THRESHOLD = 0.5

#: modelled seconds per cell for each profiled region (logical clock only)
DEFAULT_COSTS = {
    "sip_resforward": 8e-9,
    "sip_backward": 5e-9,
    "sip_residual": 5e-9,
    "sip_factor": 12e-9,
    "fluxes": 20e-9,
    "rk_update": 3e-9,
    "mass_defect": 3e-9,
    "pressure_update": 4e-9,
    "kinetic_energy": 1e-9,
}
FALLBACK_COST = 2e-9


class WallClock:
    logical = False

    def __init__(self, epoch=None):
        self.epoch = time.perf_counter() if epoch is None else epoch

    def now(self):
        return time.perf_counter() - self.epoch

    def advance(self, seconds):
        pass

    def wait_until(self, t):
        pass


class LogicalClock:
    logical = True

    def __init__(self, t=0.0):
        self.t = float(t)

    def now(self):
        return self.t

    def advance(self, seconds):
        if seconds < 0:
            raise ValueError("logical time cannot run backwards")
        self.t += seconds

    def wait_until(self, t):
        if t > self.t:
            self.t = t


class Profiler:
    """Self-time and call counts per named region on one rank.

    Regions nest; a region's self time excludes time spent in nested regions.
    On a logical clock, leaving a region charges ``cells * cost[name] * weight``.
    """

    def __init__(self, clock=None, costs=None):
        self.clock = clock if clock is not None else WallClock()
        self.costs = dict(DEFAULT_COSTS if costs is None else costs)
        self.stats = {}
        self._stack = []

    @contextmanager
    def region(self, name, cells=0, weight=1.0):
        start = self.clock.now()
        self._stack.append(0.0)
        try:
            yield self
        finally:
            children = self._stack.pop()
            if self.clock.logical and cells:
                self.clock.advance(cells * self.costs.get(name, FALLBACK_COST) * weight)
            inclusive = self.clock.now() - start
            entry = self.stats.setdefault(name, [0.0, 0])
            entry[0] += max(inclusive - children, 0.0)
            entry[1] += 1
            if self._stack:
                self._stack[-1] += inclusive

    def timers(self):
        return {k: (v[0], v[1]) for k, v in self.stats.items()}

    def reset(self):
        self.stats.clear()


class NullProfiler:
    clock = None

    @contextmanager
    def region(self, name, cells=0, weight=1.0):
        yield self

    def timers(self):
        return {}


@dataclass(frozen=True)
class ProfileEntry:
    name: str
    self_s: float
    calls: int
    pct: float


def merge_timers(per_rank: Sequence[Mapping]):
    """Max of self time and sum of call counts over ranks."""
    merged = {}
    for timers in per_rank:
        for name, (secs, calls) in timers.items():
            s, c = merged.get(name, (0.0, 0))
            merged[name] = (max(s, secs), c + calls)
    return merged


def profile_report(timers, total=None, top=None):
    """Flat profile sorted by self time, descending.

    ``timers`` maps region name to ``(self seconds, calls)``; a sequence of
    such mappings (one per rank) is merged first. Shares are relative to
    ``total`` or, by default, to the summed self time.
    """
    if not isinstance(timers, Mapping):
        timers = merge_timers(timers)
    rows = [(name, float(s), int(c)) for name, (s, c) in timers.items() if c >= 1]
    if not rows:
        raise ValueError("profile needs at least one timed region")
    if total is None:
        total = sum(r[1] for r in rows)
    rows.sort(key=lambda r: (-r[1], r[0]))
    if top is not None:
        rows = rows[:top]
    return [ProfileEntry(n, s, c, 100.0 * s / total if total > 0 else 0.0) for n, s, c in rows]


def format_profile(entries):
    lines = [f"{'time %':>8s} {'self [s]':>12s} {'calls':>8s}  name"]
    for e in entries:
        lines.append(f"{e.pct:8.2f} {e.self_s:12.6f} {e.calls:8d}  {e.name}")
    return "\n".join(lines)


def profile_csv(entries):
    out = io.StringIO()
    out.write("name,self_s,calls,pct\n")
    for e in entries:
        out.write(f"{e.name},{e.self_s:.9g},{e.calls},{e.pct:.6f}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Parallel efficiency
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingRecord:
    """Averaged seconds per time step ``tp`` on ``n`` ranks."""

    n: int
    tp: float
    label: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"rank count must be >= 1, got {self.n}")
        if not self.tp > 0:
            raise ValueError(f"time per step must be positive, got {self.tp}")


@dataclass
class EfficiencyReport:
    baseline: str
    records: list
    eps: list
    threshold: float = DEFAULT_THRESHOLD
    label: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def max_n_meeting(self):
        ok = [r.n for r, e in zip(self.records, self.eps) if e >= self.threshold]
        return max(ok) if ok else None

    def rows(self):
        return [(r.label or self.label, r.n, r.tp, 1.0 / r.tp, e)
                for r, e in zip(self.records, self.eps)]


def efficiency(records, t_s, threshold=DEFAULT_THRESHOLD, label=""):
    """Efficiency against a single-rank baseline: ``t_s / (N * T_p(N))``."""
    records = sorted(records, key=lambda r: r.n)
    if not records:
        raise ValueError("no scaling records")
    if not t_s > 0:
        raise ValueError(f"baseline time must be positive, got {t_s}")
    eps = [t_s / (r.n * r.tp) for r in records]
    return EfficiencyReport("single", records, eps, threshold, label or records[0].label,
                            {"t_s": t_s})


def efficiency_based(records, m, t_pm, threshold=DEFAULT_THRESHOLD, label=""):
    """Efficiency against an ``m``-rank baseline.

    A record on ``k`` ranks corresponds to ``N = k / m`` and gets
    ``T_p(m) / (N * T_p(k))``.
    """
    records = sorted(records, key=lambda r: r.n)
    if not records:
        raise ValueError("no scaling records")
    if m < 1:
        raise ValueError(f"baseline rank count must be >= 1, got {m}")
    if not t_pm > 0:
        raise ValueError(f"baseline time must be positive, got {t_pm}")
    eps = []
    for r in records:
        if r.n % m:
            raise ValueError(f"record with {r.n} ranks is not a multiple of the baseline {m}")
        eps.append(t_pm / ((r.n // m) * r.tp))
    return EfficiencyReport(f"M={m}", records, eps, threshold, label or records[0].label,
                            {"m": m, "t_pm": t_pm})


@dataclass(frozen=True)
class IsoEfficiency:
    speedup: float | None
    n_a: float | None
    n_b: float | None
    perf_a: float | None
    perf_b: float | None
    status: str


def threshold_point(report, threshold=None):
    """Largest (interpolated) N where efficiency is still >= threshold.

    Returns ``(N, 1/T_p at N, status)``; N is None when the curve is below the
    threshold everywhere.
    """
    thr = report.threshold if threshold is None else threshold
    pts = sorted(zip(report.records, report.eps), key=lambda p: p[0].n)
    idx = [i for i, (_, e) in enumerate(pts) if e >= thr]
    if not idx:
        return None, None, "below threshold at all N"
    i = idx[-1]
    r0, e0 = pts[i]
    if i == len(pts) - 1:
        return float(r0.n), 1.0 / r0.tp, "threshold not crossed in sampled range"
    r1, e1 = pts[i + 1]
    w = (e0 - thr) / (e0 - e1) if e0 != e1 else 0.0
    n = r0.n + w * (r1.n - r0.n)
    perf = 1.0 / r0.tp + w * (1.0 / r1.tp - 1.0 / r0.tp)
    return n, perf, "crossed"


def iso_efficiency_compare(curve_a, curve_b, threshold=DEFAULT_THRESHOLD):
    """Speedup of ``curve_b`` over ``curve_a`` at the efficiency threshold.

    Each curve is evaluated at its largest rank count that still meets the
    threshold; the result is the ratio of the inverse step times there.
    """
    na, pa, sa = threshold_point(curve_a, threshold)
    nb, pb, sb = threshold_point(curve_b, threshold)
    if na is None or nb is None:
        which = "A" if na is None else "B"
        return IsoEfficiency(None, na, nb, pa, pb, f"curve {which}: below threshold at all N")
    status = "ok" if sa == sb == "crossed" else f"A: {sa}; B: {sb}"
    return IsoEfficiency(pb / pa, na, nb, pa, pb, status)


def scaling_csv(reports):
    out = io.StringIO()
    out.write("label,N,Tp,inv_Tp,eps\n")
    for rep in reports:
        for label, n, tp, inv, e in rep.rows():
            out.write(f"{label},{n},{tp:.9g},{inv:.9g},{e:.9g}\n")
    return out.getvalue()


def mean_step_time(step_times, skip_first=True):
    """Average seconds per step; the first step is treated as warm-up."""
    times = list(step_times)
    if skip_first and len(times) > 1:
        times = times[1:]
    if not times:
        raise ValueError("no step times")
    return math.fsum(times) / len(times)
