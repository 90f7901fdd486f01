"""Acceptance criteria, one test per criterion.

Every test prints a single ``criterion N PASS|FAIL: ...`` line with the
measured quantities, then asserts the same condition.
"""
import hashlib
import itertools
import math
import time

import numpy as np
import pytest

from oracles import compensation, dense_factors, dense_matrix, random_symmetric, stencil_mask
from sipflow import cli, harness, mesh, perf, sip
from sipflow import comm as cm
from sipflow.perf import ScalingRecord
from sipflow.solver import CaseSetup, run_case


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


def fields_diff(a, b, names="uvwp"):
    return max(float(np.max(np.abs(a.fields[n] - b.fields[n]))) for n in names)


# --- 1: factor oracle -------------------------------------------------------

ALPHAS = (0.0, 0.5, 0.92)


def random_systems(seed, count=4):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        yield random_symmetric(rng, tuple(int(s) for s in rng.integers(3, 6, size=3)))


@pytest.mark.xfail(strict=True, reason="with alpha > 0 the product L U carries the compensation "
                                       "terms on the stencil positions; only alpha = 0 matches A")
def test_criterion_01_factor_oracle(capsys):
    t0 = time.perf_counter()
    worst = {}
    for alpha in ALPHAS:
        dev = 0.0
        for A in random_systems(11):
            L, U = dense_factors(sip.sip_factor(A, sip.SipConfig(alpha=alpha)))
            mask = stencil_mask(A.shape)
            dev = max(dev, float(np.abs((L @ U - dense_matrix(A))[mask]).max()))
        worst[alpha] = dev
    elapsed = time.perf_counter() - t0
    ok = all(d < 1e-12 for d in worst.values()) and elapsed < 1.0
    text = ", ".join(f"alpha={a}: {d:.1e}" for a, d in worst.items())
    report(capsys, 1, ok, f"max |LU - A| on stencil positions {text} (< 1e-12), {elapsed:.2f} s")
    assert ok


@pytest.mark.parametrize("alpha", ALPHAS)
def test_criterion_01_compensated_product(alpha):
    """What the factors do satisfy for every alpha: L U = A + N."""
    for A in random_systems(11):
        L, U = dense_factors(sip.sip_factor(A, sip.SipConfig(alpha=alpha)))
        LU = L @ U
        N = compensation(LU, A.shape, alpha)
        assert np.abs(LU - dense_matrix(A) - N).max() < 1e-12
        if alpha == 0.0:
            assert np.abs((LU - dense_matrix(A))[stencil_mask(A.shape)]).max() < 1e-12


# --- 2: kernel equivalence --------------------------------------------------

def test_criterion_02_kernel_equivalence(capsys):
    sip.residual_symmetric(random_symmetric(np.random.default_rng(0), (2, 2, 2), edges=True),
                           np.zeros((4, 4, 4)))  # compile outside the timed loop
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(2, 9, size=3))
        A = random_symmetric(rng, shape, edges=True)
        A.su[1:-1, 1:-1, 1:-1] = rng.normal(size=shape)
        fi = rng.normal(size=tuple(s + 2 for s in shape))
        diff = sip.residual_symmetric(A, fi) - sip.residual_general(A, fi)
        worst = max(worst, float(np.abs(diff).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-13 and elapsed < 1.0
    report(capsys, 2, ok, f"100 systems, max |r_sym - r_gen| {worst:.1e} (<= 1e-13), "
                          f"{elapsed:.2f} s")
    assert ok


# --- 3, 5: manufactured Poisson and precision -------------------------------

@pytest.fixture(scope="module")
def manufactured():
    run_case(CaseSetup.manufactured_poisson(4), record_events=False)  # compile kernels
    t0 = time.perf_counter()
    double = {n: run_case(CaseSetup.manufactured_poisson(n), record_events=False)
              for n in (16, 32)}
    elapsed = time.perf_counter() - t0
    single = {n: run_case(CaseSetup.manufactured_poisson(n), precision="single",
                          record_events=False) for n in (16, 32)}
    return double, single, elapsed


def test_criterion_03_manufactured_poisson(capsys, manufactured):
    double, _, elapsed = manufactured
    red = {n: r.extra["reduction"] for n, r in double.items()}
    err = {n: r.extra["error_linf"] for n, r in double.items()}
    order = math.log2(err[16] / err[32])
    ok = all(r <= 1e-8 for r in red.values()) and order >= 1.9 and elapsed < 30.0
    report(capsys, 3, ok, f"reduction 16^3 {red[16]:.1e}, 32^3 {red[32]:.1e} (<= 1e-8), "
                          f"order {order:.3f} (>= 1.9), {elapsed:.1f} s")
    assert ok


def sweep_times(n=64, sweeps=20, repeats=10):
    """Best per-sweep time of the forward and backward kernels on an n^3 box.

    Single and double repeats alternate so that a transient load on the
    machine cannot bias one precision.
    """
    grid = mesh.GridSpec(n, n, n, bc=(("wall", "wall"),) * 3)
    su = np.random.default_rng(0).normal(size=grid.shape)
    cases = {}
    for precision in ("single", "double"):
        A = sip.assemble_poisson(grid=grid, pin=None)
        A.set_source(su - su.mean())
        cfg = sip.SipConfig(precision=precision, max_iters=sweeps, reduction=1e-30)
        cases[precision] = (A, cfg, sip.sip_factor(A, cfg))
    best = {p: math.inf for p in cases}
    for _ in range(repeats):
        for precision, (A, cfg, F) in cases.items():
            prof = perf.Profiler()
            sip.solve(A, mesh.Field(grid.shape), cfg, F, profiler=prof)
            t = prof.timers()
            per_sweep = (t["sip_resforward"][0] + t["sip_backward"][0]) / t["sip_backward"][1]
            best[precision] = min(best[precision], per_sweep)
    return best["single"], best["double"]


def test_criterion_05_precision(capsys, manufactured):
    double, single, _ = manufactured
    rel = {}
    for n in double:
        p1, p2 = double[n].fields["p"], single[n].fields["p"]
        p1, p2 = p1 - p1.mean(), p2 - p2.mean()
        rel[n] = float(np.max(np.abs(p1 - p2)) / np.max(np.abs(p1)))
    sweep_times(n=8, repeats=1)  # compile kernels
    t_single, t_double = sweep_times()
    ok = all(r <= 1e-4 for r in rel.values()) and t_single < t_double
    report(capsys, 5, ok, f"relative diff 16^3 {rel[16]:.1e}, 32^3 {rel[32]:.1e} (<= 1e-4); "
                          f"64^3 sweep {1e3 * t_single:.3f} ms single vs {1e3 * t_double:.3f} ms "
                          f"double, speedup {t_double / t_single:.2f} (> 1)")
    assert ok


# --- 4: work avoidance ------------------------------------------------------

def test_criterion_04_single_factorization(capsys):
    setup = CaseSetup.taylor_green(16, t_end=100.0, max_steps=100)
    res = run_case(setup, record_events=False)
    steps = len(res.rows) - 1
    ok = steps == 100 and res.factorizations == [1]
    report(capsys, 4, ok, f"{steps} steps, factorizations {res.factorizations} (== [1])")
    assert ok


# --- 6: Taylor-Green --------------------------------------------------------

def test_criterion_06_taylor_green(capsys):
    run_case(CaseSetup.taylor_green(8, t_end=0.1), record_events=False)  # compile kernels
    setup = CaseSetup.taylor_green(64)
    t0 = time.perf_counter()
    res = run_case(setup, record_events=False)
    elapsed = time.perf_counter() - t0
    ke = res.kinetic_energy
    rel = float(np.max(np.abs(ke / (ke[0] * np.exp(-4 * setup.nu * res.times)) - 1)))
    div = max(r[3] for r in res.rows)
    ok = (rel <= 0.05 and div <= setup.mass_threshold and elapsed < 120.0
          and res.times[-1] >= 2 * math.pi - 1e-9)
    report(capsys, 6, ok, f"64^2x2 to t={res.times[-1]:.3f}: energy deviation {100 * rel:.3f}% "
                          f"(<= 5%), max divergence {div:.1e} (<= {setup.mass_threshold:.0e}), "
                          f"{elapsed:.1f} s (< 120 s)")
    assert ok


# --- 7, 10: strategies and decompositions -----------------------------------

def recording_exchange(original, log):
    """Wrap ``original`` exchange to log face-ghost digests and ghost lags."""

    def exchange(self, fields):
        original(self, fields)
        groups = self._by_block(fields)
        remote = {e.offset for e in self.table.entries
                  if e.direction == mesh.RECV and e.kind != mesh.FACE}
        local = {e.offset for e in self.table.entries
                 if e.direction == mesh.LOCAL and e.kind != mesh.FACE}
        h = hashlib.sha1()
        lags = set()
        for fs in groups.values():
            for f in fs:
                for d in mesh.FACE_OFFSETS.values():
                    h.update(np.ascontiguousarray(f.data[mesh.ghost_region(f.shape, d)]).tobytes())
                for d in remote:
                    lags.add(("remote", f.rounds - f.generation(d)))
                for d in local - remote:
                    lags.add(("local", f.rounds - f.generation(d)))
        log.setdefault(self.rank.rank, []).append((h.hexdigest(), frozenset(lags)))

    return exchange


@pytest.fixture(scope="module")
def taylor_green_32():
    kw = dict(t_end=0.5, mass_threshold=1e-12)
    out, logs = {}, {}
    original = cm.ExchangeContext.exchange
    with pytest.MonkeyPatch.context() as mp:
        for strategy in ("blocking", "nonblocking"):
            logs[strategy] = {}
            mp.setattr(cm.ExchangeContext, "exchange", recording_exchange(original, logs[strategy]))
            out[strategy] = run_case(CaseSetup.taylor_green(32, blocks=(2, 2, 1), **kw),
                                     strategy, record_events=False)
    out["single"] = run_case(CaseSetup.taylor_green(32, **kw), record_events=False)
    return out, logs


def test_criterion_07_strategy_equivalence(capsys, taylor_green_32):
    runs, logs = taylor_green_32
    d = fields_diff(runs["blocking"], runs["nonblocking"])
    blk, nb = logs["blocking"], logs["nonblocking"]
    calls = sum(len(v) for v in blk.values())
    same_faces = blk.keys() == nb.keys() and all(
        [h for h, _ in blk[r]] == [h for h, _ in nb[r]] for r in blk)
    lag_b = set().union(*(lg for v in blk.values() for _, lg in v))
    lag_nb = set().union(*(lg for v in nb.values() for _, lg in v))
    remote_nb = {lag for kind, lag in lag_nb if kind == "remote"}
    lags_ok = ({lag for _, lag in lag_b} == {0} and remote_nb == {1}
               and {lag for kind, lag in lag_nb if kind == "local"} <= {0})
    ok = d <= 1e-8 and same_faces and lags_ok
    report(capsys, 7, ok, f"TG 32^2 on 2x2x1: max |diff| {d:.1e} (<= 1e-8); face ghosts "
                          f"{'identical' if same_faces else 'differ'} over {calls} exchanges; "
                          f"non-blocking remote edge/corner lag {sorted(remote_nb)} (== [1])")
    assert ok


def test_criterion_10_decomposition_invariance(capsys, taylor_green_32):
    runs, _ = taylor_green_32
    d = fields_diff(runs["single"], runs["blocking"])
    ok = d <= 1e-10
    report(capsys, 10, ok, f"TG 32^2, 1 rank vs 4 ranks: max |diff| {d:.1e} (<= 1e-10)")
    assert ok


# --- 8: serialization -------------------------------------------------------

def test_criterion_08_serialization(capsys):
    net = cm.NetConfig(timing="logical", eager_threshold=0)
    ranks = (2, 4, 8)
    blocking = [harness.ring_round_time(p, "blocking", net) for p in ranks]
    nonblocking = [harness.ring_round_time(p, "nonblocking", net) for p in ranks]
    grows = all(a < b for a, b in zip(blocking, blocking[1:]))
    flat = max(nonblocking) <= 1.2 * nonblocking[0]
    iso = harness.strong_scaling(net=net).iso()
    ok = grows and flat and iso.speedup is not None and iso.speedup > 1.0
    fmt = lambda ts: "/".join(f"{1e6 * t:.1f}" for t in ts)
    report(capsys, 8, ok, f"ring round time [us] at P=2/4/8: blocking {fmt(blocking)}, "
                          f"non-blocking {fmt(nonblocking)} (<= 1.2x P=2); "
                          f"iso-efficiency speedup {iso.speedup} (> 1)")
    assert ok


# --- 9: efficiency algebra --------------------------------------------------

def test_criterion_09_efficiency_algebra(capsys):
    perfect = all(
        perf.efficiency([ScalingRecord(n, t / n) for n in (1, 2, 4, 8, 16)], t).eps == [1.0] * 5
        for t in (1.0, 3.7, 100.0, 1e-3))
    perfect_m = all(
        perf.efficiency_based([ScalingRecord(m * k, t / k) for k in (1, 2, 4)], m, t).eps
        == [1.0] * 3 for m in (1, 2, 4) for t in (1.0, 30.0, 0.37))
    rng = np.random.default_rng(9)
    recs = [ScalingRecord(n, float(t)) for n, t in zip((1, 2, 4, 8), rng.uniform(0.1, 10, 4))]
    same = perf.efficiency_based(recs, 1, 5.0).eps == perf.efficiency(recs, 5.0).eps
    worked = perf.efficiency_based([ScalingRecord(8, 30.0)], 2, 100.0).eps[0]
    ok = perfect and perfect_m and same and abs(worked - 5 / 6) < 1e-12
    report(capsys, 9, ok, f"perfect scaling exact {perfect and perfect_m}, M=1 identity {same}, "
                          f"worked M=2 example {worked!r} (0.8333... to 1e-12)")
    assert ok


# --- 11: table files --------------------------------------------------------

def test_criterion_11_table_files(capsys, tmp_path):
    configs = list(itertools.product((1, 2, 3), repeat=3))
    failures = []
    for (px, py, pz), walls in itertools.product(configs, ("", "xyz")):
        path = tmp_path / f"t{px}{py}{pz}{walls}.bin"
        code = cli.main(["tables", "generate", "--nx", "6", "--ny", "6", "--nz", "6",
                         "--blocks", f"{px}x{py}x{pz}", "--walls", walls, "--out", str(path)])
        capsys.readouterr()
        raw = path.read_bytes()
        exact = code == 0 and mesh.encode_tables(mesh.read_tables(path)) == raw
        code = cli.main(["tables", "inspect", str(path), "--quiet"])
        text = capsys.readouterr().out
        if not exact or code != 0 or "send/recv pairing: ok" not in text:
            failures.append(f"{px}x{py}x{pz}{walls}")
    ok = not failures
    report(capsys, 11, ok, f"{2 * len(configs)} configurations up to 3x3x3 (periodic and walls): "
                           f"round trip byte-exact and pairing ok, failures {failures or 'none'}")
    assert ok
