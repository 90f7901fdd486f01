"""Command-line front end: ``sipflow solve|scale|verify|tables``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import comm as cm
from . import harness, mesh, perf, sip
from . import solver as sv

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class RunConfig:
    case: str = "taylor-green"
    nx: int | None = None
    ny: int | None = None
    nz: int | None = None
    blocks: str = "1x1x1"
    ranks: int | None = None
    exchange: str = "blocking"
    precision: str = "double"
    alpha: float = 0.92
    dt: float | None = None
    t_end: float | None = None
    steps: int | None = None
    mass_threshold: float = 1e-10
    timing: str = "wall"
    latency: float = 2e-6
    bandwidth: float = 5e9
    eager_threshold: int = 8192
    seed: int = 0
    out: str = "run"
    threshold: float = perf.DEFAULT_THRESHOLD
    rank_list: str = "1,2,4,8"
    strategies: str = "blocking,nonblocking"
    fixed_outer: int | None = None

    @classmethod
    def fields(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, data):
        unknown = sorted(set(data) - set(cls.fields()))
        if unknown:
            raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
        return cls(**data)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    # -- validation -----------------------------------------------------------
    def block_counts(self):
        try:
            return mesh.parse_blocks(self.blocks)
        except ValueError as exc:
            raise ConfigError(f"blocks: {exc}") from None

    def validate(self):
        """Check the configuration and build the case; raises :class:`ConfigError`."""
        if self.case not in sv.CASES:
            raise ConfigError(f"case: unknown case {self.case!r}; choose from {', '.join(sv.CASES)}")
        if self.exchange not in cm.ExchangeContext.STRATEGIES:
            raise ConfigError(f"exchange: must be blocking or nonblocking, got {self.exchange!r}")
        if self.precision not in mesh.PRECISIONS:
            raise ConfigError(f"precision: must be single or double, got {self.precision!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha: must lie in [0, 1), got {self.alpha}")
        for name in ("nx", "ny", "nz", "steps"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name}: must be >= 1, got {value}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold: efficiency threshold must lie in [0, 1], got {self.threshold}")
        try:
            net = self.net(1)
        except ValueError as exc:
            raise ConfigError(f"network: {exc}") from None
        try:
            setup = sv.CaseSetup.build(
                self.case, self.nx, self.ny, self.nz, blocks=self.block_counts(),
                alpha=self.alpha, dt=self.dt, t_end=self.t_end, max_steps=self.steps,
                mass_threshold=self.mass_threshold, fixed_outer=self.fixed_outer)
            dec = setup.decomposition()
            setup.validate()
        except ConfigError:
            raise
        except mesh.DecompositionError as exc:
            raise ConfigError(f"blocks: {exc}") from None
        except ValueError as exc:
            msg = str(exc)
            raise ConfigError(msg if ":" in msg.split(" ")[0] else f"case: {msg}") from None
        ranks = dec.nblocks if self.ranks is None else self.ranks
        if ranks != dec.nblocks:
            raise ConfigError(f"ranks: {ranks} ranks for {dec.nblocks} blocks; "
                              "the solver runs one block per rank")
        return setup, dataclasses.replace(net, nranks=ranks)

    def net(self, nranks):
        return cm.NetConfig(nranks=nranks, eager_threshold=self.eager_threshold,
                            timing=self.timing, latency=self.latency, bandwidth=self.bandwidth)

    def rank_counts(self):
        try:
            counts = [int(x) for x in self.rank_list.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"rank_list: expected comma-separated integers, got {self.rank_list!r}") from None
        if not counts or min(counts) < 1:
            raise ConfigError(f"rank_list: rank counts must be >= 1, got {self.rank_list!r}")
        return counts

    def strategy_list(self):
        names = [s.strip() for s in self.strategies.split(",") if s.strip()]
        bad = [s for s in names if s not in cm.ExchangeContext.STRATEGIES]
        if not names or bad:
            raise ConfigError(f"strategies: unknown strategy {', '.join(bad) or '(none)'}")
        return names


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _run_options(p):
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="JSON file with flat keys named like the flags")
    g.add_argument("--case", choices=sv.CASES)
    g.add_argument("--nx", type=int)
    g.add_argument("--ny", type=int)
    g.add_argument("--nz", type=int)
    g.add_argument("--blocks", help="block layout PxQxR")
    g.add_argument("--ranks", type=int, help="virtual ranks (must equal the block count)")
    g.add_argument("--exchange", choices=cm.ExchangeContext.STRATEGIES)
    g.add_argument("--precision", choices=tuple(mesh.PRECISIONS))
    g.add_argument("--alpha", type=float, help="SIP cancellation parameter")
    g.add_argument("--dt", type=float)
    g.add_argument("--t-end", dest="t_end", type=float)
    g.add_argument("--steps", type=int, help="stop after this many time steps")
    g.add_argument("--mass-threshold", dest="mass_threshold", type=float)
    g.add_argument("--fixed-outer", dest="fixed_outer", type=int,
                   help="benchmark mode: exactly this many pressure corrections per stage")
    g.add_argument("--timing", choices=("wall", "logical"))
    g.add_argument("--latency", type=float, help="seconds per message (logical timing)")
    g.add_argument("--bandwidth", type=float, help="bytes per second (logical timing)")
    g.add_argument("--eager-threshold", dest="eager_threshold", type=int,
                   help="largest send in bytes that completes without a posted receive")
    g.add_argument("--seed", type=int, help="recorded in the config echo; the cases are deterministic")
    g.add_argument("--out", help="output directory")
    g.add_argument("--threshold", type=float, help="minimum acceptable parallel efficiency")


def build_parser():
    parser = argparse.ArgumentParser(prog="sipflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run one case and write diagnostics, profile and events")
    _run_options(p)

    p = sub.add_parser("scale", help="strong-scaling sweep over rank counts")
    _run_options(p)
    p.add_argument("--rank-list", dest="rank_list", help="comma-separated rank counts, e.g. 1,2,4,8")
    p.add_argument("--strategies", help="comma-separated exchange strategies")

    p = sub.add_parser("verify", help="equivalence and analytic-case checks")
    p.add_argument("--out", help="directory for verify.txt")

    p = sub.add_parser("tables", help="generate or inspect a transfer-table file")
    tsub = p.add_subparsers(dest="action", required=True)
    g = tsub.add_parser("generate")
    g.add_argument("--nx", type=int, required=True)
    g.add_argument("--ny", type=int, required=True)
    g.add_argument("--nz", type=int, required=True)
    g.add_argument("--blocks", required=True)
    g.add_argument("--ranks", type=int)
    g.add_argument("--walls", default="", help="axes with walls instead of periodic faces, e.g. y or xz")
    g.add_argument("--out", required=True, help="table file to write")
    i = tsub.add_parser("inspect")
    i.add_argument("path")
    i.add_argument("--quiet", action="store_true", help="only print the summary")
    return parser


def load_config(args, defaults=None):
    """Defaults, then the JSON file, then explicitly given flags."""
    data = dataclasses.asdict(defaults or RunConfig())
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config: top level must be an object")
        unknown = sorted(set(loaded) - set(RunConfig.fields()))
        if unknown:
            raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
        data.update(loaded)
    for name in RunConfig.fields():
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    return RunConfig.from_mapping(data)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _outdir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve(cfg: RunConfig):
    setup, net = cfg.validate()
    out = _outdir(cfg)
    (out / "config.json").write_text(cfg.to_json())
    t0 = time.perf_counter()
    res = sv.run_case(setup, cfg.exchange, cfg.precision, net)
    elapsed = time.perf_counter() - t0
    (out / "diagnostics.csv").write_text(res.diagnostics_csv())
    entries = res.profile
    (out / "profile.csv").write_text(perf.profile_csv(entries))
    (out / "events.csv").write_text(res.events_csv())
    print(f"{setup.case}: {setup.grid.shape} cells, {net.nranks} rank(s), {cfg.exchange} exchange, "
          f"{cfg.precision} relaxation")
    if res.rows and setup.case != "manufactured-poisson":
        last = res.rows[-1]
        print(f"steps {last[0]}, t = {last[1]:.6g}, kinetic energy {last[2]:.9e}, "
              f"divergence L1 {last[3]:.3e}")
    if setup.case == "manufactured-poisson":
        print(f"sweeps {res.extra['iterations']}, reduction {res.extra['reduction']:.3e}, "
              f"L-inf error {res.extra['error_linf']:.4e}")
    print(f"factorizations per rank: {res.factorizations}")
    print(perf.format_profile(entries[:8]))
    print(f"wall time {elapsed:.2f} s; artifacts in {out}")
    return EXIT_OK


def cmd_scale(cfg: RunConfig):
    setup, _ = cfg.validate()
    ranks = cfg.rank_counts()
    for p in ranks:
        if setup.grid.nx % p:
            raise ConfigError(f"rank_list: {p} x-slabs do not divide nx={setup.grid.nx}")
    if cfg.fixed_outer is None and setup.case == "taylor-green":
        setup = dataclasses.replace(setup, fixed_outer=2)
    if cfg.steps is None:
        setup = dataclasses.replace(setup, max_steps=4)
    out = _outdir(cfg)
    (out / "config.json").write_text(cfg.to_json())
    study = harness.strong_scaling(setup, ranks, cfg.strategy_list(), cfg.net(1), cfg.threshold,
                                   cfg.precision)
    (out / "scaling.csv").write_text(study.csv())
    summary = study.summary()
    (out / "scaling.txt").write_text(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_tables(args):
    if args.action == "generate":
        axes = set(args.walls.lower())
        if not axes <= set(mesh.AXES):
            raise ConfigError(f"walls: unknown axis in {args.walls!r}")
        bc = tuple(("wall", "wall") if a in axes else ("periodic", "periodic") for a in mesh.AXES)
        try:
            grid = mesh.GridSpec(args.nx, args.ny, args.nz, bc=bc)
            counts = mesh.parse_blocks(args.blocks)
            dec = mesh.decompose(grid, *counts, nranks=args.ranks)
        except ValueError as exc:
            raise ConfigError(f"blocks: {exc}" if "axis" in str(exc) else str(exc)) from None
        tables = mesh.build_transfer_tables(dec)
        mesh.write_tables(tables, args.out)
        n = sum(len(t) for t in tables.values())
        print(f"wrote {args.out}: {dec.nranks} rank(s), {dec.nblocks} block(s), {n} entries")
        return EXIT_OK
    try:
        tables = mesh.read_tables(args.path)
    except mesh.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for rank in sorted(tables):
        t = tables[rank]
        counts = ", ".join(f"{name}={t.count(direction=d)}"
                           for d, name in enumerate(mesh.DIRECTION_NAMES))
        print(f"rank {rank}: {len(t)} entries ({counts})")
        if not args.quiet:
            for e in t.entries:
                print("  " + e.describe())
    problems = mesh.check_pairing(tables)
    for p in problems:
        print(f"error: {p}", file=sys.stderr)
    print("send/recv pairing: " + ("ok" if not problems else f"{len(problems)} problem(s)"))
    return EXIT_OK if not problems else EXIT_FAIL


# -- verify -----------------------------------------------------------------

def _fields_diff(a, b, names="uvwp"):
    return max(float(np.max(np.abs(a.fields[n] - b.fields[n]))) for n in names)


def _check_strategies():
    st = sv.CaseSetup.taylor_green(16, blocks=(2, 2, 1), t_end=0.5, mass_threshold=1e-12)
    a = sv.run_case(st, "blocking", record_events=False)
    b = sv.run_case(st, "nonblocking", record_events=False)
    d = _fields_diff(a, b)
    return d <= 1e-8, f"blocking vs nonblocking, TG 16^2 on 4 ranks: max |diff| {d:.2e} (<= 1e-8)"


def _check_decomposition():
    one = sv.run_case(sv.CaseSetup.taylor_green(16, t_end=0.5, mass_threshold=1e-12),
                      record_events=False)
    four = sv.run_case(sv.CaseSetup.taylor_green(16, blocks=(2, 2, 1), t_end=0.5,
                                                 mass_threshold=1e-12), record_events=False)
    d = _fields_diff(one, four)
    return d <= 1e-10, f"1 rank vs 4 ranks, TG 16^2: max |diff| {d:.2e} (<= 1e-10)"


def _check_precision():
    st = sv.CaseSetup.manufactured_poisson(16)
    dbl = sv.run_case(st, precision="double", record_events=False)
    sgl = sv.run_case(st, precision="single", record_events=False)
    p1, p2 = dbl.fields["p"], sgl.fields["p"]
    p1, p2 = p1 - p1.mean(), p2 - p2.mean()
    rel = float(np.max(np.abs(p1 - p2)) / np.max(np.abs(p1)))
    return rel <= 1e-4, f"single vs double relaxation, Poisson 16^3: relative diff {rel:.2e} (<= 1e-4)"


def _corner_probe(rank, dec, tables):
    ctx = cm.ExchangeContext(rank, dec, tables[rank.rank], "nonblocking")
    block = dec.blocks_of_rank(rank.rank)[0]
    f = mesh.Field(block.shape, block=block.id, name="probe")
    lags = set()
    for _ in range(2):
        ctx.exchange(f)
        for e in tables[rank.rank].entries:
            if e.direction == mesh.RECV:
                lags.add((e.kind, f.rounds - f.generation(e.offset)))
    return lags


def _check_corners():
    dec = mesh.decompose(mesh.GridSpec(8, 8, 4), 2, 2, 1)
    tables = mesh.build_transfer_tables(dec)
    lags = set().union(*cm.run_ranks(cm.NetConfig(nranks=4), _corner_probe, dec, tables))
    ok = all((lag == 0) if kind == mesh.FACE else (lag == 1) for kind, lag in lags)
    corner = sorted(lag for kind, lag in lags if kind != mesh.FACE)
    return ok, f"non-blocking ghost generation lag: faces 0, edges/corners {sorted(set(corner))} (== [1])"


def _check_taylor_green():
    st = sv.CaseSetup.taylor_green(32)
    res = sv.run_case(st, record_events=False)
    e0 = res.kinetic_energy[0]
    rel = float(np.max(np.abs(res.kinetic_energy / (e0 * np.exp(-4 * st.nu * res.times)) - 1)))
    div = max(r[3] for r in res.rows)
    ok = rel <= 0.05 and div <= st.mass_threshold
    return ok, (f"Taylor-Green 32^2, one period: energy deviation {100 * rel:.3f}% (<= 5%), "
                f"max divergence {div:.2e}")


def _check_channel():
    st = sv.CaseSetup.channel_laminar(32)
    res = sv.run_case(st, record_events=False)
    u = res.fields["u"].mean(axis=(0, 2))
    exact = sv.poiseuille_profile(st)
    rel = float(np.max(np.abs(u - exact)) / exact.max())
    return rel < 0.02, f"laminar channel 32 cells: profile deviation {100 * rel:.3f}% (< 2%)"


def _check_manufactured():
    errs = []
    for n in (16, 32):
        res = sv.run_case(sv.CaseSetup.manufactured_poisson(n), record_events=False)
        errs.append(res.extra["error_linf"])
    order = math.log2(errs[0] / errs[1])
    return order >= 1.9, f"manufactured Poisson 16^3/32^3: observed order {order:.3f} (>= 1.9)"


VERIFY_CHECKS = (
    ("strategies", _check_strategies),
    ("decomposition", _check_decomposition),
    ("precision", _check_precision),
    ("corner-lag", _check_corners),
    ("manufactured", _check_manufactured),
    ("channel", _check_channel),
    ("taylor-green", _check_taylor_green),
)


def cmd_verify(args):
    lines, failed = [], 0
    for name, check in VERIFY_CHECKS:
        t0 = time.perf_counter()
        try:
            ok, msg = check()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            ok, msg = False, f"{type(exc).__name__}: {exc}"
        line = f"{'PASS' if ok else 'FAIL'}  {name:14s} {msg}  [{time.perf_counter() - t0:.1f} s]"
        print(line, flush=True)
        lines.append(line)
        failed += not ok
    summary = f"{len(VERIFY_CHECKS) - failed}/{len(VERIFY_CHECKS)} checks passed"
    print(summary)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.txt").write_text("\n".join(lines + [summary]) + "\n")
    return EXIT_OK if not failed else EXIT_FAIL


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "tables":
            return cmd_tables(args)
        if args.command == "verify":
            return cmd_verify(args)
        cfg = load_config(args)
        return cmd_solve(cfg) if args.command == "solve" else cmd_scale(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (sv.SolverError, cm.CommError, sip.SipError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
