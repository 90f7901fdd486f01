"""In-process virtual ranks, point-to-point messaging and halo exchange.

Each virtual rank runs in its own thread and talks to the others through a
shared :class:`Fabric`. Messaging follows the usual message-passing contract:

* messages between a fixed (source, destination) pair are matched in the order
  they were sent; a receive matches the earliest pending send with its tag;
* sends up to ``eager_threshold`` bytes complete at once, larger ones
  (rendezvous) complete only once the matching receive has been posted;
* payloads are copied at send time and never aliased across ranks.

With ``timing="logical"`` every rank carries its own logical clock. A transfer
costs ``latency + bytes / bandwidth``; an eager message arrives at
``t_send + cost`` while a rendezvous transfer finishes at
``max(t_send, t_post) + cost`` on both sides. Logical results therefore do not
depend on thread scheduling.

Two halo-exchange strategies work on top of the transfer tables from
:mod:`sipflow.mesh`. The blocking one walks the table and uses a blocking send
or receive per patch, so rendezvous transfers can chain across ranks. The
non-blocking one posts all receives, copies local patches, posts all sends and
waits once; remote edge and corner patches are delivered one round late.
"""
from __future__ import annotations

import io
import math
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import _kernels, mesh
from .mesh import FACE, LOCAL, SEND, Field, boundary_region, slices_of, split_tables
from .perf import LogicalClock, Profiler, WallClock

EVENT_KINDS = ("send-start", "send-complete", "recv-post", "recv-complete", "wait", "copy",
               "compute")


class CommError(RuntimeError):
    pass


class ProtocolError(CommError):
    pass


class MisuseError(CommError):
    pass


class CollectiveMismatch(CommError):
    pass


class RankAborted(CommError):
    """Raised on ranks that were blocked when another rank failed."""


class DeadlockError(CommError):
    def __init__(self, message, cycle=()):
        super().__init__(message)
        self.cycle = tuple(cycle)


@dataclass(frozen=True)
class NetConfig:
    nranks: int = 1
    eager_threshold: int = 8192
    timing: str = "wall"
    latency: float = 2e-6
    bandwidth: float = 5e9
    copy_rate: float = 2e10
    timeout: float = 30.0

    def __post_init__(self):
        if self.nranks < 1:
            raise ValueError(f"rank count must be >= 1, got {self.nranks}")
        if self.eager_threshold < 0:
            raise ValueError("eager threshold must be >= 0")
        if self.timing not in ("wall", "logical"):
            raise ValueError(f"timing must be 'wall' or 'logical', got {self.timing!r}")
        if self.latency < 0 or not self.bandwidth > 0 or not self.copy_rate > 0:
            raise ValueError("latency must be >= 0, bandwidth and copy rate > 0")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")

    def transfer_cost(self, nbytes):
        return self.latency + nbytes / self.bandwidth


@dataclass
class Envelope:
    src: int
    dst: int
    tag: int
    payload: np.ndarray

    @property
    def nbytes(self):
        return int(self.payload.nbytes)


class EventLog:
    """Per-rank timeline: ``(kind, t_start, t_end, peer, bytes)`` tuples."""

    def __init__(self, rank):
        self.rank = rank
        self.events = []
        self.enabled = True

    def add(self, kind, t_start, t_end=None, peer=-1, nbytes=0):
        if self.enabled:
            self.events.append((kind, t_start, t_start if t_end is None else t_end, peer, nbytes))

    def ordered(self):
        return sorted(self.events, key=lambda e: (e[1], e[2]))

    def total(self, kind):
        return sum(e[2] - e[1] for e in self.events if e[0] == kind)

    def clear(self):
        self.events.clear()


def events_csv(logs):
    """CSV with columns ``rank,kind,t_start,t_end,peer,bytes``."""
    out = io.StringIO()
    out.write("rank,kind,t_start,t_end,peer,bytes\n")
    for log in sorted(logs, key=lambda lg: lg.rank):
        for kind, t0, t1, peer, nbytes in log.ordered():
            out.write(f"{log.rank},{kind},{t0:.9e},{t1:.9e},{peer},{nbytes}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Fabric
# ---------------------------------------------------------------------------

class _Send:
    __slots__ = ("env", "t_post", "eager", "match", "t_done")

    def __init__(self, env, t_post, eager):
        self.env = env
        self.t_post = t_post
        self.eager = eager
        self.match = None
        self.t_done = t_post if eager else None

    @property
    def done(self):
        return self.eager or self.match is not None


class _Recv:
    __slots__ = ("src", "dst", "tag", "t_post", "match", "t_done")

    def __init__(self, src, dst, tag, t_post):
        self.src, self.dst, self.tag, self.t_post = src, dst, tag, t_post
        self.match = None
        self.t_done = None

    @property
    def done(self):
        return self.match is not None


class Handle:
    """Outstanding non-blocking operation; consumed by :meth:`Rank.waitall`."""

    __slots__ = ("kind", "rec", "consumed")

    def __init__(self, kind, rec):
        self.kind = kind
        self.rec = rec
        self.consumed = False

    @property
    def peer(self):
        return self.rec.env.dst if self.kind == "send" else self.rec.src


class Fabric:
    """Shared matching engine for all ranks of one run."""

    def __init__(self, net: NetConfig):
        self.net = net
        # one lock, one condition per rank so that a transfer only wakes its peers
        self.cond = threading.Condition()
        self._wake = [threading.Condition(self.cond) for _ in range(net.nranks)]
        self.sends = {}   # (src, dst) -> unmatched sends in send order
        self.recvs = {}   # (src, dst) -> unmatched receives in posting order
        self.collectives = {}
        self.waiting = {}
        self.finished = set()
        self.failure = None
        self.epoch = time.perf_counter()

    # -- matching ---------------------------------------------------------
    def _complete(self, s, r):
        s.match, r.match = r, s
        if self.net.timing == "logical":
            cost = self.net.transfer_cost(s.env.nbytes)
            if s.eager:
                r.t_done = max(r.t_post, s.t_post + cost)
            else:
                s.t_done = r.t_done = max(s.t_post, r.t_post) + cost

    def notify(self, *ranks):
        for r in ranks:
            self._wake[r].notify_all()

    def notify_all(self):
        for c in self._wake:
            c.notify_all()

    def post_send(self, env, t_post):
        s = _Send(env, t_post, env.nbytes <= self.net.eager_threshold)
        with self.cond:
            self._check_failed()
            queue = self.recvs.get((env.src, env.dst), [])
            for i, r in enumerate(queue):
                if r.tag is None or r.tag == env.tag:
                    del queue[i]
                    self._complete(s, r)
                    break
            else:
                self.sends.setdefault((env.src, env.dst), []).append(s)
            self.notify(env.src, env.dst)
        return s

    def post_recv(self, src, dst, tag, t_post):
        r = _Recv(src, dst, tag, t_post)
        with self.cond:
            self._check_failed()
            queue = self.sends.get((src, dst), [])
            for i, s in enumerate(queue):
                if tag is None or s.env.tag == tag:
                    del queue[i]
                    self._complete(s, r)
                    break
            else:
                self.recvs.setdefault((src, dst), []).append(r)
            self.notify(src, dst)
        return r

    # -- waiting and failure detection ------------------------------------
    def _check_failed(self):
        if self.failure is not None:
            raise RankAborted(f"aborted: {self.failure}")

    def fail(self, exc):
        with self.cond:
            if self.failure is None:
                self.failure = exc
            self.notify_all()

    def finish(self, rank):
        with self.cond:
            self.finished.add(rank)
            self.notify_all()

    def wait_for(self, rank, ready, peers, what, collective=False):
        """Block ``rank`` until ``ready()`` holds (called with the lock held)."""
        start = time.perf_counter()
        self.waiting[rank] = (ready, peers, what, collective)
        try:
            while not ready():
                if self.failure is not None:
                    raise RankAborted(f"rank {rank} aborted while waiting for {what}: {self.failure}")
                stuck = self._diagnose()
                if stuck is not None:
                    self.failure = stuck
                    self.notify_all()
                    raise stuck
                if time.perf_counter() - start > self.net.timeout:
                    cycle = self._cycle()
                    err = DeadlockError(
                        f"rank {rank} waited more than {self.net.timeout} s for {what}; "
                        f"wait-for cycle: {_fmt_cycle(cycle)}", cycle)
                    self.failure = err
                    self.notify_all()
                    raise err
                self._wake[rank].wait(0.05)
        finally:
            del self.waiting[rank]

    def _diagnose(self):
        """Error if no live rank can make progress any more, else None."""
        live = set(range(self.net.nranks)) - self.finished
        if not live or not live <= set(self.waiting):
            return None
        if any(self.waiting[r][0]() for r in live):
            return None
        for r in sorted(live):
            _, peers, what, collective = self.waiting[r]
            gone = sorted(set(peers()) & self.finished)
            if gone:
                if collective:
                    return CollectiveMismatch(
                        f"rank {r} is in {what} but rank(s) {gone} finished without joining")
                return ProtocolError(
                    f"rank {r} waits for {what} from finished rank(s) {gone}: orphan transfer")
        cycle = self._cycle()
        return DeadlockError(f"deadlock, wait-for cycle: {_fmt_cycle(cycle)}", cycle)

    def _cycle(self):
        graph = {r: sorted(set(info[1]())) for r, info in self.waiting.items()}
        for start in sorted(graph):
            path, seen = [start], {start: 0}
            node = start
            while True:
                nxt = [p for p in graph.get(node, []) if p in graph]
                if not nxt:
                    break
                node = nxt[0]
                if node in seen:
                    return tuple(path[seen[node]:]) + (node,)
                seen[node] = len(path)
                path.append(node)
        return ()

    # -- collectives --------------------------------------------------------
    def collective(self, rank, seq, value, op, t_arrive, wait_rank):
        with self.cond:
            self._check_failed()
            slot = self.collectives.setdefault(seq, {"values": {}, "op": op, "result": None})
            if slot["op"] != op:
                err = CollectiveMismatch(
                    f"collective #{seq}: rank {rank} calls {op!r}, others called {slot['op']!r}")
                self.failure = err
                self.notify_all()
                raise err
            slot["values"][rank] = (value, t_arrive)
            n = self.net.nranks
            if len(slot["values"]) == n:
                values = [slot["values"][r][0] for r in range(n)]
                t_max = max(v[1] for v in slot["values"].values())
                depth = math.ceil(math.log2(n)) if n > 1 else 0
                slot["result"] = (_tree_reduce(values, op), t_max + 2 * depth * self.net.latency)
                slot["left"] = n
                self.notify_all()
            self.wait_for(wait_rank, lambda: slot["result"] is not None,
                          lambda: [r for r in range(n) if r not in slot["values"]],
                          f"collective #{seq} ({op})", collective=True)
            result = slot["result"]
            slot["left"] -= 1
            if slot["left"] == 0:
                del self.collectives[seq]
            return result


def _fmt_cycle(cycle):
    return " -> ".join(f"rank {r}" for r in cycle) if cycle else "(none found)"


def _tree_reduce(values, op):
    """Pairwise reduction in rank-ascending order (bitwise reproducible)."""
    fn = {"sum": lambda a, b: a + b, "max": max, "min": min}.get(op)
    if fn is None:
        raise ValueError(f"unknown reduction {op!r}")
    vals = list(values)
    while len(vals) > 1:
        vals = [fn(vals[i], vals[i + 1]) if i + 1 < len(vals) else vals[i]
                for i in range(0, len(vals), 2)]
    return vals[0]


# ---------------------------------------------------------------------------
# Ranks
# ---------------------------------------------------------------------------

class Rank:
    """One virtual rank: messaging, clock, profiler and event log."""

    def __init__(self, fabric: Fabric, rank: int):
        net = fabric.net
        if not 0 <= rank < net.nranks:
            raise ValueError(f"rank {rank} out of range 0..{net.nranks - 1}")
        self.fabric = fabric
        self.rank = rank
        self.size = net.nranks
        self.net = net
        self.clock = LogicalClock() if net.timing == "logical" else WallClock(fabric.epoch)
        self.profiler = Profiler(self.clock)
        self.events = EventLog(rank)
        self._coll_seq = 0

    @property
    def logical(self):
        return self.clock.logical

    def now(self):
        return self.clock.now()

    def _check_peer(self, peer, what):
        if not 0 <= peer < self.size:
            raise ValueError(f"{what} rank {peer} out of range 0..{self.size - 1}")
        if peer == self.rank:
            raise ProtocolError(
                f"rank {self.rank} addresses itself; same-rank transfers must be local copies")

    # -- non-blocking -------------------------------------------------------
    def isend(self, dst, payload, tag=0):
        self._check_peer(dst, "destination")
        data = np.array(payload, copy=True)
        env = Envelope(self.rank, dst, int(tag), data)
        t = self.now()
        self.events.add("send-start", t, peer=dst, nbytes=env.nbytes)
        return Handle("send", self.fabric.post_send(env, t))

    def irecv(self, src, tag=None):
        self._check_peer(src, "source")
        t = self.now()
        self.events.add("recv-post", t, peer=src)
        return Handle("recv", self.fabric.post_recv(src, self.rank, tag, t))

    def waitall(self, handles):
        """Wait for every handle; returns the payloads (None for sends)."""
        handles = list(handles)
        for h in handles:
            if h.consumed:
                raise MisuseError("handle already waited on")
        t_enter = self.now()
        fab = self.fabric
        if handles:
            recs = [h.rec for h in handles]
            with fab.cond:
                fab.wait_for(
                    self.rank, lambda: all(r.done for r in recs),
                    lambda: [h.peer for h in handles if not h.rec.done],
                    f"{len(handles)} transfer(s)")
        t_done = t_enter
        out = []
        for h in handles:
            h.consumed = True
            rec = h.rec
            if self.logical:
                t = rec.t_done
            else:
                t = self.now()
                rec.t_done = t
            t_done = max(t_done, t)
            if h.kind == "send":
                self.events.add("send-complete", rec.t_post, t, rec.env.dst, rec.env.nbytes)
                out.append(None)
            else:
                env = rec.match.env
                self.events.add("recv-complete", rec.t_post, t, rec.src, env.nbytes)
                out.append(env.payload)
        self.clock.wait_until(t_done)
        if handles:
            self.events.add("wait", t_enter, self.now())
        return out

    # -- blocking -----------------------------------------------------------
    def send(self, dst, payload, tag=0):
        """Returns at once for eager sizes, else once ``dst`` posted the receive."""
        self.waitall([self.isend(dst, payload, tag)])

    def recv(self, src, tag=None):
        return self.waitall([self.irecv(src, tag)])[0]

    # -- collectives and local work ------------------------------------------
    def all_reduce(self, value, op="sum"):
        self._coll_seq += 1
        result, t = self.fabric.collective(self.rank, self._coll_seq, value, op, self.now(),
                                           self.rank)
        if self.logical:
            self.clock.wait_until(t)
        return result

    def barrier(self):
        self.all_reduce(0, "sum")

    def local_copy(self, nbytes, t_start=None):
        t0 = self.now() if t_start is None else t_start
        if self.logical:
            self.clock.advance(nbytes / self.net.copy_rate)
        self.events.add("copy", t0, self.now(), self.rank, nbytes)

    def compute(self, name, cells, weight=1.0):
        """Profiled compute region that also appears in the event log."""
        return _ComputeRegion(self, name, cells, weight)


class _ComputeRegion:
    def __init__(self, rank, name, cells, weight):
        self.rank, self.name, self.cells, self.weight = rank, name, cells, weight

    def __enter__(self):
        self.t0 = self.rank.now()
        self.cm = self.rank.profiler.region(self.name, self.cells, self.weight)
        return self.cm.__enter__()

    def __exit__(self, *exc):
        out = self.cm.__exit__(*exc)
        self.rank.events.add("compute", self.t0, self.rank.now())
        return out


def solo_rank(timing="wall", **kw):
    """A single rank usable directly from the calling thread."""
    return Rank(Fabric(NetConfig(nranks=1, timing=timing, **kw)), 0)


def run_ranks(net: NetConfig, fn, *args):
    """Run ``fn(rank, *args)`` on every virtual rank; returns the results by rank.

    All ranks are joined before anything is reported. The first failure is
    re-raised; ranks that were only collateral damage get :class:`RankAborted`.
    """
    fabric = Fabric(net)
    ranks = [Rank(fabric, r) for r in range(net.nranks)]
    results = [None] * net.nranks
    errors = [None] * net.nranks

    def body(r):
        try:
            results[r] = fn(ranks[r], *args)
        except BaseException as exc:  # noqa: BLE001 - handed to the caller below
            errors[r] = exc
            if not isinstance(exc, RankAborted):
                fabric.fail(exc)
        finally:
            fabric.finish(r)

    if net.nranks == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}", daemon=True)
                   for r in range(net.nranks)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if fabric.failure is not None:
        raise fabric.failure
    for exc in errors:
        if exc is not None:
            raise exc
    return results


# ---------------------------------------------------------------------------
# Halo exchange
# ---------------------------------------------------------------------------

def _flat_index(shape, slices):
    """Flat indices of the elements selected by ``slices`` in a C-ordered array."""
    return np.arange(math.prod(shape), dtype=np.int64).reshape(shape)[slices].ravel()


def _ghost_source(dec, entry):
    """Slices in the neighbour block feeding the ghost region of ``entry``."""
    nb = dec.blocks[entry.neighbor]
    back = tuple(-c for c in entry.offset)
    return boundary_region(nb.shape, back)


class ExchangeContext:
    """Ghost-layer exchange for the blocks owned by one rank.

    ``exchange`` accepts one :class:`Field`, a list of fields or a mapping of
    block id to field(s). With several blocks per rank the i-th field of each
    block is treated as the same variable.

    Every call is one exchange round and uses the next message tag, so the tag
    increases strictly. Each field counts its own rounds; a ghost region's
    generation is the round whose source data it holds. Under the
    non-blocking strategy remote edge and corner ghosts hold the previous
    round's data.
    """

    STRATEGIES = ("blocking", "nonblocking")

    def __init__(self, rank: Rank, dec, table, strategy="blocking"):
        if strategy not in self.STRATEGIES:
            raise ValueError(f"unknown exchange strategy {strategy!r}")
        self.rank = rank
        self.dec = dec
        self.table = table
        self.split = split_tables(table)
        self.strategy = strategy
        self.tag = 0
        self._plans = {}
        self._views = {}
        self.profiler = rank.profiler
        self.messages = 0
        self.bytes_sent = 0

    @property
    def clock(self):
        return self.rank.clock

    def all_reduce(self, value, op="sum"):
        with self.profiler.region("all_reduce"):
            return self.rank.all_reduce(value, op)

    def _by_block(self, fields):
        if isinstance(fields, Field):
            fields = [fields]
        if isinstance(fields, dict):
            items = []
            for bid, fs in fields.items():
                items.extend([fs] if isinstance(fs, Field) else list(fs))
            fields = items
        groups = {}
        for f in fields:
            groups.setdefault(f.block, []).append(f)
        counts = {len(v) for v in groups.values()}
        if len(counts) > 1:
            raise ValueError("every block must pass the same number of fields")
        return groups

    def _plan(self, entry):
        """Cached (ghost slices, source slices, generation index) for ``entry``."""
        plan = self._plans.get(id(entry))
        if plan is None:
            d = entry.offset
            src = _ghost_source(self.dec, entry) if entry.direction == LOCAL else None
            plan = (slices_of(entry.bounds), src, (d[0] + 1, d[1] + 1, d[2] + 1))
            self._plans[id(entry)] = plan
        return plan

    def _pack(self, fields, entry):
        sl = self._plan(entry)[0]
        return np.concatenate([f.data[sl].ravel() for f in fields]) if fields else np.empty(0)

    def _unpack(self, fields, entry, payload):
        sl, _, g = self._plan(entry)
        views = [f.data[sl] for f in fields]
        if sum(v.size for v in views) != payload.size:
            raise ProtocolError(f"payload of {payload.size} values does not fit {len(fields)} "
                                f"field(s) of orphan or misordered entry: {entry.describe()}")
        pos = 0
        for f, view in zip(fields, views):
            n = view.size
            view[...] = payload[pos:pos + n].reshape(view.shape)
            pos += n
            f.ghost_gen[g] = f.rounds

    def _pack_previous(self, fields, entry):
        """Each field's boundary data from its previous round, led by that round's number.

        The current data goes to the field's outbox; a field without a
        previous round sends only the marker -1.
        """
        sl = self._plan(entry)[0]
        parts = []
        for f in fields:
            prev = f.outbox.get(entry)
            f.outbox[entry] = (f.rounds, f.data[sl].ravel().copy())
            if prev is None:
                parts.append(np.array([-1.0], dtype=f.data.dtype))
            else:
                parts.append(np.concatenate((np.array([prev[0]], dtype=f.data.dtype), prev[1])))
        return np.concatenate(parts) if parts else np.empty(0)

    def _unpack_previous(self, fields, entry, payload):
        sl, _, g = self._plan(entry)
        pos = 0
        for f in fields:
            view = f.data[sl]
            if pos >= payload.size:
                break
            gen = int(payload[pos])
            pos += 1
            if gen < 0:
                continue
            if pos + view.size > payload.size:
                break
            view[...] = payload[pos:pos + view.size].reshape(view.shape)
            pos += view.size
            f.ghost_gen[g] = gen
        else:
            if pos == payload.size:
                return
        raise ProtocolError(f"payload of {payload.size} values does not fit {len(fields)} "
                            f"field(s) of orphan or misordered entry: {entry.describe()}")

    def _copies(self, groups, entries):
        """Flat index plans for the same-rank copies of ``entries``.

        One plan per (destination, source) field pair; cached per field set.
        """
        key = tuple(id(e) for e in entries) + tuple(id(f) for fs in groups.values() for f in fs)
        hit = self._views.get(key)
        if hit is not None:
            return hit[0]
        pairs = {}
        for e in entries:
            sl_dst, sl_src, g = self._plan(e)
            for fd, fs in zip(groups.get(e.owner, ()), groups.get(e.neighbor, ())):
                item = pairs.setdefault((id(fd), id(fs)), (fd, fs, [], [], []))
                item[2].append(_flat_index(fd.data.shape, sl_dst))
                item[3].append(_flat_index(fs.data.shape, sl_src))
                item[4].append(np.ravel_multi_index(g, (3, 3, 3)))
        copies = [(fd, fs, np.concatenate(di), np.concatenate(si), np.array(gi))
                  for fd, fs, di, si, gi in pairs.values()]
        if len(self._views) > 64:
            self._views.clear()
        # the groups are kept alive so that the id-based key stays unique
        self._views[key] = (copies, groups)
        return copies

    def _locals(self, groups, entries):
        """All same-rank copies of one round, logged as a single copy event."""
        if not entries:
            return
        t0 = self.rank.now()
        nbytes = 0
        for fd, fs, di, si, gi in self._copies(groups, entries):
            _kernels.gather_scatter(fd.data.reshape(-1), fs.data.reshape(-1), di, si)
            fd.ghost_gen.flat[gi] = fd.rounds
            nbytes += di.size * fd.data.itemsize
        self.rank.local_copy(nbytes, t0)

    def exchange(self, fields):
        groups = self._by_block(fields)
        self.tag += 1
        for fs in groups.values():
            for f in fs:
                f.rounds += 1
        with self.profiler.region("exchange"):
            if self.strategy == "blocking":
                self._blocking(groups)
            else:
                self._nonblocking(groups)

    def _blocking(self, groups):
        tag = self.tag
        pending = []
        for e in self.table.entries:
            if e.direction == LOCAL:
                pending.append(e)
                continue
            self._locals(groups, pending)
            pending = []
            if e.direction == SEND:
                payload = self._pack(groups.get(e.owner, []), e)
                self.rank.send(e.peer, payload, tag)
                self.messages += 1
                self.bytes_sent += payload.nbytes
            else:
                payload = self.rank.recv(e.peer, tag)
                self._unpack(groups.get(e.owner, []), e, payload)
        self._locals(groups, pending)

    def _nonblocking(self, groups):
        tag = self.tag
        recv_handles = [(e, self.rank.irecv(e.peer, tag)) for _, e in self.split.recvs]
        self._locals(groups, [e for _, e in self.split.local])
        send_handles = []
        for _, e in self.split.sends:
            fields = groups.get(e.owner, [])
            payload = self._pack(fields, e) if e.kind == FACE else self._pack_previous(fields, e)
            send_handles.append(self.rank.isend(e.peer, payload, tag))
            self.messages += 1
            self.bytes_sent += payload.nbytes
        payloads = self.rank.waitall([h for _, h in recv_handles] + send_handles)
        for (e, _), payload in zip(recv_handles, payloads):
            if e.kind == FACE:
                self._unpack(groups.get(e.owner, []), e, payload)
            else:
                self._unpack_previous(groups.get(e.owner, []), e, payload)


class SoloExchange:
    """Exchange for a single rank that owns every block (no messages)."""

    def __init__(self, dec, rank: Rank | None = None, strategy="blocking"):
        rank = rank or solo_rank()
        tables = mesh.build_transfer_tables(dec)
        self.ctx = ExchangeContext(rank, dec, tables[0], strategy)

    def __getattr__(self, name):
        return getattr(self.ctx, name)


def check_tables(tables):
    """Raise :class:`ProtocolError` naming the first orphan or misordered transfer."""
    problems = mesh.check_pairing(tables)
    if problems:
        raise ProtocolError(problems[0])


__all__ = [
    "NetConfig", "Envelope", "EventLog", "events_csv", "Fabric", "Handle", "Rank", "run_ranks",
    "solo_rank", "ExchangeContext", "SoloExchange", "check_tables", "CommError", "ProtocolError",
    "MisuseError", "CollectiveMismatch", "RankAborted", "DeadlockError", "EVENT_KINDS",
]
