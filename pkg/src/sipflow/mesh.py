"""Block-structured grids, ghost-layer fields and block-boundary transfer tables.

A uniform Cartesian grid is split into a tensor product of blocks. Each block
stores its fields with one ghost layer on every side. Data movement between
blocks is described by transfer tables that are computed once, can be written
to a small binary file, and are then shared read-only by all ranks.

Local array indices are *padded*: interior cells run from 1 to n on each
axis, ghost cells sit at 0 and n + 1.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

BC_KINDS = ("periodic", "wall", "symmetry")
AXES = "xyz"

FACE_OFFSETS = {
    "E": (1, 0, 0), "W": (-1, 0, 0),
    "N": (0, 1, 0), "S": (0, -1, 0),
    "T": (0, 0, 1), "B": (0, 0, -1),
}
FACE_NAMES = {v: k for k, v in FACE_OFFSETS.items()}

#: all 26 neighbour offsets, faces first, then edges, then corners
OFFSETS = tuple(sorted(
    (d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)),
    key=lambda d: (sum(map(abs, d)), d),
))

LOCAL, SEND, RECV = 0, 1, 2
FACE, EDGE, CORNER = 0, 1, 2
DIRECTION_NAMES = ("local", "send", "recv")
KIND_NAMES = ("face", "edge", "corner")


class DecompositionError(ValueError):
    """Raised for block counts that cannot tile the grid."""


class FormatError(ValueError):
    """Malformed transfer-table file; ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def offset_code(d):
    """Pack a neighbour offset into one byte (0..26, 13 is the cell itself)."""
    return (d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)


def offset_from_code(code):
    return (code // 9 - 1, (code // 3) % 3 - 1, code % 3 - 1)


def offset_kind(d):
    return sum(1 for c in d if c) - 1


def offset_label(d):
    """Human readable side label, e.g. ``E`` or ``NE`` or ``TNE``."""
    parts = []
    for axis in (2, 1, 0):
        if d[axis]:
            e = [0, 0, 0]
            e[axis] = d[axis]
            parts.append(FACE_NAMES[tuple(e)])
    return "".join(parts)


@dataclass(frozen=True)
class GridSpec:
    """Uniform Cartesian grid of ``nx * ny * nz`` cells.

    ``bc`` holds one ``(low, high)`` pair of boundary kinds per axis.
    """

    nx: int
    ny: int
    nz: int
    lx: float = 1.0
    ly: float = 1.0
    lz: float = 1.0
    bc: tuple = (("periodic", "periodic"),) * 3

    def __post_init__(self):
        for axis, n in zip(AXES, self.shape):
            if n < 2:
                raise ValueError(f"n{axis} must be >= 2, got {n}")
        for axis, length in zip(AXES, (self.lx, self.ly, self.lz)):
            if not length > 0:
                raise ValueError(f"l{axis} must be positive, got {length}")
        bc = tuple(tuple(pair) for pair in self.bc)
        if len(bc) != 3 or any(len(pair) != 2 for pair in bc):
            raise ValueError("bc needs one (low, high) pair per axis")
        for axis, (lo, hi) in zip(AXES, bc):
            for kind in (lo, hi):
                if kind not in BC_KINDS:
                    raise ValueError(f"unknown boundary kind {kind!r} on axis {axis}")
            if (lo == "periodic") != (hi == "periodic"):
                raise ValueError(f"periodic faces must come in pairs (axis {axis})")
        object.__setattr__(self, "bc", bc)

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def lengths(self):
        return (self.lx, self.ly, self.lz)

    @property
    def spacing(self):
        return (self.lx / self.nx, self.ly / self.ny, self.lz / self.nz)

    @property
    def periodic(self):
        return tuple(pair[0] == "periodic" for pair in self.bc)

    @property
    def ncells(self):
        return self.nx * self.ny * self.nz

    def cell_volume(self):
        hx, hy, hz = self.spacing
        return hx * hy * hz


@dataclass(frozen=True)
class Block:
    id: int
    coords: tuple
    lo: tuple
    shape: tuple
    rank: int

    @property
    def hi(self):
        return tuple(l + n for l, n in zip(self.lo, self.shape))

    @property
    def ncells(self):
        return int(np.prod(self.shape))

    def slices(self):
        """Global index slices covered by this block."""
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True)
class BlockDecomposition:
    grid: GridSpec
    counts: tuple
    blocks: tuple
    nranks: int

    @property
    def nblocks(self):
        return len(self.blocks)

    def block_at(self, coords):
        px, py, _ = self.counts
        return self.blocks[coords[0] + px * (coords[1] + py * coords[2])]

    def blocks_of_rank(self, rank):
        return [b for b in self.blocks if b.rank == rank]

    def neighbor(self, block, d):
        """Block across offset ``d`` (through periodic wraps), or None."""
        coords = []
        for axis in range(3):
            c = block.coords[axis] + d[axis]
            p = self.counts[axis]
            if not 0 <= c < p:
                if not self.grid.periodic[axis]:
                    return None
                c %= p
            coords.append(c)
        return self.block_at(coords)

    def gather(self, pieces: Mapping[int, np.ndarray]):
        """Assemble per-block interior arrays into one global array."""
        first = next(iter(pieces.values()))
        out = np.empty(self.grid.shape, dtype=first.dtype)
        for b in self.blocks:
            out[b.slices()] = pieces[b.id]
        return out

    def scatter(self, array):
        return {b.id: np.array(array[b.slices()]) for b in self.blocks}


def _split(n, p):
    base = n // p
    sizes = [base] * p
    sizes[-1] += n - base * p
    return sizes


def decompose(grid: GridSpec, px: int, py: int, pz: int, nranks: int | None = None):
    """Tile ``grid`` with ``px * py * pz`` blocks.

    Remainder cells of uneven splits go to the last block along each axis.
    Blocks are numbered x-fastest. With ``nranks`` smaller than the block
    count, consecutive blocks are packed onto the same rank.
    """
    counts = (px, py, pz)
    if px * py * pz == 0 or min(counts) < 0:
        raise DecompositionError(f"block counts must be positive, got {px}x{py}x{pz}")
    for axis, n, p in zip(AXES, grid.shape, counts):
        if p > n:
            raise DecompositionError(
                f"axis {axis}: {p} blocks requested but only {n} cells")
    nblocks = px * py * pz
    if nranks is None:
        nranks = nblocks
    if not 1 <= nranks <= nblocks:
        raise DecompositionError(f"rank count {nranks} must lie in 1..{nblocks}")

    sizes = [_split(n, p) for n, p in zip(grid.shape, counts)]
    starts = [np.concatenate([[0], np.cumsum(s)[:-1]]).astype(int) for s in sizes]
    blocks = []
    for bz, by, bx in itertools.product(range(pz), range(py), range(px)):
        bid = bx + px * (by + py * bz)
        c = (bx, by, bz)
        blocks.append(Block(
            id=bid,
            coords=c,
            lo=tuple(int(starts[a][c[a]]) for a in range(3)),
            shape=tuple(int(sizes[a][c[a]]) for a in range(3)),
            rank=bid * nranks // nblocks,
        ))
    return BlockDecomposition(grid=grid, counts=counts, blocks=tuple(blocks), nranks=nranks)


def parse_blocks(text):
    """Parse ``"2x2x1"`` into a tuple of three ints."""
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"block layout must look like PxQxR, got {text!r}")
    return tuple(int(p) for p in parts)


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

PRECISIONS = {"double": np.float64, "single": np.float32}


class Field:
    """Block-local 3D array with one ghost layer on each side.

    ``rounds`` counts the exchanges this field took part in and
    ``ghost_gen[dx + 1, dy + 1, dz + 1]`` is the round whose source data
    currently sits in the ghost region on side ``(dx, dy, dz)``.
    ``outbox`` holds boundary data that an exchange sends one round late,
    keyed by transfer-table entry.
    """

    def __init__(self, shape, dtype=np.float64, block=0, name=""):
        self.shape = tuple(int(n) for n in shape)
        self.data = np.zeros(tuple(n + 2 for n in self.shape), dtype=dtype)
        self.block = block
        self.name = name
        self.ghost_gen = np.zeros((3, 3, 3), dtype=np.int64)
        self.rounds = 0
        self.outbox = {}

    @classmethod
    def from_interior(cls, values, block=0, name="", dtype=None):
        values = np.asarray(values)
        f = cls(values.shape, dtype=dtype or values.dtype, block=block, name=name)
        f.interior[...] = values
        return f

    @property
    def interior(self):
        return self.data[1:-1, 1:-1, 1:-1]

    @property
    def precision(self):
        return "single" if self.data.dtype == np.float32 else "double"

    def generation(self, d):
        return int(self.ghost_gen[d[0] + 1, d[1] + 1, d[2] + 1])

    def set_generation(self, d, gen):
        idx = (d[0] + 1, d[1] + 1, d[2] + 1)
        if gen < self.ghost_gen[idx]:
            raise ValueError("ghost generations never decrease")
        self.ghost_gen[idx] = gen

    def copy(self, dtype=None):
        f = Field(self.shape, dtype=dtype or self.data.dtype, block=self.block, name=self.name)
        f.data[...] = self.data
        f.ghost_gen[...] = self.ghost_gen
        f.rounds = self.rounds
        return f

    def __repr__(self):
        return f"Field({self.name or '?'}, block={self.block}, shape={self.shape}, {self.precision})"


def ghost_region(shape, d):
    """Padded-index slices of the ghost region on side ``d``."""
    out = []
    for n, c in zip(shape, d):
        out.append(slice(n + 1, n + 2) if c > 0 else slice(0, 1) if c < 0 else slice(1, n + 1))
    return tuple(out)


def boundary_region(shape, d):
    """Padded-index slices of the interior layer adjacent to side ``d``."""
    out = []
    for n, c in zip(shape, d):
        out.append(slice(n, n + 1) if c > 0 else slice(1, 2) if c < 0 else slice(1, n + 1))
    return tuple(out)


def bounds_of(slices):
    """Inclusive ``(lo, hi)`` per axis as a flat 6-tuple."""
    out = []
    for s in slices:
        out.extend((s.start, s.stop - 1))
    return tuple(out)


def slices_of(bounds):
    return tuple(slice(bounds[2 * a], bounds[2 * a + 1] + 1) for a in range(3))


# ---------------------------------------------------------------------------
# Transfer tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Patch:
    """One block-boundary region seen from its owner block."""

    owner: int
    neighbor: int
    offset: tuple
    owner_range: tuple
    neighbor_range: tuple

    @property
    def kind(self):
        return offset_kind(self.offset)

    @property
    def face(self):
        return offset_label(self.offset)


@dataclass(frozen=True)
class TableEntry:
    """One data movement.

    For ``SEND`` the owner is the source block and ``bounds`` is the interior
    slab being sent; for ``RECV`` and ``LOCAL`` the owner is the receiving block
    and ``bounds`` is its ghost region. ``face`` is the packed offset pointing
    from the owner towards the neighbour.
    """

    direction: int
    kind: int
    face: int
    peer: int
    owner: int
    neighbor: int
    bounds: tuple

    @property
    def offset(self):
        return offset_from_code(self.face)

    @property
    def patch_id(self):
        """(source block, destination block, offset seen from the source)."""
        d = self.offset
        if self.direction == SEND:
            return (self.owner, self.neighbor, d)
        return (self.neighbor, self.owner, tuple(-c for c in d))

    def describe(self):
        return (f"{DIRECTION_NAMES[self.direction]:5s} {KIND_NAMES[self.kind]:6s} "
                f"{offset_label(self.offset):3s} owner={self.owner} neighbor={self.neighbor} "
                f"peer={self.peer} bounds={list(self.bounds)}")


@dataclass(frozen=True)
class TransferTable:
    rank: int
    entries: tuple = ()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def count(self, direction=None, kind=None):
        return sum(1 for e in self.entries
                   if (direction is None or e.direction == direction)
                   and (kind is None or e.kind == kind))


@dataclass(frozen=True)
class SplitTables:
    """Local copies, remote sends and remote receives of one table.

    Each list holds ``(position, entry)`` pairs in original table order.
    """

    rank: int
    local: tuple = ()
    sends: tuple = ()
    recvs: tuple = ()

    def merged(self):
        return tuple(e for _, e in sorted(self.local + self.sends + self.recvs, key=lambda p: p[0]))


def _canonical_key(a, n, d):
    """Ordering key shared by both ends of a patch pair."""
    code = offset_code(d)
    back = offset_code(tuple(-c for c in d))
    if a == n:
        return (a, n, max(code, back))
    if a < n:
        return (a, n, code)
    return (n, a, back)


def build_transfer_tables(dec: BlockDecomposition, grid: GridSpec | None = None):
    """Per-rank transfer tables for one ghost layer (faces, edges and corners).

    Entries are sorted by a key shared by both blocks of a patch pair, and
    within a remote pair the lower block sends first. Every rank therefore
    walks the pairwise exchanges in one global order, which keeps blocking
    rendezvous exchange deadlock-free even on periodic rings.
    """
    del grid  # the decomposition already carries the grid
    per_rank = {r: [] for r in range(dec.nranks)}
    for a in dec.blocks:
        for d in OFFSETS:
            n = dec.neighbor(a, d)
            if n is None:
                continue
            key = _canonical_key(a.id, n.id, d)
            kind = offset_kind(d)
            ghost = bounds_of(ghost_region(a.shape, d))
            if n.rank == a.rank:
                entry = TableEntry(LOCAL, kind, offset_code(d), a.rank, a.id, n.id, ghost)
                per_rank[a.rank].append((key, 0, a.id, offset_code(d), entry))
                continue
            send = TableEntry(SEND, kind, offset_code(d), n.rank, a.id, n.id,
                              bounds_of(boundary_region(a.shape, d)))
            recv = TableEntry(RECV, kind, offset_code(d), n.rank, a.id, n.id, ghost)
            first, second = (send, recv) if a.id < n.id else (recv, send)
            per_rank[a.rank].append((key, 0, a.id, offset_code(d), first))
            per_rank[a.rank].append((key, 1, a.id, offset_code(d), second))
    return {r: TransferTable(r, tuple(item[-1] for item in sorted(items, key=lambda t: t[:4])))
            for r, items in per_rank.items()}


def split_tables(table: TransferTable):
    local, sends, recvs = [], [], []
    for pos, e in enumerate(table.entries):
        {LOCAL: local, SEND: sends, RECV: recvs}[e.direction].append((pos, e))
    return SplitTables(table.rank, tuple(local), tuple(sends), tuple(recvs))


def check_pairing(tables: Mapping[int, TransferTable]):
    """Verify the send/recv bijection; returns a list of problems (empty if sound).

    Sends from A to B and receives on B from A must match one to one and
    appear in the same relative order on both sides.
    """
    problems = []
    sends, recvs = {}, {}
    for rank, t in tables.items():
        for e in t.entries:
            if e.direction == SEND:
                sends.setdefault((rank, e.peer), []).append(e)
            elif e.direction == RECV:
                recvs.setdefault((e.peer, rank), []).append(e)
            elif e.peer != rank:
                problems.append(f"rank {rank}: local entry with foreign peer {e.peer}: {e.describe()}")
    for pair in sorted(set(sends) | set(recvs)):
        s = [e.patch_id for e in sends.get(pair, [])]
        r = [e.patch_id for e in recvs.get(pair, [])]
        if sorted(s) != sorted(r):
            for pid in sorted(set(s) ^ set(r)):
                problems.append(f"orphan transfer {pid} between ranks {pair[0]}->{pair[1]}")
        elif s != r:
            problems.append(f"ranks {pair[0]}->{pair[1]}: send and receive order differ")
    return problems


# --- binary file ------------------------------------------------------------

MAGIC = b"FTT1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
ENTRY_DTYPE = np.dtype([
    ("direction", "u1"), ("kind", "u1"), ("face", "u1"), ("pad", "u1"),
    ("peer", "<u4"), ("owner", "<u4"), ("neighbor", "<u4"),
    ("bounds", "<i4", (6,)),
])
assert ENTRY_DTYPE.itemsize == 40


def _as_list(tables):
    if isinstance(tables, Mapping):
        return [tables[r] for r in sorted(tables)]
    return list(tables)


def encode_tables(tables) -> bytes:
    tables = _as_list(tables)
    chunks = [_HEADER.pack(MAGIC, VERSION, len(tables), 0)]
    for t in tables:
        rec = np.zeros(len(t.entries), dtype=ENTRY_DTYPE)
        for i, e in enumerate(t.entries):
            rec[i] = (e.direction, e.kind, e.face, 0, e.peer, e.owner, e.neighbor, e.bounds)
        chunks.append(struct.pack("<I", len(t.entries)))
        chunks.append(rec.tobytes())
    return b"".join(chunks)


def decode_tables(buf: bytes):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, nranks, reserved = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if reserved != 0:
        raise FormatError("reserved header field is not zero", 12)
    pos = _HEADER.size
    tables = {}
    for rank in range(nranks):
        if pos + 4 > len(buf):
            raise FormatError(f"truncated entry count for rank {rank}", pos)
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        end = pos + count * ENTRY_DTYPE.itemsize
        if end > len(buf):
            raise FormatError(f"truncated entries for rank {rank}", len(buf))
        rec = np.frombuffer(buf, dtype=ENTRY_DTYPE, count=count, offset=pos)
        entries = []
        for i, r in enumerate(rec):
            at = pos + i * ENTRY_DTYPE.itemsize
            if r["direction"] > 2 or r["kind"] > 2 or r["face"] > 26 or r["face"] == 13:
                raise FormatError(f"invalid entry {i} of rank {rank}", at)
            entries.append(TableEntry(int(r["direction"]), int(r["kind"]), int(r["face"]),
                                      int(r["peer"]), int(r["owner"]), int(r["neighbor"]),
                                      tuple(int(v) for v in r["bounds"])))
        tables[rank] = TransferTable(rank, tuple(entries))
        pos = end
    if pos != len(buf):
        raise FormatError("trailing bytes after last rank", pos)
    return tables


def write_tables(tables, path):
    with open(path, "wb") as fh:
        fh.write(encode_tables(tables))


def read_tables(path):
    with open(path, "rb") as fh:
        return decode_tables(fh.read())


def patches(dec: BlockDecomposition, block: Block) -> list:
    """All patches owned by ``block`` in offset order."""
    out = []
    for d in OFFSETS:
        n = dec.neighbor(block, d)
        if n is None:
            continue
        back = tuple(-c for c in d)
        out.append(Patch(block.id, n.id, d,
                         bounds_of(ghost_region(block.shape, d)),
                         bounds_of(boundary_region(n.shape, back))))
    return out


def cell_centers(grid: GridSpec, block: Block | None = None):
    """Cell-centre coordinate arrays (``indexing='ij'``) for a block or the whole grid."""
    hs = grid.spacing
    lo = block.lo if block is not None else (0, 0, 0)
    shape = block.shape if block is not None else grid.shape
    axes = [(np.arange(n) + l + 0.5) * h for n, l, h in zip(shape, lo, hs)]
    return np.meshgrid(*axes, indexing="ij")


__all__ = [
    "GridSpec", "Block", "BlockDecomposition", "decompose", "parse_blocks", "Field",
    "Patch", "TableEntry", "TransferTable", "SplitTables", "build_transfer_tables",
    "split_tables", "check_pairing", "write_tables", "read_tables", "encode_tables",
    "decode_tables", "DecompositionError", "FormatError", "OFFSETS", "FACE_OFFSETS",
    "LOCAL", "SEND", "RECV", "FACE", "EDGE", "CORNER", "ghost_region", "boundary_region",
    "cell_centers", "patches", "offset_code", "offset_from_code", "offset_label",
]
