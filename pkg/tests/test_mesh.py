import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sipflow import mesh
from sipflow.mesh import CORNER, EDGE, FACE, LOCAL, RECV, SEND

X_WALLS = (("wall", "wall"), ("periodic", "periodic"), ("periodic", "periodic"))


# --- decomposition ----------------------------------------------------------

@pytest.mark.parametrize("grid, counts, shapes", [
    ((64, 64, 64), (2, 2, 1), {(32, 32, 64)}),
    ((5, 4, 4), (2, 1, 1), {(2, 4, 4), (3, 4, 4)}),
    ((64, 64, 64), (4, 2, 2), {(16, 32, 32)}),
])
def test_decompose_examples(grid, counts, shapes):
    dec = mesh.decompose(mesh.GridSpec(*grid), *counts)
    assert dec.nblocks == int(np.prod(counts))
    assert {b.shape for b in dec.blocks} == shapes
    assert sum(b.ncells for b in dec.blocks) == int(np.prod(grid))


def test_remainder_goes_to_last_block():
    dec = mesh.decompose(mesh.GridSpec(5, 4, 4), 2, 1, 1)
    assert dec.blocks[0].shape == (2, 4, 4) and dec.blocks[1].lo == (2, 0, 0)


@pytest.mark.parametrize("counts", [(0, 1, 1), (1, 0, 2), (5, 1, 1), (1, 1, 9)])
def test_invalid_decomposition(counts):
    with pytest.raises(mesh.DecompositionError):
        mesh.decompose(mesh.GridSpec(4, 4, 8), *counts)


def test_decomposition_error_names_axis():
    with pytest.raises(mesh.DecompositionError, match="axis x"):
        mesh.decompose(mesh.GridSpec(4, 4, 4), 5, 1, 1)


def test_exhaustive_tiling_up_to_eight_cubed():
    for shape in itertools.product(range(2, 9), repeat=3):
        grid = mesh.GridSpec(*shape)
        for counts in itertools.product(*(range(1, n + 1) for n in shape)):
            dec = mesh.decompose(grid, *counts)
            cover = np.zeros(shape, dtype=np.int8)
            for b in dec.blocks:
                cover[b.slices()] += 1
            assert cover.min() == cover.max() == 1


def test_decomposition_is_deterministic_and_packs_ranks():
    grid = mesh.GridSpec(8, 8, 4)
    a, b = mesh.decompose(grid, 2, 2, 1, nranks=2), mesh.decompose(grid, 2, 2, 1, nranks=2)
    assert a == b
    assert [blk.rank for blk in a.blocks] == [0, 0, 1, 1]


def test_gather_scatter_round_trip():
    grid = mesh.GridSpec(7, 5, 3)
    dec = mesh.decompose(grid, 3, 2, 1)
    x = np.random.default_rng(0).normal(size=grid.shape)
    np.testing.assert_array_equal(dec.gather(dec.scatter(x)), x)


@pytest.mark.parametrize("text, want", [("2x2x1", (2, 2, 1)), ("1X4x2", (1, 4, 2))])
def test_parse_blocks(text, want):
    assert mesh.parse_blocks(text) == want


@pytest.mark.parametrize("kw", [dict(nx=1, ny=4, nz=4), dict(nx=4, ny=4, nz=4, lx=0.0),
                                dict(nx=4, ny=4, nz=4, bc=(("periodic", "wall"),) * 3)])
def test_grid_validation(kw):
    with pytest.raises(ValueError):
        mesh.GridSpec(**kw)


# --- regions ----------------------------------------------------------------

def test_ghost_and_boundary_regions_face_each_other():
    shape = (4, 3, 2)
    for d in mesh.OFFSETS:
        g = mesh.ghost_region(shape, d)
        b = mesh.boundary_region(shape, tuple(-c for c in d))
        assert tuple(s.stop - s.start for s in g) == tuple(s.stop - s.start for s in b)


def test_offset_codes_round_trip():
    for d in mesh.OFFSETS:
        assert mesh.offset_from_code(mesh.offset_code(d)) == d
    assert len(mesh.OFFSETS) == 26


# --- transfer tables --------------------------------------------------------

def tables_for(shape, counts, nranks=None, bc=None):
    grid = mesh.GridSpec(*shape, **({"bc": bc} if bc else {}))
    dec = mesh.decompose(grid, *counts, nranks=nranks)
    return dec, mesh.build_transfer_tables(dec)


def test_two_blocks_on_one_rank_are_all_local():
    _, tables = tables_for((8, 4, 4), (2, 1, 1), nranks=1)
    t = tables[0]
    assert len(t) == 2 * 26 and t.count(LOCAL) == len(t)


def test_two_ranks_share_one_face():
    _, tables = tables_for((8, 4, 4), (2, 1, 1), bc=X_WALLS)
    t = tables[0]
    assert t.count(SEND, FACE) == 1 and t.count(RECV, FACE) == 1
    # the y and z faces wrap onto the block itself
    assert t.count(LOCAL, FACE) == 4
    assert all(e.peer == 1 for e in t if e.direction != LOCAL)


def test_two_by_two_periodic_counts():
    _, tables = tables_for((8, 8, 2), (2, 2, 1))
    for t in tables.values():
        assert t.count(SEND, FACE) == 4 and t.count(RECV, FACE) == 4
        in_plane = [e for e in t if e.direction == SEND and e.kind == EDGE and e.offset[2] == 0]
        assert len(in_plane) == 4
        # the z wrap is a self-neighbour, so edges and corners leaving the
        # xy-plane are remote as well
        assert t.count(SEND, EDGE) == 12 and t.count(SEND, CORNER) == 8
        assert t.count(SEND) == t.count(RECV) == 24


def test_brute_force_neighbour_enumeration():
    dec, tables = tables_for((6, 6, 6), (3, 2, 1), nranks=3)
    for r, t in tables.items():
        expected = 0
        for b in dec.blocks_of_rank(r):
            expected += sum(1 for d in mesh.OFFSETS
                            if dec.neighbor(b, d) is not None and dec.neighbor(b, d).rank == r)
            expected += 2 * sum(1 for d in mesh.OFFSETS
                                if dec.neighbor(b, d) is not None and dec.neighbor(b, d).rank != r)
        assert len(t) == expected


def test_walls_remove_patches():
    walls = (("wall", "wall"),) * 3
    _, tables = tables_for((4, 4, 4), (1, 1, 1), bc=walls)
    assert len(tables[0]) == 0
    _, tables = tables_for((4, 4, 4), (2, 1, 1), bc=walls)
    assert tables[0].count(SEND) == 1 and tables[0].count() == 2


@pytest.mark.parametrize("counts", list(itertools.product((1, 2, 3), repeat=3)))
def test_send_recv_bijection(counts):
    _, tables = tables_for((6, 6, 6), counts)
    assert mesh.check_pairing(tables) == []
    sends = sorted(e.patch_id for t in tables.values() for e in t if e.direction == SEND)
    recvs = sorted(e.patch_id for t in tables.values() for e in t if e.direction == RECV)
    assert sends == recvs and len(set(sends)) == len(sends)


def test_check_pairing_reports_orphan():
    _, tables = tables_for((8, 4, 4), (2, 1, 1))
    broken = dict(tables)
    entries = list(tables[1].entries)
    drop = next(i for i, e in enumerate(entries) if e.direction == RECV)
    broken[1] = mesh.TransferTable(1, tuple(entries[:drop] + entries[drop + 1:]))
    problems = mesh.check_pairing(broken)
    assert problems and "orphan" in problems[0]


def test_split_all_local():
    _, tables = tables_for((4, 4, 4), (1, 1, 1))
    s = mesh.split_tables(tables[0])
    assert s.sends == () and s.recvs == () and len(s.local) == 26


def test_split_counts_remote_pairs():
    _, tables = tables_for((8, 4, 4), (2, 1, 1), bc=X_WALLS)
    t = tables[0]
    s = mesh.split_tables(t)
    assert len(s.sends) == len(s.recvs) == t.count(SEND)


@pytest.mark.parametrize("seed", range(5))
def test_split_partition_round_trip(seed):
    _, tables = tables_for((6, 6, 6), (3, 2, 1))
    pool = [e for t in tables.values() for e in t]
    rng = random.Random(seed)
    table = mesh.TransferTable(0, tuple(rng.sample(pool, 20)))
    s = mesh.split_tables(table)
    assert len(s.local) + len(s.sends) + len(s.recvs) == 20
    assert s.merged() == table.entries


# --- binary file ------------------------------------------------------------

def test_empty_table_set_is_header_only(tmp_path):
    path = tmp_path / "t.bin"
    mesh.write_tables({}, path)
    data = path.read_bytes()
    assert len(data) == 16 and data[:4] == mesh.MAGIC
    assert mesh.read_tables(path) == {}


@pytest.mark.parametrize("counts", [(2, 2, 1), (3, 3, 3), (1, 1, 1)])
def test_file_round_trip_is_exact(tmp_path, counts):
    _, tables = tables_for((6, 6, 6), counts)
    path = tmp_path / "t.bin"
    mesh.write_tables(tables, path)
    back = mesh.read_tables(path)
    assert back == tables
    assert mesh.encode_tables(back) == path.read_bytes()


def test_corrupted_magic_reports_offset_zero():
    _, tables = tables_for((4, 4, 4), (2, 1, 1))
    buf = bytearray(mesh.encode_tables(tables))
    buf[0:4] = b"XXXX"
    with pytest.raises(mesh.FormatError) as err:
        mesh.decode_tables(bytes(buf))
    assert err.value.offset == 0


def test_version_mismatch_reports_offset():
    buf = bytearray(mesh.encode_tables({}))
    buf[4] = 9
    with pytest.raises(mesh.FormatError) as err:
        mesh.decode_tables(bytes(buf))
    assert err.value.offset == 4


@settings(max_examples=30, deadline=None)
@given(cut=st.integers(1, 200))
def test_truncated_file_raises_with_offset(cut):
    _, tables = tables_for((4, 4, 4), (2, 1, 1))
    buf = mesh.encode_tables(tables)
    short = buf[:max(0, len(buf) - cut)]
    with pytest.raises(mesh.FormatError) as err:
        mesh.decode_tables(short)
    assert 0 <= err.value.offset <= len(short)


@settings(max_examples=40, deadline=None)
@given(px=st.integers(1, 3), py=st.integers(1, 3), pz=st.integers(1, 3),
       periodic=st.lists(st.booleans(), min_size=3, max_size=3), data=st.data())
def test_pairing_and_round_trip_property(px, py, pz, periodic, data):
    bc = tuple(("periodic", "periodic") if p else ("wall", "wall") for p in periodic)
    nblocks = px * py * pz
    nranks = data.draw(st.integers(1, nblocks))
    _, tables = tables_for((6, 5, 4), (px, py, pz), nranks=nranks, bc=bc)
    assert mesh.check_pairing(tables) == []
    assert mesh.decode_tables(mesh.encode_tables(tables)) == tables


# --- fields -----------------------------------------------------------------

def test_field_generations_never_decrease():
    f = mesh.Field((3, 3, 3))
    f.set_generation((1, 0, 0), 2)
    assert f.generation((1, 0, 0)) == 2
    with pytest.raises(ValueError):
        f.set_generation((1, 0, 0), 1)


def test_field_copy_keeps_generations_and_casts():
    f = mesh.Field.from_interior(np.arange(8.0).reshape(2, 2, 2), name="q")
    f.rounds = 3
    f.ghost_gen[0, 1, 1] = 3
    g = f.copy(np.float32)
    assert g.precision == "single" and g.rounds == 3 and g.ghost_gen[0, 1, 1] == 3
    np.testing.assert_array_equal(g.interior, f.interior)
