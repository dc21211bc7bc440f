import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tightpack import (ArrayGeometry, ColumnGroup, SubwordFormat, WeightMatrix, pack,
                       pack_matrix, pack_section, partition_sections, quantize8, subword_prune,
                       unpack)
from tightpack.pack import (SUBWORD, WEIGHT, CorruptionError, Occupant, PackedMatrix, Section,
                            can_merge, check_slots, compression_report, load_packed,
                            packed_from_json, packed_to_json, save_packed)

import oracles
from conftest import lognormal_weights, random_weights

F44 = SubwordFormat.from_label("4,4")


def _geom(h, g=4, w=None):
    w = w or h
    return ArrayGeometry(array_rows=h, array_cols=w, group_max=g, subarray_cols=w)


def _as_oracle(groups):
    out = []
    for g in groups:
        slots = set()
        for o in g.occupants:
            if o.slot in ("W", "F", "L"):
                slots.add((o.row, "lo"))
            if o.slot in ("W", "F", "H"):
                slots.add((o.row, "hi"))
        out.append((list(g.members), slots))
    return out


# -- partitioning ----------------------------------------------------------

@pytest.mark.parametrize("rows,h,n", [(8, 4, 2), (5, 4, 2), (512, 32, 16)])
def test_section_counts(rows, h, n):
    pm = partition_sections(WeightMatrix(np.zeros((rows, 3), np.int8)), _geom(h))
    assert len(pm.sections) == n
    assert all(len(s.row_map) == h for s in pm.sections)


def test_last_section_padding():
    pm = partition_sections(WeightMatrix(np.ones((5, 2), np.int8)), _geom(4))
    assert pm.sections[1].row_map == (4, -1, -1, -1)


def test_geometry_rejects_wide_groups():
    with pytest.raises(ValueError):
        ArrayGeometry(group_max=17)
    with pytest.raises(ValueError):
        ArrayGeometry(array_cols=30, subarray_cols=8)


# -- merging ---------------------------------------------------------------

def test_can_merge_disjoint_and_conflict():
    a = ColumnGroup((0,), (Occupant(0, 0, "W", 3),))
    b = ColumnGroup((1,), (Occupant(1, 1, "W", 4),))
    c = ColumnGroup((2,), (Occupant(0, 2, "W", 5),))
    assert can_merge(a, b, WEIGHT, 4)
    assert not can_merge(a, c, WEIGHT, 4)
    assert not can_merge(a, b, WEIGHT, 1)


def test_can_merge_low_with_high():
    a = ColumnGroup((0,), (Occupant(0, 0, "L", 5),))
    b = ColumnGroup((3,), (Occupant(0, 3, "H", 6),))
    full = ColumnGroup((4,), (Occupant(0, 4, "F", 23),))
    assert can_merge(a, b, SUBWORD, 4)
    assert not can_merge(a, full, SUBWORD, 4)
    assert not can_merge(b, full, SUBWORD, 4)


def test_pairwise_conflicting_columns_stay_single():
    m = WeightMatrix(np.ones((4, 4), np.int8))
    pm = pack(m, _geom(4))
    assert pm.widths == [4]


def test_disjoint_rows_pack_into_one():
    m = WeightMatrix(np.eye(4, dtype=np.int8))
    pm = pack(m, _geom(4))
    assert pm.widths == [1]
    assert pm.sections[0].groups[0].members == (0, 1, 2, 3)


def test_random_4x6_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(30):
        m = random_weights(rng, 4, 6, 0.35)
        pm = pack(m, _geom(4, g=3))
        occ = m.values != 0
        expect = oracles.section_groups(occ, [0, 1, 2, 3], range(6), 3)
        assert _as_oracle(pm.sections[0].groups) == expect


def test_wide_section_matches_oracle():
    rng = np.random.default_rng(6)
    m = random_weights(rng, 32, 512, 0.067)
    pm = pack(m, ArrayGeometry())
    expect = oracles.section_groups(m.values != 0, list(range(32)), range(512), 16)
    assert _as_oracle(pm.sections[0].groups) == expect


def test_subword_section_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        sw = subword_prune(quantize8(lognormal_weights(rng, 8, 10, 0.4)), F44, 0.3)
        pm = pack(sw, _geom(8, g=4))
        expect = oracles.section_groups(sw.classes, list(range(8)), range(10), 4, subword=True)
        assert _as_oracle(pm.sections[0].groups) == expect


def test_crossed_identity_widths(crossed_matrix, crossed_geom):
    occ = crossed_matrix.values != 0
    for a, b in itertools.combinations(range(4), 2):
        assert (occ[:, a] & occ[:, b]).any()
    pm = pack(crossed_matrix, crossed_geom)
    assert crossed_matrix.stats().nonzeros == 15
    assert pm.widths == [3, 3]


def test_crossed_row_swap_widths(crossed_matrix, crossed_geom):
    rows = list(range(8))
    rows[2], rows[6] = rows[6], rows[2]
    occ = crossed_matrix.values != 0
    assert oracles.matrix_widths(occ, 4, 4, rows=rows) == [2, 3]
    cols = [[0, 1, 2, 3], [1, 0, 2, 3]]
    assert oracles.matrix_widths(occ, 4, 4, rows=rows, col_orders=cols) == [2, 2]
    # packed size 4*(2+3) against the unpacked 4*(4+4)
    assert 1 - (2 + 3) / 8 == 0.375


def test_all_zero_matrix_single_group_per_section():
    pm = pack(WeightMatrix(np.zeros((8, 4), np.int8)), _geom(4))
    assert pm.widths == [1, 1]
    assert pm.report.density == 0.0


def test_all_zero_columns_split_by_group_budget():
    pm = pack(WeightMatrix(np.zeros((4, 10), np.int8)), _geom(4, g=4))
    assert pm.widths == [3]


def test_empty_section_emits_one_group():
    assert len(pack_section(Section((0, 1), ()), 4)) == 1


# -- unpack / provenance ---------------------------------------------------

def test_round_trip_both_modes():
    rng = np.random.default_rng(8)
    for _ in range(20):
        m = quantize8(lognormal_weights(rng, 13, 17, 0.3))
        geom = _geom(4, g=4, w=8)
        assert unpack(pack(m, geom)) == m
        sw = subword_prune(m, F44, 0.25)
        assert unpack(pack(sw, geom)) == sw


def test_unpacked_identity_layout():
    m = random_weights(np.random.default_rng(9), 6, 5, 0.5)
    pm = partition_sections(m, _geom(4))
    assert unpack(pm) == m
    check_slots(pm)


def test_tampered_duplicate_provenance():
    m = WeightMatrix(np.eye(4, dtype=np.int8))
    pm = pack(m, _geom(4))
    g = pm.sections[0].groups[0]
    # same (row, column) recorded twice, in two different groups
    dup = ColumnGroup((), (g.occupants[0],))
    tampered = PackedMatrix(pm.geometry, (Section(pm.sections[0].row_map, (g, dup)),),
                            pm.mode, pm.shape)
    with pytest.raises(CorruptionError):
        unpack(tampered)
    clash = ColumnGroup(g.members, g.occupants + (g.occupants[0]._replace(row=1),))
    tampered = PackedMatrix(pm.geometry, (Section(pm.sections[0].row_map, (clash,)),),
                            pm.mode, pm.shape)
    with pytest.raises(CorruptionError, match="clash"):
        check_slots(tampered)


def test_occupant_on_padding_row_is_corrupt():
    m = WeightMatrix(np.ones((1, 1), np.int8))
    pm = pack(m, _geom(4))
    g = pm.sections[0].groups[0]
    moved = ColumnGroup(g.members, (g.occupants[0]._replace(row=3),))
    tampered = PackedMatrix(pm.geometry, (Section(pm.sections[0].row_map, (moved,)),),
                            pm.mode, pm.shape)
    with pytest.raises(CorruptionError, match="padding"):
        unpack(tampered)


def test_json_round_trip(tmp_path):
    sw = subword_prune(quantize8(lognormal_weights(np.random.default_rng(2), 9, 7, 0.4)),
                       F44, 0.3)
    pm = pack(sw, _geom(4))
    save_packed(pm, tmp_path / "p.json")
    back = load_packed(tmp_path / "p.json")
    assert back == pm
    assert packed_to_json(back) == json.loads((tmp_path / "p.json").read_text())
    with pytest.raises(ValueError):
        packed_from_json({"schema": "other"})


# -- compression metrics ---------------------------------------------------

def _synthetic(widths, rows, cols, h=32, w=32):
    geom = ArrayGeometry(array_rows=h, array_cols=w)
    sections = tuple(Section(tuple(range(h)), tuple(ColumnGroup(()) for _ in range(wd)))
                     for wd in widths)
    return PackedMatrix(geom, sections, WEIGHT, (rows, cols))


def test_rate_formula_layer_shape():
    widths = [50] * 15 + [47]
    assert sum(widths) == 797
    rep = compression_report(_synthetic(widths, 512, 512))
    assert rep.compression_rate == pytest.approx(512 * 512 / (32 * 797))
    assert round(rep.compression_rate, 2) == 10.28
    assert rep.tile_count == 15 * 2 + 2


def test_section_rate_61_groups():
    rep = compression_report(_synthetic([61], 32, 512))
    assert round(rep.section_rates[0], 1) == 8.4


def test_unpacked_rate_is_one():
    m = random_weights(np.random.default_rng(1), 64, 64, 0.2)
    rep = partition_sections(m, _geom(32)).report
    assert rep.compression_rate == 1.0
    assert rep.density == pytest.approx(m.stats().density)


def test_subword_density_can_exceed_one():
    # L and H halves of two columns interleave into one fully used column
    m = WeightMatrix(np.array([[5, 80], [90, 3], [7, 64], [100, 1]], np.int8))
    pm = pack(subword_prune(m, F44, 0.3), _geom(4))
    assert pm.widths == [1]
    assert pm.report.density == 2.0


# -- properties ------------------------------------------------------------

shapes = st.tuples(st.integers(1, 20), st.integers(1, 20))


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), shape=shapes, density=st.floats(0.0, 0.8),
       h=st.sampled_from([2, 4, 8]), g=st.integers(1, 8), subword=st.booleans())
def test_pack_invariants(seed, shape, density, h, g, subword):
    rng = np.random.default_rng(seed)
    m = quantize8(lognormal_weights(rng, *shape, density))
    src = subword_prune(m, F44, 0.3) if subword else m
    geom = ArrayGeometry(array_rows=h, array_cols=8, group_max=g, subarray_cols=8)
    pm = pack(src, geom)
    check_slots(pm)
    assert unpack(pm) == src
    if not subword:
        for sec in pm.sections:
            for grp in sec.groups:
                assert len({o.row for o in grp.occupants}) == len(grp.occupants)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), g=st.integers(2, 6))
def test_merges_never_lower_density(seed, g):
    # the greedy choice leaves the fewest empty slots, so each absorbed
    # column is at least as full as the ones absorbed after it
    rng = np.random.default_rng(seed)
    m = random_weights(rng, 8, 24, 0.2)
    for grp in pack(m, _geom(8, g=g)).sections[0].groups:
        counts = [sum(o.col_origin == c for o in grp.occupants) for c in grp.members[1:]]
        assert counts == sorted(counts, reverse=True)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_sections_pack_independently(seed):
    rng = np.random.default_rng(seed)
    m = random_weights(rng, 12, 10, 0.3)
    geom = _geom(4)
    base = pack(m, geom)
    order = [8, 9, 10, 11, 0, 1, 2, 3, 4, 5, 6, 7]
    swapped = pack(WeightMatrix(m.values[order]), geom)
    assert [s.groups for s in swapped.sections] == [base.sections[k].groups for k in (2, 0, 1)]


def test_pack_matrix_repack_is_stable():
    m = random_weights(np.random.default_rng(12), 16, 40, 0.1)
    pm = pack(m, _geom(8, g=8))
    assert pack_matrix(pm).widths == pm.widths
