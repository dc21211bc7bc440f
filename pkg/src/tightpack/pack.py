"""Row-section partitioning and conflict-aware column packing.

A weight matrix is cut into row sections as tall as the systolic array.
Inside each section, columns are merged into groups of at most ``G``
original columns so long as no two members occupy the same slot of the same
row.  In weight mode a nonzero weight fills its whole cell; in subword mode a
cell has an L slot and an H slot, and a full-precision weight fills both.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from tightpack import _kernels
from tightpack.prune import FULL, HIGH, LOW, SubwordFormat, SubwordMatrix
from tightpack.tensorio import WeightMatrix

WEIGHT = "weight"
SUBWORD = "subword"

PACKED_SCHEMA = "tightpack-packed/1"
REPORT_SCHEMA = "tightpack-report/1"

# slot tags of an occupant: whole cell, low field, high field, full precision
SLOT_W, SLOT_L, SLOT_H, SLOT_F = "W", "L", "H", "F"
_USES_LO = {SLOT_W: True, SLOT_L: True, SLOT_H: False, SLOT_F: True}
_USES_HI = {SLOT_W: True, SLOT_L: False, SLOT_H: True, SLOT_F: True}


class CorruptionError(RuntimeError):
    """A packed matrix violates slot or provenance invariants."""


@dataclass(frozen=True)
class ArrayGeometry:
    array_rows: int = 32
    array_cols: int = 32
    group_max: int = 16
    subarray_cols: int = 8
    macs_per_node: int = 4
    act_bits: int = 8

    def __post_init__(self):
        for name in ("array_rows", "array_cols", "group_max", "subarray_cols",
                     "macs_per_node", "act_bits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.index_bits > 4:
            raise ValueError(f"group_max={self.group_max} needs more than 4 index bits")
        if self.array_cols % self.subarray_cols:
            raise ValueError("array_cols must be divisible by subarray_cols")

    @property
    def index_bits(self) -> int:
        return math.ceil(math.log2(self.group_max)) if self.group_max > 1 else 0

    @property
    def tile_cells(self) -> int:
        return self.array_rows * self.array_cols

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Occupant(NamedTuple):
    row: int          # row position inside the section
    col_origin: int   # original column index
    slot: str
    value: int        # signed payload: weight, or signed subword field


@dataclass(frozen=True)
class ColumnGroup:
    members: tuple[int, ...]
    occupants: tuple[Occupant, ...] = ()

    def index_of(self, col: int) -> int:
        return self.members.index(col)

    def cells(self, height: int) -> list[list[Occupant]]:
        out: list[list[Occupant]] = [[] for _ in range(height)]
        for occ in self.occupants:
            out[occ.row].append(occ)
        return out

    @property
    def slot_count(self) -> int:
        """Occupied slots, counting a whole-cell occupant as two."""
        return sum(_USES_LO[o.slot] + _USES_HI[o.slot] for o in self.occupants)


@dataclass(frozen=True)
class Section:
    row_map: tuple[int, ...]   # original row per position, -1 for padding
    groups: tuple[ColumnGroup, ...]

    @property
    def width(self) -> int:
        return len(self.groups)


@dataclass(frozen=True)
class CompressionReport:
    original_size: int
    packed_size: int
    compression_rate: float
    density: float
    tile_count: int
    nonzeros: int
    section_widths: tuple[int, ...]
    section_rates: tuple[float, ...]
    mode: str

    def as_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "kind": "compression",
            "mode": self.mode,
            "original_size": self.original_size,
            "packed_size": self.packed_size,
            "compression_rate": self.compression_rate,
            "density": self.density,
            "tile_count": self.tile_count,
            "nonzeros": self.nonzeros,
            "section_widths": list(self.section_widths),
            "section_rates": list(self.section_rates),
        }


@dataclass(frozen=True)
class PackedMatrix:
    geometry: ArrayGeometry
    sections: tuple[Section, ...]
    mode: str
    shape: tuple[int, int]
    fmt: Optional[SubwordFormat] = None
    scale: float = 1.0
    name: str = ""
    permutation: object = field(default=None, compare=False, repr=False)

    @property
    def widths(self) -> list[int]:
        return [s.width for s in self.sections]

    @property
    def total_width(self) -> int:
        return sum(self.widths)

    @cached_property
    def report(self) -> CompressionReport:
        return compression_report(self)

    def groups(self):
        for s, sec in enumerate(self.sections):
            for j, g in enumerate(sec.groups):
                yield s, j, g


# ---------------------------------------------------------------------------
# cell sources


class CellSource(NamedTuple):
    """Per-cell slot usage and payload of a matrix being packed."""
    mode: str
    lo: np.ndarray      # bool (R, C)
    hi: np.ndarray      # bool (R, C)
    slot: np.ndarray    # object-free code array: 0 none, 1 W, 2 L, 3 H, 4 F
    value: np.ndarray   # int32 payload
    fmt: Optional[SubwordFormat]
    shape: tuple[int, int]
    scale: float
    name: str


_SLOT_CODES = (None, SLOT_W, SLOT_L, SLOT_H, SLOT_F)


def cell_source(m: Union[WeightMatrix, SubwordMatrix]) -> CellSource:
    if isinstance(m, SubwordMatrix):
        cls = m.classes
        lo = (cls == LOW) | (cls == FULL)
        hi = (cls == HIGH) | (cls == FULL)
        slot = np.zeros(cls.shape, np.uint8)
        slot[cls == LOW] = 2
        slot[cls == HIGH] = 3
        slot[cls == FULL] = 4
        value = m.signs.astype(np.int32) * m.mags.astype(np.int32)
        return CellSource(SUBWORD, lo, hi, slot, value, m.fmt, m.shape, m.scale, m.name)
    if isinstance(m, WeightMatrix):
        nz = m.values != 0
        slot = np.where(nz, 1, 0).astype(np.uint8)
        return CellSource(WEIGHT, nz, nz.copy(), slot, m.values.astype(np.int32),
                          None, m.shape, m.scale, m.name)
    raise TypeError(f"cannot pack {type(m).__name__}")


def words_for(height: int) -> int:
    return max(1, -(-height // 64))


def section_count(rows: int, height: int) -> int:
    return max(1, -(-rows // height))


def column_occupants(src: CellSource, row_map: Sequence[int], col: int) -> tuple[Occupant, ...]:
    out = []
    for p, r in enumerate(row_map):
        if r < 0:
            continue
        code = src.slot[r, col]
        if code:
            out.append(Occupant(p, col, _SLOT_CODES[code], int(src.value[r, col])))
    return tuple(out)


def build_section(src: CellSource, row_map: Sequence[int], order: Sequence[int],
                  owner: np.ndarray | None = None, rank: np.ndarray | None = None) -> Section:
    """Assemble a section from a column order and (optionally) kernel output."""
    row_map = tuple(int(r) for r in row_map)
    singles = [ColumnGroup((int(c),), column_occupants(src, row_map, int(c))) for c in order]
    if owner is None:
        return Section(row_map, tuple(singles))
    return Section(row_map, tuple(_merge_by_owner(singles, owner, rank)))


def _merge_by_owner(groups: Sequence[ColumnGroup], owner, rank) -> list[ColumnGroup]:
    heads: dict[int, list[tuple[int, int]]] = {}
    for pos in range(len(groups)):
        heads.setdefault(int(owner[pos]), []).append((int(rank[pos]), pos))
    out = []
    for head in sorted(heads):
        parts = [groups[pos] for _, pos in sorted(heads[head])]
        members = tuple(c for g in parts for c in g.members)
        occupants = tuple(sorted((o for g in parts for o in g.occupants),
                                 key=lambda o: (o.row, o.slot != SLOT_L, o.col_origin)))
        out.append(ColumnGroup(members, occupants))
    return out


# ---------------------------------------------------------------------------
# partition / pack


def partition_sections(m: Union[WeightMatrix, SubwordMatrix], geom: ArrayGeometry) -> PackedMatrix:
    """Split ``m`` into row sections of ``geom.array_rows`` rows, one column per group."""
    src = cell_source(m)
    rows, cols = src.shape
    h = geom.array_rows
    sections = []
    for s in range(section_count(rows, h)):
        row_map = [r if r < rows else -1 for r in range(s * h, (s + 1) * h)]
        sections.append(build_section(src, row_map, range(cols)))
    return PackedMatrix(geom, tuple(sections), src.mode, (rows, cols), src.fmt, src.scale, src.name)


def group_masks(groups: Sequence[ColumnGroup], height: int):
    nw = words_for(height)
    lo = np.zeros((len(groups), nw), np.uint64)
    hi = np.zeros((len(groups), nw), np.uint64)
    for j, g in enumerate(groups):
        for o in g.occupants:
            bit = np.uint64(1) << np.uint64(o.row % 64)
            if _USES_LO[o.slot]:
                lo[j, o.row // 64] |= bit
            if _USES_HI[o.slot]:
                hi[j, o.row // 64] |= bit
    return lo, hi


def can_merge(a: ColumnGroup, b: ColumnGroup, mode: str, group_max: int) -> bool:
    if len(a.members) + len(b.members) > group_max:
        return False
    taken = set()
    for o in a.occupants:
        taken.update(_slots_of(o, mode))
    return not any(s in taken for o in b.occupants for s in _slots_of(o, mode))


def _slots_of(o: Occupant, mode: str):
    if _USES_LO[o.slot]:
        yield (o.row, SLOT_L)
    if _USES_HI[o.slot]:
        yield (o.row, SLOT_H)


def pack_section(section: Section, group_max: int, mode: str = WEIGHT) -> list[ColumnGroup]:
    """Greedy densest-merge packing of one row section.

    Groups are visited left to right.  The current group absorbs, one at a
    time, the later group that fits without a slot clash and leaves the
    fewest empty slots, preferring the leftmost on ties, until nothing fits
    or it holds ``group_max`` columns.
    """
    groups = list(section.groups)
    if not groups:
        return [ColumnGroup(())]
    lo, hi = group_masks(groups, len(section.row_map))
    weight = _kernels.slot_weights(lo, hi)
    size = np.array([len(g.members) for g in groups], np.int64)
    _, owner, rank = _kernels.greedy_pack(lo, hi, weight, size, group_max,
                                           len(section.row_map))
    return _merge_by_owner(groups, owner, rank)


def pack_matrix(pm: PackedMatrix, group_max: int | None = None) -> PackedMatrix:
    g = pm.geometry.group_max if group_max is None else group_max
    sections = tuple(Section(sec.row_map, tuple(pack_section(sec, g, pm.mode)))
                     for sec in pm.sections)
    return PackedMatrix(pm.geometry, sections, pm.mode, pm.shape, pm.fmt, pm.scale, pm.name,
                        pm.permutation)


def pack(m: Union[WeightMatrix, SubwordMatrix], geom: ArrayGeometry) -> PackedMatrix:
    """Partition and pack without permutation (the greedy baseline)."""
    return pack_matrix(partition_sections(m, geom))


# ---------------------------------------------------------------------------
# verification


def check_slots(pm: PackedMatrix) -> None:
    """Raise :class:`CorruptionError` unless every group obeys slot limits."""
    h = pm.geometry.array_rows
    allowed = {SLOT_W} if pm.mode == WEIGHT else {SLOT_L, SLOT_H, SLOT_F}
    for s, j, g in pm.groups():
        if len(g.members) > pm.geometry.group_max:
            raise CorruptionError(f"section {s} group {j}: {len(g.members)} members")
        if len(set(g.members)) != len(g.members):
            raise CorruptionError(f"section {s} group {j}: repeated member")
        used = set()
        for o in g.occupants:
            if o.slot not in allowed:
                raise CorruptionError(f"section {s} group {j}: slot {o.slot!r} in {pm.mode} mode")
            if not 0 <= o.row < h:
                raise CorruptionError(f"section {s} group {j}: row {o.row} out of range")
            if o.col_origin not in g.members:
                raise CorruptionError(f"section {s} group {j}: column {o.col_origin} not a member")
            for key in _slots_of(o, pm.mode):
                if key in used:
                    raise CorruptionError(f"section {s} group {j}: slot clash at row {o.row}")
                used.add(key)
    cols = pm.shape[1]
    for s, sec in enumerate(pm.sections):
        members = sorted(c for g in sec.groups for c in g.members)
        if members != list(range(cols)):
            raise CorruptionError(f"section {s}: members do not cover the {cols} columns once each")


def unpack(pm: PackedMatrix) -> Union[WeightMatrix, SubwordMatrix]:
    """Rebuild the pre-packing matrix from occupant provenance."""
    check_slots(pm)
    rows, cols = pm.shape
    seen = np.zeros((rows, cols), bool)
    values = np.zeros((rows, cols), np.int32)
    classes = np.zeros((rows, cols), np.uint8)
    code = {SLOT_W: 0, SLOT_L: LOW, SLOT_H: HIGH, SLOT_F: FULL}
    for s, j, g in pm.groups():
        row_map = pm.sections[s].row_map
        for o in g.occupants:
            if not 0 <= o.row < len(row_map) or row_map[o.row] < 0:
                raise CorruptionError(f"section {s} group {j}: occupant on padding row {o.row}")
            if o.col_origin not in g.members or not 0 <= o.col_origin < cols:
                raise CorruptionError(f"section {s} group {j}: bad column {o.col_origin}")
            r = row_map[o.row]
            if seen[r, o.col_origin]:
                raise CorruptionError(f"provenance collision at ({r}, {o.col_origin})")
            seen[r, o.col_origin] = True
            values[r, o.col_origin] = o.value
            classes[r, o.col_origin] = code[o.slot]
    if pm.mode == WEIGHT:
        return WeightMatrix(values, scale=pm.scale, name=pm.name)
    return SubwordMatrix(pm.fmt, classes, np.sign(values), np.abs(values),
                         scale=pm.scale, name=pm.name)


def nonzero_count(pm: PackedMatrix) -> int:
    return sum(len(g.occupants) for _, _, g in pm.groups())


def compression_report(pm: PackedMatrix) -> CompressionReport:
    h, w = pm.geometry.array_rows, pm.geometry.array_cols
    rows, cols = pm.shape
    widths = pm.widths
    packed = h * sum(widths)
    nnz = nonzero_count(pm)
    return CompressionReport(
        original_size=rows * cols,
        packed_size=packed,
        compression_rate=(rows * cols) / packed if packed else 0.0,
        density=nnz / packed if packed else 0.0,
        tile_count=sum(-(-wd // w) for wd in widths),
        nonzeros=nnz,
        section_widths=tuple(widths),
        section_rates=tuple(cols / wd if wd else 0.0 for wd in widths),
        mode=pm.mode,
    )


# ---------------------------------------------------------------------------
# JSON


def packed_to_json(pm: PackedMatrix) -> dict:
    return {
        "schema": PACKED_SCHEMA,
        "name": pm.name,
        "mode": pm.mode,
        "rows": pm.shape[0],
        "cols": pm.shape[1],
        "scale": pm.scale,
        "format": None if pm.fmt is None else {"h_bits": pm.fmt.h_bits, "l_bits": pm.fmt.l_bits},
        "geometry": pm.geometry.as_dict(),
        "sections": [
            {
                "row_map": list(sec.row_map),
                "groups": [
                    {
                        "members": list(g.members),
                        "cells": [{"row": o.row, "col_origin": o.col_origin,
                                   "slot": o.slot, "value": o.value} for o in g.occupants],
                    }
                    for g in sec.groups
                ],
            }
            for sec in pm.sections
        ],
    }


def packed_from_json(doc: dict) -> PackedMatrix:
    if doc.get("schema") != PACKED_SCHEMA:
        raise ValueError(f"unsupported packed schema {doc.get('schema')!r}")
    fmt = doc.get("format")
    sections = tuple(
        Section(tuple(sec["row_map"]),
                tuple(ColumnGroup(tuple(g["members"]),
                                  tuple(Occupant(c["row"], c["col_origin"], c["slot"], c["value"])
                                        for c in g["cells"]))
                      for g in sec["groups"]))
        for sec in doc["sections"]
    )
    return PackedMatrix(ArrayGeometry(**doc["geometry"]), sections, doc["mode"],
                        (doc["rows"], doc["cols"]),
                        None if fmt is None else SubwordFormat(**fmt),
                        float(doc["scale"]), doc.get("name", ""))


def dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def save_packed(pm: PackedMatrix, path) -> None:
    Path(path).write_text(dump_json(packed_to_json(pm)))


def load_packed(path) -> PackedMatrix:
    return packed_from_json(json.loads(Path(path).read_text()))
