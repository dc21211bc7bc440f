"""Functional model of the packed-weight systolic array.

Tiles of up to ``array_cols`` column groups are loaded into the array one at
a time.  Each node holds the payload of one packed cell plus the index (or,
for subword cells, the two indices) selecting which member column's
activation it multiplies.  Partial sums run along array rows into 32-bit
accumulators.

Cycle counts are a first-order proxy, not a timing-accurate model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from tightpack.pack import (SLOT_F, SLOT_H, SLOT_L, SLOT_W, WEIGHT, ArrayGeometry,
                            CorruptionError, PackedMatrix, REPORT_SCHEMA, unpack)
from tightpack.prune import SubwordMatrix

PSUM_BITS = 32
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1


class TileEntry(NamedTuple):
    section: int
    group: int
    column: int   # physical array column


@dataclass(frozen=True)
class Tile:
    entries: tuple[TileEntry, ...]
    folded: bool = False
    width: int = 0   # physical columns spanned

    @property
    def sections(self) -> list[int]:
        return sorted({e.section for e in self.entries})


@dataclass(frozen=True)
class TileSchedule:
    tiles: tuple[Tile, ...]
    geometry: ArrayGeometry
    section_widths: tuple[int, ...] = ()
    n_cols: int = 0   # original columns, for the unpacked baseline

    def __len__(self):
        return len(self.tiles)


def _round_up(x: int, step: int) -> int:
    return -(-x // step) * step


def schedule_tiles(pm: PackedMatrix, geom: ArrayGeometry | None = None,
                   folding: bool = False) -> TileSchedule:
    """Assign every column group to a tile slot.

    Without folding each section gets ``ceil(width / W)`` tiles of its own.
    With folding, a section's leftover groups share a tile with the start of
    the next section: chunks are rounded up to whole subarrays and a tile
    holds at most two sections.
    """
    geom = geom or pm.geometry
    w, sub = geom.array_cols, geom.subarray_cols
    widths = tuple(pm.widths)
    tiles: list[Tile] = []
    if not folding:
        for s, width in enumerate(widths):
            for start in range(0, width, w):
                chunk = range(start, min(start + w, width))
                tiles.append(Tile(tuple(TileEntry(s, g, g - start) for g in chunk),
                                  False, len(chunk)))
        return TileSchedule(tuple(tiles), geom, widths, pm.shape[1])

    entries: list[TileEntry] = []
    used = 0
    owners: list[int] = []

    def close():
        nonlocal entries, used, owners
        if entries:
            tiles.append(Tile(tuple(entries), len(owners) > 1, used))
        entries, used, owners = [], 0, []

    for s, width in enumerate(widths):
        g = 0
        while g < width:
            if used >= w or (len(owners) >= 2 and s not in owners):
                close()
            take = min(w - used, width - g)
            entries.extend(TileEntry(s, g + k, used + k) for k in range(take))
            if s not in owners:
                owners.append(s)
            used += _round_up(take, sub)
            g += take
    close()
    return TileSchedule(tuple(tiles), geom, widths, pm.shape[1])


@dataclass(frozen=True)
class NodeProgram:
    """Per-node payloads of one tile, each array shaped ``(H, tile width)``.

    ``low`` / ``high`` are signed payloads; a weight-mode node keeps its
    whole weight in ``low``.  Indices are member positions inside the
    column group (``-1`` when unused).  ``mod`` is the MAC configuration
    code: 0 for weight mode, 1-3 for the subword formats.
    """

    low: np.ndarray
    high: np.ndarray
    index_l: np.ndarray
    index_h: np.ndarray
    mod: np.ndarray
    active: np.ndarray
    occupants: np.ndarray   # occupants per node (0, 1 or 2)
    l_bits: int = 0


def lower_to_nodes(tile: Tile, pm: PackedMatrix) -> NodeProgram:
    h = pm.geometry.array_rows
    width = max(tile.width, len(tile.entries))
    low = np.zeros((h, width), np.int32)
    high = np.zeros((h, width), np.int32)
    index_l = np.full((h, width), -1, np.int8)
    index_h = np.full((h, width), -1, np.int8)
    count = np.zeros((h, width), np.int8)
    l_bits = pm.fmt.l_bits if pm.fmt is not None else 0
    mod_code = 0 if pm.mode == WEIGHT else pm.fmt.mod
    lo_mask = (1 << l_bits) - 1
    for e in tile.entries:
        group = pm.sections[e.section].groups[e.group]
        for occ in group.occupants:
            r, c = occ.row, e.column
            idx = group.index_of(occ.col_origin)
            count[r, c] += 1
            if count[r, c] > 2:
                raise CorruptionError(f"node ({r}, {c}) has more than two occupants")
            if occ.slot == SLOT_W:
                if pm.mode != WEIGHT or index_l[r, c] >= 0:
                    raise CorruptionError(f"node ({r}, {c}): bad weight occupant")
                low[r, c], index_l[r, c] = occ.value, idx
            elif occ.slot == SLOT_L:
                if index_l[r, c] >= 0:
                    raise CorruptionError(f"node ({r}, {c}): L slot taken twice")
                low[r, c], index_l[r, c] = occ.value, idx
            elif occ.slot == SLOT_H:
                if index_h[r, c] >= 0:
                    raise CorruptionError(f"node ({r}, {c}): H slot taken twice")
                high[r, c], index_h[r, c] = occ.value, idx
            elif occ.slot == SLOT_F:
                if index_l[r, c] >= 0 or index_h[r, c] >= 0:
                    raise CorruptionError(f"node ({r}, {c}): full-precision cell shares a node")
                sign = -1 if occ.value < 0 else 1
                mag = abs(occ.value)
                high[r, c] = sign * (mag >> l_bits)
                low[r, c] = sign * (mag & lo_mask)
                index_l[r, c] = index_h[r, c] = idx
            else:
                raise CorruptionError(f"unknown slot {occ.slot!r}")
    active = count > 0
    mod = np.where(active, mod_code, 0).astype(np.uint8)
    return NodeProgram(low, high, index_l, index_h, mod, active, count, l_bits)


def address_lut(tile: Tile, pm: PackedMatrix) -> np.ndarray:
    """Original input channel for each (array column, member index); -1 if none."""
    width = max(tile.width, len(tile.entries))
    lut = np.full((width, max(pm.geometry.group_max, 1)), -1, np.int64)
    for e in tile.entries:
        members = pm.sections[e.section].groups[e.group].members
        lut[e.column, :len(members)] = members
    return lut


def _row_owner(tile: Tile, width: int) -> np.ndarray:
    owner = np.full(width, -1, np.int64)
    for e in tile.entries:
        owner[e.column] = e.section
    return owner


def simulate_matmul(pm: PackedMatrix, inputs, geom: ArrayGeometry | None = None,
                    schedule: TileSchedule | None = None) -> np.ndarray:
    """Run the packed matrix against ``inputs`` (one row per original column).

    Returns an ``(R, batch)`` int32 array equal to ``dense @ inputs`` where
    ``dense`` is the matrix the packed form represents (subword-reconstructed
    in subword mode).
    """
    x = np.asarray(inputs)
    if x.ndim == 1:
        x = x[:, None]
    rows, cols = pm.shape
    if x.ndim != 2 or x.shape[0] != cols:
        raise ValueError(f"inputs must have {cols} rows, got shape {x.shape}")
    if x.size and (x.min() < -128 or x.max() > 127):
        raise ValueError("activations must be 8-bit signed")
    x = x.astype(np.int64)
    # zero row at index -1 for unused selectors
    xpad = np.vstack([x, np.zeros((1, x.shape[1]), np.int64)])
    schedule = schedule or schedule_tiles(pm, geom)
    out = np.zeros((rows, x.shape[1]), np.int64)
    for tile in schedule.tiles:
        prog = lower_to_nodes(tile, pm)
        lut = address_lut(tile, pm)
        cols_idx = np.arange(lut.shape[0])[None, :]
        chan_l = np.where(prog.index_l >= 0, lut[cols_idx, np.maximum(prog.index_l, 0)], -1)
        chan_h = np.where(prog.index_h >= 0, lut[cols_idx, np.maximum(prog.index_h, 0)], -1)
        prod = (prog.low.astype(np.int64)[:, :, None] * xpad[chan_l]
                + (prog.high.astype(np.int64) << prog.l_bits)[:, :, None] * xpad[chan_h])
        owner = _row_owner(tile, prod.shape[1])
        for s in sorted(set(owner[owner >= 0].tolist())):
            # left-to-right accumulation along each array row
            psum = prod[:, owner == s, :].sum(axis=1)
            row_map = np.array(pm.sections[s].row_map)
            real = row_map >= 0
            out[row_map[real]] += psum[real]
    if out.size and (out.min() < INT32_MIN or out.max() > INT32_MAX):
        raise OverflowError("partial sum exceeds the 32-bit accumulator")
    return out.astype(np.int32)


def dense_reference(pm: PackedMatrix, inputs) -> np.ndarray:
    """Plain matrix product with the weights the packed matrix represents."""
    m = unpack(pm)
    w = m.reconstruct() if isinstance(m, SubwordMatrix) else m.values
    x = np.asarray(inputs, dtype=np.int64)
    if x.ndim == 1:
        x = x[:, None]
    return (w.astype(np.int64) @ x).astype(np.int32)


# ---------------------------------------------------------------------------
# cycle model


@dataclass(frozen=True)
class CycleReport:
    total_cycles: int
    per_layer_cycles: tuple[int, ...]
    active_node_cycles: int
    tile_count: int
    throughput_proxy: float
    energy_proxy: float
    baseline_cycles: int = 0
    baseline_node_cycles: int = 0
    per_tile_cycles: tuple[int, ...] = field(default=(), repr=False)

    def as_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "kind": "cycles",
            "note": "first-order proxies, not timing-accurate",
            "total_cycles": self.total_cycles,
            "per_layer_cycles": list(self.per_layer_cycles),
            "active_node_cycles": self.active_node_cycles,
            "tile_count": self.tile_count,
            "throughput_proxy": self.throughput_proxy,
            "energy_proxy": self.energy_proxy,
            "baseline_cycles": self.baseline_cycles,
            "baseline_node_cycles": self.baseline_node_cycles,
        }


def cycles_per_input(geom: ArrayGeometry) -> int:
    """Cycles between successive activations entering a node.

    Bit-serial shift-in takes ``act_bits`` cycles; the 32-bit accumulation
    is interleaved over ``macs_per_node`` MAC units.
    """
    return max(geom.act_bits, -(-PSUM_BITS // geom.macs_per_node))


def tile_cycles(widths: Sequence[int], n_inputs: int, geom: ArrayGeometry,
                weight_bus_words: int = 32, fold_flags: Sequence[bool] = (),
                fold_penalty: int = 0) -> list[int]:
    """Per-tile cycles with double-buffered weight loading.

    A tile's weight load hides behind the previous tile's compute; only the
    excess is exposed, and the first tile's load is fully exposed.
    """
    h = geom.array_rows
    per_input = cycles_per_input(geom)
    out = []
    prev_compute = 0
    for k, width in enumerate(widths):
        compute = n_inputs * per_input + h + width
        if k < len(fold_flags) and fold_flags[k]:
            compute += fold_penalty
        load = -(-h * width // weight_bus_words)
        exposed = load if k == 0 else max(0, load - prev_compute)
        out.append(compute + exposed)
        prev_compute = compute
    return out


def baseline_widths(n_sections: int, n_cols: int, geom: ArrayGeometry) -> list[int]:
    """Tile widths of the unpacked matrix (one original column per array column)."""
    w = geom.array_cols
    out = []
    for _ in range(n_sections):
        out.extend(min(w, n_cols - start) for start in range(0, n_cols, w))
    return out


def estimate_cycles(ts: TileSchedule, n_inputs: int, geom: ArrayGeometry | None = None,
                    pm: PackedMatrix | None = None, weight_bus_words: int = 32,
                    fold_penalty: int = 0) -> CycleReport:
    """Cycle and activity proxies for one layer.

    ``active_node_cycles`` counts only occupied nodes; node occupancy comes
    from ``pm`` when given, otherwise every scheduled group column is taken
    as fully occupied.  The baseline is the same matrix mapped without
    packing on an array that clocks every node of every tile.
    """
    geom = geom or ts.geometry
    h = geom.array_rows
    widths = [t.width for t in ts.tiles]
    per_tile = tile_cycles(widths, n_inputs, geom, weight_bus_words,
                           [t.folded for t in ts.tiles], fold_penalty)
    total = sum(per_tile)
    per_input = n_inputs * cycles_per_input(geom)
    occupied = 0
    for tile in ts.tiles:
        if pm is not None:
            occupied += int(np.count_nonzero(lower_to_nodes(tile, pm).active))
        else:
            occupied += h * len(tile.entries)
    active = occupied * per_input

    base_w = baseline_widths(len(ts.section_widths), ts.n_cols, geom)
    base_total = sum(tile_cycles(base_w, n_inputs, geom, weight_bus_words))
    base_nodes = h * sum(base_w) * per_input
    return CycleReport(
        total_cycles=total,
        per_layer_cycles=(total,),
        active_node_cycles=active,
        tile_count=len(ts.tiles),
        throughput_proxy=base_total / total if total else 0.0,
        energy_proxy=active / base_nodes if base_nodes else 0.0,
        baseline_cycles=base_total,
        baseline_node_cycles=base_nodes,
        per_tile_cycles=tuple(per_tile),
    )


def write_layer_csv(path, names: Sequence[str], reports: Sequence[CycleReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "cycles"])
        for name, rep in zip(names, reports):
            writer.writerow([name, rep.total_cycles])
