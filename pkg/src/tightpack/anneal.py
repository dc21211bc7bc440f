"""Simulated-annealing search over row placement and per-section column order.

The search state assigns every original row to a (section, position) slot
and gives each section its own column order.  A move either swaps two row
slots (possibly across sections) or swaps two columns inside one section.
The energy of a state is the packed size plus a penalty per weight tile::

    E = H * sum(widths) + H * W * sum(ceil(width / W))

Only the sections touched by a move are re-packed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import IO, NamedTuple, Optional, Sequence, Union

import numpy as np

from tightpack import _kernels
from tightpack.pack import (ArrayGeometry, CellSource, PackedMatrix, Section, build_section,
                            cell_source, pack_section, section_count, words_for)
from tightpack.prune import SubwordMatrix
from tightpack.tensorio import WeightMatrix

ROW, COL, NOOP = "row", "col", "none"


@dataclass(frozen=True)
class AnnealConfig:
    t_init: Optional[float] = None
    t_end: float = 1e-5
    cooling: float = 0.01
    iters_per_temp: int = 15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.cooling < 1.0:
            raise ValueError("cooling factor must be in (0, 1)")
        if self.iters_per_temp < 1:
            raise ValueError("iters_per_temp must be positive")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if self.t_init is not None and self.t_init <= self.t_end:
            raise ValueError("t_init must exceed t_end")

    def initial_temperature(self, n_cols: int) -> float:
        return self.t_init if self.t_init is not None else auto_t_init(n_cols)


def auto_t_init(n_cols: int) -> float:
    """1000 up to 128 columns, 3000 from 1024 columns, linear in between."""
    if n_cols <= 128:
        return 1000.0
    if n_cols >= 1024:
        return 3000.0
    return 1000.0 + 2000.0 * (n_cols - 128) / (1024 - 128)


def cooling_events(t_init: float, t_end: float, cooling: float) -> int:
    """Number of cooling events before the temperature drops to ``t_end``."""
    k = 0
    while t_init * (1.0 - cooling) ** k > t_end:
        k += 1
    return k


# ---------------------------------------------------------------------------
# energy


@dataclass(frozen=True)
class EnergyDelta:
    delta_size: int
    delta_tiles: int
    total: int


def tiles_of(widths: Sequence[int], geom: ArrayGeometry) -> int:
    w = geom.array_cols
    return sum(-(-x // w) for x in widths)


def energy(widths: Sequence[int], geom: ArrayGeometry) -> int:
    h, w = geom.array_rows, geom.array_cols
    return h * sum(widths) + h * w * tiles_of(widths, geom)


def delta_energy(before: Sequence[int], after: Sequence[int], geom: ArrayGeometry) -> EnergyDelta:
    if len(before) != len(after):
        raise ValueError("width lists must cover the same sections")
    h, w = geom.array_rows, geom.array_cols
    d_size = h * (sum(after) - sum(before))
    d_tiles = tiles_of(after, geom) - tiles_of(before, geom)
    return EnergyDelta(d_size, d_tiles, d_size + d_tiles * h * w)


# ---------------------------------------------------------------------------
# state and moves


class Move(NamedTuple):
    kind: str
    a: int = 0        # row: first slot;  col: first position
    b: int = 0        # row: second slot; col: second position
    section: int = 0  # col moves only


@dataclass(frozen=True)
class PermutationState:
    """Row slots and per-section column orders.

    ``slots[s * height + p]`` is the original row at position ``p`` of section
    ``s`` (``-1`` for padding).
    """

    slots: tuple[int, ...]
    col_orders: tuple[tuple[int, ...], ...]
    height: int

    @classmethod
    def identity(cls, rows: int, cols: int, height: int) -> "PermutationState":
        n_sec = section_count(rows, height)
        slots = tuple(r if r < rows else -1 for r in range(n_sec * height))
        return cls(slots, tuple(tuple(range(cols)) for _ in range(n_sec)), height)

    @property
    def n_sections(self) -> int:
        return len(self.col_orders)

    @property
    def n_cols(self) -> int:
        return len(self.col_orders[0]) if self.col_orders else 0

    def section_rows(self, s: int) -> tuple[int, ...]:
        return self.slots[s * self.height:(s + 1) * self.height]

    def row_assign(self) -> dict[int, tuple[int, int]]:
        return {r: divmod(i, self.height) for i, r in enumerate(self.slots) if r >= 0}

    def apply(self, move: Move) -> "PermutationState":
        if move.kind == ROW:
            slots = list(self.slots)
            slots[move.a], slots[move.b] = slots[move.b], slots[move.a]
            return replace(self, slots=tuple(slots))
        if move.kind == COL:
            order = list(self.col_orders[move.section])
            order[move.a], order[move.b] = order[move.b], order[move.a]
            orders = list(self.col_orders)
            orders[move.section] = tuple(order)
            return replace(self, col_orders=tuple(orders))
        return self

    def validate(self, rows: int) -> None:
        real = sorted(r for r in self.slots if r >= 0)
        if real != list(range(rows)) or len(self.slots) != self.n_sections * self.height:
            raise ValueError("row slots are not a bijection")
        for order in self.col_orders:
            if sorted(order) != list(range(self.n_cols)):
                raise ValueError("column order is not a permutation")

    def as_json(self) -> dict:
        return {"height": self.height, "slots": list(self.slots),
                "col_orders": [list(o) for o in self.col_orders]}


def _is_noop(kind, a, b, slots) -> bool:
    if a == b:
        return True
    return kind == ROW and slots[a] < 0 and slots[b] < 0


def sample_move(slots, n_sections: int, height: int, n_cols: int,
                rng: np.random.Generator) -> Move:
    """Draw one row or column swap.

    A swap that would leave the state unchanged is redrawn once and then
    allowed through as a no-op proposal.
    """
    can_row, can_col = n_sections > 1, n_cols > 1
    if not (can_row or can_col):
        return Move(NOOP)
    if can_row and can_col:
        kind = ROW if rng.random() < 0.5 else COL
    else:
        kind = ROW if can_row else COL
    section = 0
    if kind == COL:
        section = int(rng.integers(n_sections))
    span = n_sections * height if kind == ROW else n_cols
    for _ in range(2):
        a, b = (int(x) for x in rng.integers(span, size=2))
        if not _is_noop(kind, a, b, slots):
            break
    return Move(kind, a, b, section)


def neighbor_state(s: PermutationState, rng: np.random.Generator) -> PermutationState:
    move = sample_move(s.slots, s.n_sections, s.height, s.n_cols, rng)
    return s.apply(move)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# incremental re-packing


class SectionCache:
    """Mutable mirror of a permutation state with per-section packing results.

    Column bitmasks are kept in each section's working column order, so a
    column swap is two row swaps of the mask arrays and a row swap rewrites a
    single bit position in two sections.
    """

    def __init__(self, src: CellSource, geom: ArrayGeometry, state: PermutationState):
        self.src = src
        self.geom = geom
        self.height = geom.array_rows
        self.nw = words_for(self.height)
        self.slots = np.array(state.slots, np.int64)
        self.orders = [np.array(o, np.int64) for o in state.col_orders]
        self.n_sections = len(self.orders)
        self.n_cols = src.shape[1]
        self.lo, self.hi, self.weight = [], [], []
        for s in range(self.n_sections):
            lo, hi, wt = self._masks(s)
            self.lo.append(lo)
            self.hi.append(hi)
            self.weight.append(wt)
        self.size = np.ones(self.n_cols, np.int64)
        self.widths = [self._width(s) for s in range(self.n_sections)]
        self.repacked = 0
        self._pending = None

    def _masks(self, s):
        rows = self.slots[s * self.height:(s + 1) * self.height]
        lo = _kernels.column_masks(self.src.lo, rows, self.orders[s], self.nw)
        hi = _kernels.column_masks(self.src.hi, rows, self.orders[s], self.nw)
        return lo, hi, _kernels.slot_weights(lo, hi)

    def _width(self, s, lo=None, hi=None, weight=None) -> int:
        if self.n_cols == 0:
            return 1
        return int(_kernels.greedy_width(self.lo[s] if lo is None else lo,
                                         self.hi[s] if hi is None else hi,
                                         self.weight[s] if weight is None else weight,
                                         self.size, self.geom.group_max, self.height))

    def state(self) -> PermutationState:
        return PermutationState(tuple(int(r) for r in self.slots),
                                tuple(tuple(int(c) for c in o) for o in self.orders),
                                self.height)

    def matches(self, state: PermutationState) -> bool:
        return (tuple(self.slots) == state.slots
                and all(tuple(o) == t for o, t in zip(self.orders, state.col_orders)))

    def _swap_cols(self, s, a, b):
        for arr in (self.lo[s], self.hi[s], self.weight[s], self.orders[s]):
            arr[[a, b]] = arr[[b, a]]

    def _with_row(self, s, pos, row):
        word, bit = divmod(pos, 64)
        mask = np.uint64(1) << np.uint64(bit)
        cols = self.orders[s]
        out = []
        for arr, occ in ((self.lo[s], self.src.lo), (self.hi[s], self.src.hi)):
            new = arr.copy()
            new[:, word] &= ~mask
            if row >= 0:
                new[occ[row, cols], word] |= mask
            out.append(new)
        lo, hi = out
        return lo, hi, _kernels.slot_weights(lo, hi)

    def _swap_bits(self, s, pa, pb):
        out = []
        for arr in (self.lo[s], self.hi[s]):
            new = arr.copy()
            bits = []
            for p in (pa, pb):
                word, bit = divmod(p, 64)
                mask = np.uint64(1) << np.uint64(bit)
                bits.append((word, mask, (arr[:, word] & mask) != 0))
            for (word, mask, _), (_, _, val) in zip(bits, reversed(bits)):
                new[:, word] &= ~mask
                new[val, word] |= mask
            out.append(new)
        return out[0], out[1], self.weight[s]

    def evaluate(self, move: Move) -> list[int]:
        """Widths after ``move``; the move stays pending until commit/rollback."""
        if self._pending is not None:
            raise RuntimeError("previous move neither committed nor rolled back")
        widths = list(self.widths)
        self.repacked = 0
        if move.kind == COL and move.a != move.b:
            s = move.section
            self._swap_cols(s, move.a, move.b)
            widths[s] = self._width(s)
            self.repacked = 1
            self._pending = (move, widths, None)
            return widths
        if move.kind == ROW:
            sa, pa = divmod(move.a, self.height)
            sb, pb = divmod(move.b, self.height)
            if sa != sb:
                ra, rb = int(self.slots[move.a]), int(self.slots[move.b])
                new_a = self._with_row(sa, pa, rb)
                new_b = self._with_row(sb, pb, ra)
                widths[sa] = self._width(sa, *new_a)
                widths[sb] = self._width(sb, *new_b)
                self.repacked = 2
                self._pending = (move, widths, ((sa, new_a), (sb, new_b)))
                return widths
            if move.a != move.b:
                # same-section swap: widths unchanged, only bit positions move
                arrays = ((sa, self._swap_bits(sa, pa, pb)),)
                self._pending = (move, widths, arrays)
                return widths
        self._pending = (move, widths, None)
        return widths

    def commit(self) -> None:
        move, widths, arrays = self._pop()
        if move.kind == ROW:
            self.slots[[move.a, move.b]] = self.slots[[move.b, move.a]]
            for s, (lo, hi, wt) in arrays or ():
                self.lo[s], self.hi[s], self.weight[s] = lo, hi, wt
        self.widths = widths

    def rollback(self) -> None:
        move, _, _ = self._pop()
        if move.kind == COL and move.a != move.b:
            self._swap_cols(move.section, move.a, move.b)

    def _pop(self):
        if self._pending is None:
            raise RuntimeError("no pending move")
        pending, self._pending = self._pending, None
        return pending


def full_widths(m_or_src, geom: ArrayGeometry, state: PermutationState) -> list[int]:
    """Section widths of ``state`` computed from scratch."""
    src = m_or_src if isinstance(m_or_src, CellSource) else cell_source(m_or_src)
    return [sec.width for sec in _build_sections(src, geom, state)]


def incremental_repack(state: PermutationState, move: Move, cache: SectionCache) -> list[int]:
    """Apply ``move`` to ``cache`` (which must mirror ``state``) and return the new widths."""
    if not cache.matches(state):
        raise RuntimeError("section cache is out of sync with the permutation state")
    widths = cache.evaluate(move)
    cache.commit()
    return widths


def _build_sections(src: CellSource, geom: ArrayGeometry, state: PermutationState) -> list[Section]:
    out = []
    for s in range(state.n_sections):
        raw = build_section(src, state.section_rows(s), state.col_orders[s])
        out.append(Section(raw.row_map, tuple(pack_section(raw, geom.group_max, src.mode))))
    return out


def packed_from_state(m_or_src, geom: ArrayGeometry, state: PermutationState) -> PackedMatrix:
    src = m_or_src if isinstance(m_or_src, CellSource) else cell_source(m_or_src)
    return PackedMatrix(geom, tuple(_build_sections(src, geom, state)), src.mode, src.shape,
                        src.fmt, src.scale, src.name, permutation=state)


# ---------------------------------------------------------------------------
# driver


@dataclass
class AnnealResult:
    packed: PackedMatrix
    state: PermutationState
    initial_energy: int
    best_energy: int
    final_energy: int
    accepted_delta_sum: int
    steps: int
    accepted: int
    cooling_events: int
    t_init: float
    initial_widths: list
    best_widths: list

    def as_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "initial_energy", "best_energy", "final_energy", "steps", "accepted",
            "cooling_events", "t_init", "initial_widths", "best_widths")}


def anneal_search(m: Union[WeightMatrix, SubwordMatrix], geom: ArrayGeometry,
                  group_max: int | None = None, cfg: AnnealConfig = AnnealConfig(),
                  trace: IO[str] | None = None) -> AnnealResult:
    """Run the annealing schedule and return the best state seen.

    Each proposal is accepted when a uniform draw is below
    ``exp(-dE / temp)``; the temperature is multiplied by ``1 - cooling``
    after every ``iters_per_temp`` proposals until it reaches ``t_end``.
    ``trace`` receives one JSON line per proposal.
    """
    if group_max is not None and group_max != geom.group_max:
        geom = replace(geom, group_max=group_max)
    src = cell_source(m)
    rows, cols = src.shape
    state = PermutationState.identity(rows, cols, geom.array_rows)
    cache = SectionCache(src, geom, state)
    rng = make_rng(cfg.seed)

    t_init = cfg.initial_temperature(cols)
    temp = t_init
    current = energy(cache.widths, geom)
    initial, initial_widths = current, list(cache.widths)
    best, best_widths = current, list(cache.widths)
    best_slots, best_orders = cache.slots.copy(), [o.copy() for o in cache.orders]
    floor = energy([-(-cols // geom.group_max) or 1] * cache.n_sections, geom)

    loops = cools = steps = accepted = 0
    delta_sum = 0
    while temp > cfg.t_end and best > floor:
        move = sample_move(cache.slots, cache.n_sections, geom.array_rows, cols, rng)
        before = cache.widths
        after = cache.evaluate(move)
        d = delta_energy(before, after, geom).total
        draw = rng.random()
        ok = d <= 0 or draw < math.exp(-d / temp)
        if ok:
            cache.commit()
            accepted += 1
            current += d
            delta_sum += d
            if current < best:
                best, best_widths = current, list(cache.widths)
                best_slots = cache.slots.copy()
                best_orders = [o.copy() for o in cache.orders]
        else:
            cache.rollback()
        if trace is not None:
            trace.write(json.dumps({"step": steps, "temp": temp, "move": move.kind, "delta": d,
                                    "draw": draw, "accepted": ok,
                                    "best_width": sum(best_widths)}) + "\n")
        steps += 1
        loops += 1
        if loops == cfg.iters_per_temp:
            cools += 1
            temp = t_init * (1.0 - cfg.cooling) ** cools
            loops = 0

    best_state = PermutationState(tuple(int(r) for r in best_slots),
                                  tuple(tuple(int(c) for c in o) for o in best_orders),
                                  geom.array_rows)
    packed = packed_from_state(src, geom, best_state)
    if packed.widths != best_widths:
        raise RuntimeError("incremental widths disagree with the final re-pack")
    return AnnealResult(packed, best_state, initial, best, current, delta_sum, steps, accepted,
                        cools, t_init, initial_widths, best_widths)


def anneal(m: Union[WeightMatrix, SubwordMatrix], geom: ArrayGeometry,
           group_max: int | None = None, cfg: AnnealConfig = AnnealConfig(),
           trace: IO[str] | None = None) -> PackedMatrix:
    return anneal_search(m, geom, group_max, cfg, trace).packed
