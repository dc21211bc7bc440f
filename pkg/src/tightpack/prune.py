"""Magnitude pruning, 8-bit quantization and subword pruning.

Subwords use a sign-magnitude view of the 8-bit weight: one sign plus seven
magnitude bits split into a high field of ``h_bits`` and a low field of
``l_bits``.  The customary ``{H, L}`` labels count the sign with the high
field, so ``{4,4}`` means ``h_bits=3, l_bits=4``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tightpack.tensorio import WeightMatrix

MAGNITUDE_BITS = 7

# cell classes
ZERO, LOW, HIGH, FULL = 0, 1, 2, 3
CLASS_NAMES = {ZERO: "Zero", LOW: "L", HIGH: "H", FULL: "Full"}


class InvalidRateError(ValueError):
    pass


@dataclass(frozen=True)
class PruneSchedule:
    epochs: tuple[int, ...]
    rates: tuple[float, ...]

    def __iter__(self):
        return iter(zip(self.epochs, self.rates))

    def __len__(self):
        return len(self.epochs)


def prune_schedule(epochs: int, final_rate: float) -> PruneSchedule:
    """Cubic pruning ramp over the first half of training.

    With ``T = ceil(epochs / 2)`` the target at epoch ``t`` is
    ``P * (1 - (1 - t/T)**3)``, sampled every ``ceil(T/10)`` epochs and always
    ending with ``(T, P)``.
    """
    if epochs < 2:
        raise ValueError(f"need at least 2 epochs, got {epochs}")
    if not 0.0 <= final_rate < 1.0:
        raise InvalidRateError(f"final pruning rate must be in [0, 1), got {final_rate}")
    horizon = math.ceil(epochs / 2)
    step = math.ceil(horizon / 10)
    points = list(range(step, horizon, step)) + [horizon]
    rates = []
    for t in points:
        r = final_rate * (1.0 - (1.0 - t / horizon) ** 3)
        rates.append(final_rate if t == horizon else r)
    return PruneSchedule(tuple(points), tuple(rates))


def prune_count(rate: float, size: int) -> int:
    # guard against 0.29 * 100 == 28.999...
    return min(size, math.floor(rate * size + 1e-9))


def magnitude_prune(m: WeightMatrix, rate: float) -> WeightMatrix:
    """Zero the ``floor(rate * size)`` smallest-magnitude weights.

    Ties go to the lower row-major index.  Already-zero weights count towards
    the total, so the operation is idempotent at a fixed rate.
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidRateError(f"pruning rate must be in [0, 1], got {rate}")
    flat = m.values.astype(np.int16).ravel()
    k = prune_count(rate, flat.size)
    order = np.argsort(np.abs(flat), kind="stable")
    out = flat.copy()
    out[order[:k]] = 0
    return WeightMatrix(out.reshape(m.shape), scale=m.scale, name=m.name)


def quantize8(values, name: str = "") -> WeightMatrix:
    """Symmetric linear quantization to [-127, 127]."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("expected a 2-D array")
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0:
        return WeightMatrix(np.zeros(v.shape, np.int8), scale=1.0, name=name)
    scale = peak / 127.0
    q = np.clip(np.rint(v / scale), -127, 127).astype(np.int8)
    return WeightMatrix(q, scale=scale, name=name)


@dataclass(frozen=True)
class SubwordFormat:
    h_bits: int
    l_bits: int

    def __post_init__(self):
        if self.h_bits < 1 or self.l_bits < 1 or self.h_bits + self.l_bits != MAGNITUDE_BITS:
            raise ValueError(f"h_bits + l_bits must be {MAGNITUDE_BITS}, "
                             f"got {self.h_bits} + {self.l_bits}")

    @property
    def label(self) -> str:
        """``{H,L}`` bit-length label, with the sign counted in ``H``."""
        return f"{self.h_bits + 1},{self.l_bits}"

    @classmethod
    def from_label(cls, label: str) -> "SubwordFormat":
        h, l = (int(x) for x in label.replace("{", "").replace("}", "").split(","))
        return cls(h_bits=h - 1, l_bits=l)

    @property
    def mod(self) -> int:
        """2-bit MAC configuration code."""
        return SUPPORTED_FORMATS.index(self) + 1


SUPPORTED_FORMATS = (SubwordFormat(2, 5), SubwordFormat(3, 4), SubwordFormat(4, 3))


@dataclass(frozen=True, eq=False)
class SubwordMatrix:
    """Per-cell subword classification of an 8-bit matrix.

    ``classes`` holds ZERO/LOW/HIGH/FULL codes, ``signs`` is -1/0/+1 and
    ``mags`` the stored field (low bits for LOW, the shifted-down high field
    for HIGH, the full 7-bit magnitude for FULL).  ``base`` is the pre-pruning
    matrix when known; it is not part of equality.
    """

    fmt: SubwordFormat
    classes: np.ndarray
    signs: np.ndarray
    mags: np.ndarray
    base: WeightMatrix | None = field(default=None)
    scale: float = 1.0
    name: str = ""

    def __post_init__(self):
        for attr, dtype in (("classes", np.uint8), ("signs", np.int8), ("mags", np.uint8)):
            arr = np.array(getattr(self, attr), dtype=dtype, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, attr, arr)
        if not (self.classes.shape == self.signs.shape == self.mags.shape) or self.classes.ndim != 2:
            raise ValueError("classes, signs and mags must be 2-D arrays of equal shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    @property
    def rows(self) -> int:
        return self.classes.shape[0]

    @property
    def cols(self) -> int:
        return self.classes.shape[1]

    def reconstruct(self) -> np.ndarray:
        """Signed integer weights the hardware actually multiplies by."""
        mags = self.mags.astype(np.int32)
        shifted = np.where(self.classes == HIGH, mags << self.fmt.l_bits, mags)
        return (self.signs.astype(np.int32) * shifted).astype(np.int32)

    def to_weight_matrix(self) -> WeightMatrix:
        return WeightMatrix(self.reconstruct(), scale=self.scale, name=self.name)

    def counts(self) -> dict[str, int]:
        return {CLASS_NAMES[c]: int(np.count_nonzero(self.classes == c)) for c in CLASS_NAMES}

    def __eq__(self, other):
        if not isinstance(other, SubwordMatrix):
            return NotImplemented
        return (self.fmt == other.fmt and self.shape == other.shape
                and np.array_equal(self.classes, other.classes)
                and np.array_equal(self.signs, other.signs)
                and np.array_equal(self.mags, other.mags))

    __hash__ = None


def classify(magnitudes: np.ndarray, fmt: SubwordFormat, delta_max: float) -> np.ndarray:
    g = np.asarray(magnitudes, dtype=np.int32)
    low_mask = (1 << fmt.l_bits) - 1
    remainder = g & low_mask
    # deviation of the truncated high field, |H - g| / g
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(g > 0, remainder / np.maximum(g, 1), 0.0)
    out = np.full(g.shape, FULL, np.uint8)
    out[delta <= delta_max] = HIGH
    out[g < (1 << fmt.l_bits)] = LOW
    out[g == 0] = ZERO
    return out


def subword_prune(m: WeightMatrix, fmt: SubwordFormat, delta_max: float) -> SubwordMatrix:
    if not 0.0 < delta_max < 1.0:
        raise ValueError(f"delta_max must be in (0, 1), got {delta_max}")
    vals = m.values.astype(np.int16)
    # -128 has no 7-bit magnitude
    vals = np.clip(vals, -127, 127)
    g = np.abs(vals)
    classes = classify(g, fmt, delta_max)
    mags = np.where(classes == HIGH, g >> fmt.l_bits, g).astype(np.uint8)
    return SubwordMatrix(fmt, classes, np.sign(vals), mags, base=m, scale=m.scale, name=m.name)


@dataclass(frozen=True)
class FormatStats:
    fmt: SubwordFormat
    counts: dict
    nonzeros: int

    def pct(self, name: str) -> float:
        return 100.0 * self.counts[name] / self.nonzeros if self.nonzeros else 0.0

    @property
    def imbalance(self) -> int:
        return abs(self.counts["L"] - self.counts["H"])

    def as_json(self) -> dict:
        return {"l_pct": round(self.pct("L"), 1), "h_pct": round(self.pct("H"), 1),
                "full_pct": round(self.pct("Full"), 1)}


def choose_subword_format(m: WeightMatrix, delta_max: float,
                          formats=SUPPORTED_FORMATS) -> tuple[SubwordFormat, dict[str, FormatStats]]:
    """Pick the format whose L and H shares are most balanced.

    Ties fall to the smaller Full share, then to the earlier format in
    ``formats``.  Returns the choice and per-format statistics keyed by label.
    """
    g = np.abs(np.clip(m.values.astype(np.int16), -127, 127))
    nnz = int(np.count_nonzero(g))
    table = {}
    for fmt in formats:
        cls = classify(g, fmt, delta_max)
        counts = {CLASS_NAMES[c]: int(np.count_nonzero(cls == c)) for c in CLASS_NAMES}
        table[fmt.label] = FormatStats(fmt, counts, nnz)
    best = min(table.values(), key=lambda s: (s.imbalance, s.counts["Full"]))
    return best.fmt, table


def format_table_json(table: dict[str, FormatStats]) -> dict:
    return {label: stats.as_json() for label, stats in table.items()}
