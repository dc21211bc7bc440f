"""Matrix types, file formats and density rendering.

Two on-disk formats are supported for weight matrices:

* ``TCM1`` binary: ``b"TCM1"``, little-endian ``u32`` rows, ``u32`` cols,
  ``f64`` scale, then ``rows*cols`` signed bytes in row-major order.
* CSV: one matrix row per line, integers separated by commas.  Lines starting
  with ``#`` are comments; ``key=value`` tokens in them set ``scale`` and
  ``name``.

Density maps are written as binary PGM (``P5``).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Union

import numpy as np

if TYPE_CHECKING:
    from tightpack.pack import PackedMatrix

MAGIC = b"TCM1"
_HEADER = struct.Struct("<4sIId")

PGM_ZERO = 0
PGM_OCCUPIED = 255
PGM_SEPARATOR = 128
# magic, width, height, maxval, then exactly one whitespace byte
_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


class ParseError(ValueError):
    """Raised when a matrix file cannot be decoded."""

    def __init__(self, message: str, path: Union[str, Path, None] = None,
                 offset: int | None = None, line: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        prefix = ": ".join([", ".join(where)]) + ": " if where else ""
        super().__init__(prefix + message)
        self.path = path
        self.offset = offset
        self.line = line


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Dense grid of 8-bit quantized weights.

    ``values`` is stored as a read-only ``int8`` array.  Equality compares
    shape, values and scale; the name is a label only.
    """

    values: np.ndarray
    scale: float = 1.0
    name: str = ""

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise ValueError(f"weight matrix must be 2-D, got shape {arr.shape}")
        if arr.size and (arr.min() < -128 or arr.max() > 127):
            raise ValueError("weight values must lie in [-128, 127]")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        arr = np.array(arr, dtype=np.int8, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def occupancy(self) -> np.ndarray:
        return self.values != 0

    def stats(self) -> "SparsityStats":
        return SparsityStats.of(self.values)

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale

    def __eq__(self, other):
        if not isinstance(other, WeightMatrix):
            return NotImplemented
        return (self.shape == other.shape and self.scale == other.scale
                and np.array_equal(self.values, other.values))

    __hash__ = None

    def __repr__(self):
        return (f"WeightMatrix(name={self.name!r}, shape={self.shape}, "
                f"scale={self.scale!r}, nnz={int(np.count_nonzero(self.values))})")


@dataclass(frozen=True)
class SparsityStats:
    nonzeros: int
    density: float
    pruning_rate: float

    @classmethod
    def of(cls, values: np.ndarray) -> "SparsityStats":
        total = int(np.size(values))
        nnz = int(np.count_nonzero(values))
        density = nnz / total if total else 0.0
        return cls(nonzeros=nnz, density=density, pruning_rate=1.0 - density)


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        fmt = fmt.lower()
        if fmt not in ("tcm", "csv"):
            raise ValueError(f"unknown matrix format {fmt!r}")
        return fmt
    suffix = path.suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".tcm", ".bin"):
        return "tcm"
    with open(path, "rb") as fh:
        return "tcm" if fh.read(4) == MAGIC else "csv"


def load_matrix(path, format: str | None = None) -> WeightMatrix:
    """Read a matrix from ``path``; ``format`` is ``"tcm"``, ``"csv"`` or
    ``None`` to infer it from the suffix (falling back to sniffing the magic).
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    data = path.read_bytes()
    if fmt == "tcm":
        return _decode_tcm(data, path)
    return _decode_csv(data, path)


def save_matrix(m: WeightMatrix, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format.lower() if format else ("csv" if path.suffix.lower() == ".csv" else "tcm")
    if fmt == "tcm":
        payload = encode_tcm(m)
    elif fmt == "csv":
        payload = encode_csv(m).encode("ascii")
    else:
        raise ValueError(f"unknown matrix format {format!r}")
    path.write_bytes(payload)


def encode_tcm(m: WeightMatrix) -> bytes:
    head = _HEADER.pack(MAGIC, m.rows, m.cols, m.scale)
    return head + m.values.astype("<i1").tobytes(order="C")


def _decode_tcm(data: bytes, path: Path) -> WeightMatrix:
    if len(data) < _HEADER.size:
        raise ParseError(f"truncated header ({len(data)} bytes)", path, offset=len(data))
    magic, rows, cols, scale = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", path, offset=0)
    if not np.isfinite(scale) or scale <= 0:
        raise ParseError(f"non-positive scale {scale}", path, offset=12)
    expected = _HEADER.size + rows * cols
    if len(data) != expected:
        raise ParseError(f"payload size mismatch: header says {rows}x{cols}, "
                         f"file has {len(data) - _HEADER.size} value bytes",
                         path, offset=min(len(data), expected))
    values = np.frombuffer(data, dtype="<i1", offset=_HEADER.size).reshape(rows, cols)
    return WeightMatrix(values, scale=scale, name=path.stem)


def encode_csv(m: WeightMatrix) -> str:
    lines = [f"# name={m.name} scale={m.scale!r}" if m.name else f"# scale={m.scale!r}"]
    lines.extend(",".join(str(int(v)) for v in row) for row in m.values)
    return "\n".join(lines) + "\n"


def _decode_csv(data: bytes, path: Path) -> WeightMatrix:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("non-ASCII content", path, offset=exc.start) from None
    scale, name = 1.0, path.stem
    rows: list[list[int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                key, sep, val = token.partition("=")
                if not sep:
                    continue
                if key == "scale":
                    try:
                        scale = float(val)
                    except ValueError:
                        raise ParseError(f"bad scale {val!r}", path, line=lineno) from None
                elif key == "name":
                    name = val
            continue
        try:
            row = [int(tok) for tok in line.split(",")]
        except ValueError:
            raise ParseError(f"non-integer field in {line!r}", path, line=lineno) from None
        bad = [v for v in row if v < -128 or v > 127]
        if bad:
            raise ParseError(f"value {bad[0]} outside [-128, 127]", path, line=lineno)
        if rows and len(row) != len(rows[0]):
            raise ParseError(f"expected {len(rows[0])} columns, got {len(row)}",
                             path, line=lineno)
        rows.append(row)
    if not rows:
        raise ParseError("no matrix rows", path, line=1)
    if not np.isfinite(scale) or scale <= 0:
        raise ParseError(f"non-positive scale {scale}", path, line=1)
    return WeightMatrix(np.array(rows, dtype=np.int8), scale=scale, name=name)


def density_image(m: "WeightMatrix | PackedMatrix") -> np.ndarray:
    """Return the uint8 bitmap that :func:`render_density` writes."""
    if isinstance(m, WeightMatrix):
        return np.where(m.values != 0, PGM_OCCUPIED, PGM_ZERO).astype(np.uint8)
    return _packed_image(m)


def _packed_image(pm) -> np.ndarray:
    h = pm.geometry.array_rows
    width = max((len(sec.groups) for sec in pm.sections), default=0)
    blocks = []
    for k, sec in enumerate(pm.sections):
        if k:
            blocks.append(np.full((1, width), PGM_SEPARATOR, np.uint8))
        block = np.zeros((h, width), np.uint8)
        for j, group in enumerate(sec.groups):
            for occ in group.occupants:
                block[occ.row, j] = PGM_OCCUPIED
        blocks.append(block)
    if not blocks:
        return np.zeros((0, 0), np.uint8)
    return np.vstack(blocks)


def write_pgm(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head = _PGM_HEADER.match(data)
    if head is None:
        raise ParseError("not a binary PGM", path, offset=0)
    w, h, maxval = (int(x) for x in head.groups())
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", path)
    pixels = np.frombuffer(data, dtype=np.uint8, offset=head.end())
    if pixels.size != w * h:
        raise ParseError(f"expected {w * h} pixels, found {pixels.size}", path, offset=head.end())
    return pixels.reshape(h, w)


def render_density(m: "WeightMatrix | PackedMatrix", path) -> None:
    """Write a black/white occupancy map of ``m`` as PGM.

    Packed matrices are drawn one section under another, separated by a
    single mid-gray row.
    """
    write_pgm(density_image(m), path)
