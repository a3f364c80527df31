"""Named parameter-block containers and blockwise arithmetic.

A :class:`Checkpoint` holds model weights; a :class:`BlockVector` holds anything
living in the same space as weights (task vectors, difference vectors,
gradients). Both are immutable: the stored arrays are read-only float64.

Binary format (little-endian throughout)::

    magic      8 bytes   b"DVCKPT1\\0" or b"DVVECT1\\0"
    count      u32
    per block: u32 name_len, name (utf-8), u32 rank, u32 dims[rank],
               f64 payload[prod(dims)] in row-major order
    meta:      u32 count, then per entry u32 key_len, key, u32 val_len, val

Block vectors carry an empty meta section.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import FormatError, NonFiniteError, ShapeMismatchError

CHECKPOINT_MAGIC = b"DVCKPT1\x00"
VECTOR_MAGIC = b"DVVECT1\x00"


@dataclass(frozen=True)
class BlockShape:
    name: str
    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.name:
            raise ValueError("block name must be non-empty")
        if not self.dims:
            raise ValueError(f"block {self.name!r}: dims must be non-empty")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"block {self.name!r}: dims must be positive, got {self.dims}")

    @property
    def size(self) -> int:
        return math.prod(self.dims)


def _frozen(values, shape: BlockShape) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size != shape.size:
        raise ShapeMismatchError(
            f"block {shape.name!r}: payload has {arr.size} entries, dims {shape.dims} need {shape.size}"
        )
    arr.setflags(write=False)
    return arr


class _Blocks:
    """Ordered named blocks, each a flat read-only float64 array."""

    __slots__ = ("_shapes", "_arrays", "_index")

    def __init__(self, blocks: Iterable[tuple[BlockShape, Sequence[float] | np.ndarray]]):
        shapes, arrays, index = [], [], {}
        for shape, values in blocks:
            if shape.name in index:
                raise ValueError(f"duplicate block name {shape.name!r}")
            index[shape.name] = len(shapes)
            shapes.append(shape)
            arrays.append(_frozen(values, shape))
        self._shapes = tuple(shapes)
        self._arrays = tuple(arrays)
        self._index = index

    @property
    def shapes(self) -> tuple[BlockShape, ...]:
        return self._shapes

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self._shapes)

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        """Flat read-only payloads in block order."""
        return self._arrays

    def __len__(self) -> int:
        return len(self._shapes)

    def __iter__(self) -> Iterator[tuple[BlockShape, np.ndarray]]:
        return iter(zip(self._shapes, self._arrays))

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> np.ndarray:
        """Block payload reshaped to its dims (read-only view)."""
        i = self._index[name]
        return self._arrays[i].reshape(self._shapes[i].dims)

    @property
    def size(self) -> int:
        return sum(s.size for s in self._shapes)

    def flat(self) -> np.ndarray:
        """Concatenation of all blocks in order (a fresh writable array)."""
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate(self._arrays)

    def same_structure(self, other: "_Blocks") -> bool:
        return self._shapes == other._shapes

    def __repr__(self) -> str:
        body = ", ".join(f"{s.name}{list(s.dims)}" for s in self._shapes)
        return f"{type(self).__name__}({body})"


class Checkpoint(_Blocks):
    """Model weights plus free-form string metadata."""

    __slots__ = ("_meta",)

    def __init__(self, blocks, meta: Mapping[str, str] | None = None):
        super().__init__(blocks)
        self._meta = dict(meta or {})
        for k, v in self._meta.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise TypeError("checkpoint meta must map str to str")

    @property
    def meta(self) -> dict[str, str]:
        return dict(self._meta)

    def with_meta(self, **updates: str) -> "Checkpoint":
        meta = self.meta
        meta.update(updates)
        return Checkpoint(zip(self._shapes, self._arrays), meta)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Checkpoint)
            and self._shapes == other._shapes
            and self._meta == other._meta
            and all(np.array_equal(a, b) for a, b in zip(self._arrays, other._arrays))
        )

    __hash__ = None


class BlockVector(_Blocks):
    """A displacement in weight space; every entry must be finite."""

    __slots__ = ()

    def __init__(self, blocks):
        super().__init__(blocks)
        for shape, arr in zip(self._shapes, self._arrays):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"non-finite entry in block {shape.name!r}")

    @classmethod
    def zeros(cls, template: _Blocks) -> "BlockVector":
        return cls((s, np.zeros(s.size)) for s in template.shapes)

    @classmethod
    def from_flat(cls, template: _Blocks, values: np.ndarray) -> "BlockVector":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != template.size:
            raise ShapeMismatchError(f"flat vector has {values.size} entries, expected {template.size}")
        out, start = [], 0
        for s in template.shapes:
            out.append((s, values[start:start + s.size]))
            start += s.size
        return cls(out)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BlockVector)
            and self._shapes == other._shapes
            and all(np.array_equal(a, b) for a, b in zip(self._arrays, other._arrays))
        )

    __hash__ = None

    def __neg__(self) -> "BlockVector":
        return BlockVector((s, -a) for s, a in self)

    def __add__(self, other: "BlockVector") -> "BlockVector":
        check_compatible(self, other)
        return BlockVector((s, a + b) for (s, a), b in zip(self, other.arrays))

    def __sub__(self, other: "BlockVector") -> "BlockVector":
        check_compatible(self, other)
        return BlockVector((s, a - b) for (s, a), b in zip(self, other.arrays))

    def __mul__(self, c: float) -> "BlockVector":
        return scale_uniform(self, c)

    __rmul__ = __mul__


def check_compatible(a: _Blocks, b: _Blocks) -> None:
    """Raise :class:`ShapeMismatchError` naming the first block that differs."""
    for i in range(max(len(a.shapes), len(b.shapes))):
        sa = a.shapes[i] if i < len(a.shapes) else None
        sb = b.shapes[i] if i < len(b.shapes) else None
        if sa != sb:
            name = sa.name if sa is not None else sb.name
            raise ShapeMismatchError(
                f"block {i} ({name!r}) differs: "
                f"{None if sa is None else (sa.name, sa.dims)} vs {None if sb is None else (sb.name, sb.dims)}"
            )


def subtract(a: _Blocks, b: _Blocks) -> BlockVector:
    """Blockwise ``a - b``."""
    check_compatible(a, b)
    return BlockVector((s, x - y) for (s, x), y in zip(a, b.arrays))


def add(a: Checkpoint, v: BlockVector) -> Checkpoint:
    """Blockwise ``a + v``; metadata is copied from ``a``."""
    check_compatible(a, v)
    return Checkpoint(((s, x + y) for (s, x), y in zip(a, v.arrays)), a.meta)


def scale_uniform(v: BlockVector, c: float) -> BlockVector:
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteError(f"scale factor must be finite, got {c}")
    return BlockVector((s, x * c) for s, x in v)


def dot(a: _Blocks, b: _Blocks) -> float:
    check_compatible(a, b)
    return float(sum(float(np.dot(x, y)) for x, y in zip(a.arrays, b.arrays)))


def norm(v: _Blocks) -> tuple[list[float], float]:
    """Per-block Euclidean norms and the global norm over the concatenation."""
    per_block = [float(np.sqrt(np.dot(x, x))) for x in v.arrays]
    total = math.sqrt(sum(float(np.dot(x, x)) for x in v.arrays))
    return per_block, total


def global_norm(v: _Blocks) -> float:
    return norm(v)[1]


# -- serialization ---------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(obj: _Blocks) -> bytes:
    magic = CHECKPOINT_MAGIC if isinstance(obj, Checkpoint) else VECTOR_MAGIC
    parts = [magic, struct.pack("<I", len(obj))]
    for shape, arr in obj:
        parts.append(_pack_str(shape.name))
        parts.append(struct.pack(f"<I{len(shape.dims)}I", len(shape.dims), *shape.dims))
        parts.append(arr.astype("<f8", copy=False).tobytes())
    meta = obj.meta if isinstance(obj, Checkpoint) else {}
    parts.append(struct.pack("<I", len(meta)))
    for k, v in meta.items():
        parts.append(_pack_str(k))
        parts.append(_pack_str(v))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated data at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid utf-8 near byte {self.pos}") from exc


def from_bytes(buf: bytes) -> Checkpoint | BlockVector:
    r = _Reader(buf)
    magic = r.take(8)
    if magic not in (CHECKPOINT_MAGIC, VECTOR_MAGIC):
        raise FormatError(f"bad magic {magic!r}")
    blocks = []
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        try:
            shape = BlockShape(name, dims)
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
        payload = np.frombuffer(r.take(8 * shape.size), dtype="<f8").astype(np.float64)
        blocks.append((shape, payload))
    meta = {}
    for _ in range(r.u32()):
        key = r.string()
        meta[key] = r.string()
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes")
    if magic == CHECKPOINT_MAGIC:
        return Checkpoint(blocks, meta)
    if meta:
        raise FormatError("block vector files carry no metadata")
    return BlockVector(blocks)


def save(obj: _Blocks, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(obj))


def load(path: str | Path) -> Checkpoint | BlockVector:
    return from_bytes(Path(path).read_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    obj = load(path)
    if not isinstance(obj, Checkpoint):
        raise FormatError(f"{path}: expected a checkpoint, found a block vector")
    return obj


def load_vector(path: str | Path) -> BlockVector:
    obj = load(path)
    if not isinstance(obj, BlockVector):
        raise FormatError(f"{path}: expected a block vector, found a checkpoint")
    return obj
