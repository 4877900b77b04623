"""Layered parameter containers and the binary snapshot format.

A model's parameters are an ordered list of named layers, each a flat
float64 array. Every weight matrix and every bias vector is its own layer.
Values are immutable: arrays are stored read-only and every operation
returns a fresh container.

Snapshot byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"LPRM"
    4       2     format version (uint16, currently 1)
    6       4     layer count L (uint32)
    then L times:
            2     name length n (uint16)
            n     layer name, UTF-8
            8     element count (uint64)
    then for each layer in order: element count x float64 (IEEE-754, LE)
    last    4     CRC-32 (zlib) of every preceding byte of this snapshot

Snapshots are self-delimiting, so several may be concatenated in one file.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from coastfl.errors import NumericError, StructuralError

SNAPSHOT_MAGIC = b"LPRM"
SNAPSHOT_VERSION = 1

Arch = tuple[tuple[str, int], ...]


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype="<f8").reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayeredParams:
    names: tuple[str, ...]
    values: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise StructuralError("names and values differ in length")
        if len(set(self.names)) != len(self.names):
            raise StructuralError(f"duplicate layer names in {self.names}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", tuple(_frozen(v) for v in self.values))

    @classmethod
    def from_layers(cls, layers: Iterable[tuple[str, Sequence[float] | np.ndarray]]) -> "LayeredParams":
        layers = list(layers)
        return cls(tuple(n for n, _ in layers), tuple(v for _, v in layers))

    @classmethod
    def zeros(cls, arch: Arch) -> "LayeredParams":
        return cls(tuple(n for n, _ in arch), tuple(np.zeros(m) for _, m in arch))

    @property
    def arch(self) -> Arch:
        return tuple((n, int(v.size)) for n, v in zip(self.names, self.values))

    @property
    def total_len(self) -> int:
        return sum(int(v.size) for v in self.values)

    def layer(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]

    def offsets(self) -> list[int]:
        """Global index of the first scalar of each layer."""
        out, pos = [], 0
        for v in self.values:
            out.append(pos)
            pos += int(v.size)
        return out

    def __iter__(self):
        return iter(zip(self.names, self.values))

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayeredParams):
            return NotImplemented
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.values, other.values)
        )

    def bit_equal(self, other: "LayeredParams") -> bool:
        """Byte-level equality (distinguishes -0.0 from 0.0 and NaN payloads)."""
        return self.arch == other.arch and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.values, other.values)
        )

    def __repr__(self) -> str:
        body = ", ".join(f"{n}[{v.size}]" for n, v in self)
        return f"LayeredParams({body})"


def check_same_arch(a: LayeredParams, b: LayeredParams) -> None:
    if a.arch != b.arch:
        raise StructuralError(f"architecture mismatch: {a.arch} vs {b.arch}")


def _binary(a: LayeredParams, b: LayeredParams, op) -> LayeredParams:
    check_same_arch(a, b)
    return LayeredParams(a.names, tuple(op(x, y) for x, y in zip(a.values, b.values)))


def add(a: LayeredParams, b: LayeredParams) -> LayeredParams:
    return _binary(a, b, np.add)


def sub(a: LayeredParams, b: LayeredParams) -> LayeredParams:
    return _binary(a, b, np.subtract)


def scale(a: LayeredParams, c: float) -> LayeredParams:
    return LayeredParams(a.names, tuple(v * float(c) for v in a.values))


def sgn(a: LayeredParams) -> LayeredParams:
    """Elementwise sign in {-1, 0, +1}; sgn(0) = 0. NaN is rejected."""
    for name, v in a:
        if np.isnan(v).any():
            raise NumericError(f"NaN in layer {name!r}")
    return LayeredParams(a.names, tuple(np.sign(v) + 0.0 for v in a.values))


def sum_all(items: Sequence[LayeredParams]) -> LayeredParams:
    """Elementwise sum of a non-empty sequence, accumulated in order."""
    if not items:
        raise StructuralError("cannot sum an empty sequence of parameters")
    acc = [v.copy() for v in items[0].values]
    for p in items[1:]:
        check_same_arch(items[0], p)
        for dst, src in zip(acc, p.values):
            dst += src
    return LayeredParams(items[0].names, tuple(acc))


def flatten(a: LayeredParams) -> np.ndarray:
    if not a.values:
        return np.zeros(0)
    return np.concatenate(a.values)


def unflatten(flat: np.ndarray, arch: Arch) -> LayeredParams:
    flat = np.asarray(flat, dtype=np.float64).reshape(-1)
    total = sum(m for _, m in arch)
    if flat.size != total:
        raise StructuralError(f"flat length {flat.size} != architecture total {total}")
    out, pos = [], 0
    for _, m in arch:
        out.append(flat[pos:pos + m])
        pos += m
    return LayeredParams(tuple(n for n, _ in arch), tuple(out))


# -- snapshot serialization ---------------------------------------------------

def dump_snapshot(a: LayeredParams) -> bytes:
    parts = [SNAPSHOT_MAGIC, struct.pack("<HI", SNAPSHOT_VERSION, len(a))]
    for name, v in a:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", v.size))
    for v in a.values:
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def load_snapshot(buf: bytes, offset: int = 0) -> tuple[LayeredParams, int]:
    """Parse one snapshot starting at ``offset``; return it and the end offset."""
    view = memoryview(buf)
    pos = offset

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise StructuralError("snapshot truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != SNAPSHOT_MAGIC:
        raise StructuralError("bad snapshot magic")
    version, n_layers = struct.unpack("<HI", take(6))
    if version != SNAPSHOT_VERSION:
        raise StructuralError(f"unsupported snapshot version {version}")
    arch = []
    for _ in range(n_layers):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (count,) = struct.unpack("<Q", take(8))
        arch.append((name, count))
    values = [np.frombuffer(take(8 * m), dtype="<f8") for _, m in arch]
    (crc,) = struct.unpack("<I", take(4))
    if crc != zlib.crc32(view[offset:pos - 4]):
        raise StructuralError("snapshot checksum mismatch")
    return LayeredParams(tuple(n for n, _ in arch), tuple(values)), pos
