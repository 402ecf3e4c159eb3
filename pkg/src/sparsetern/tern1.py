"""TERN1 matrix export files and the plain-text inspection format.

Layout (little-endian)::

    b"TERN1"
    u64 seed, u64 layer_tag, u64 rows, u64 cols, u64 generator, u64 n, u64 m
    f64 threshold
    rows * ceil(cols / 4) bytes: 2 bits per entry, LSB first,
        00 = 0, 01 = +1, 11 = -1 (10 is invalid); each row starts on a byte

"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .linalg import DenseTernary, to_dense
from .weightgen import Generator, WeightSpec

MAGIC = b"TERN1"
_HEADER = struct.Struct("<7Qd")
HEADER_SIZE = len(MAGIC) + _HEADER.size

_ENCODE = {0: 0b00, 1: 0b01, -1: 0b11}


class Tern1Error(ValueError):
    """Malformed TERN1 data; ``offset`` is the byte offset of the first violation."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def row_bytes(cols: int) -> int:
    return -(-cols // 4)


def encode(spec: WeightSpec, matrix=None) -> bytes:
    d = to_dense(spec if matrix is None else matrix)
    if (d.rows, d.cols) != (spec.rows, spec.cols):
        raise ValueError(f"matrix shape {d.rows}x{d.cols} does not match spec {spec.rows}x{spec.cols}")
    header = MAGIC + _HEADER.pack(spec.seed, spec.layer_tag, spec.rows, spec.cols,
                                  int(spec.generator), spec.n, spec.m, float(spec.threshold))
    codes = np.zeros((d.rows, row_bytes(d.cols) * 4), dtype=np.uint8)
    codes[:, :d.cols] = np.where(d.entries == 1, 0b01, np.where(d.entries == -1, 0b11, 0b00))
    quads = codes.reshape(d.rows, -1, 4)
    packed = quads[..., 0] | (quads[..., 1] << 2) | (quads[..., 2] << 4) | (quads[..., 3] << 6)
    return header + packed.astype(np.uint8).tobytes()


def decode(data: bytes) -> tuple[WeightSpec, DenseTernary]:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        bad = next((i for i, (a, b) in enumerate(zip(data, MAGIC)) if a != b), min(len(data), len(MAGIC)))
        raise Tern1Error("missing TERN1 magic", bad)
    if len(data) < HEADER_SIZE:
        raise Tern1Error("truncated header", len(data))
    seed, tag, rows, cols, gen, n, m, t = _HEADER.unpack_from(data, len(MAGIC))
    try:
        spec = WeightSpec(seed, tag, rows, cols, t, Generator(gen), n, m)
    except ValueError as exc:
        raise Tern1Error(f"invalid header: {exc}", len(MAGIC)) from None
    rb = row_bytes(cols)
    need = HEADER_SIZE + rows * rb
    if len(data) < need:
        raise Tern1Error(f"truncated payload: expected {need} bytes, got {len(data)}", len(data))
    if len(data) > need:
        raise Tern1Error("trailing bytes after payload", need)
    payload = np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE).reshape(rows, rb)
    codes = np.stack([(payload >> s) & 0b11 for s in (0, 2, 4, 6)], axis=-1).reshape(rows, rb * 4)
    bad = np.argwhere(codes[:, :cols] == 0b10)
    if bad.size:
        r, c = bad[0]
        raise Tern1Error(f"invalid 2-bit code at entry ({r}, {c})", HEADER_SIZE + r * rb + c // 4)
    pad = codes[:, cols:]
    if pad.any():
        r, c = np.argwhere(pad)[0]
        raise Tern1Error(f"non-zero padding bits in row {r}", HEADER_SIZE + r * rb + (cols + c) // 4)
    entries = np.zeros((rows, cols), dtype=np.int8)
    entries[codes[:, :cols] == 0b01] = 1
    entries[codes[:, :cols] == 0b11] = -1
    return spec, DenseTernary(entries)


def save(path, spec: WeightSpec, matrix=None) -> None:
    Path(path).write_bytes(encode(spec, matrix))


def load(path) -> tuple[WeightSpec, DenseTernary]:
    return decode(Path(path).read_bytes())


def to_text(matrix) -> str:
    d = to_dense(matrix)
    lut = np.array(["-", "0", "+"])
    return "".join("".join(lut[row + 1]) + "\n" for row in d.entries)


def from_text(text: str) -> DenseTernary:
    lookup = {"-": -1, "0": 0, "+": 1}
    lines = [ln for ln in text.splitlines() if ln]
    try:
        return DenseTernary([[lookup[ch] for ch in ln] for ln in lines])
    except KeyError as exc:
        raise ValueError(f"unexpected character {exc.args[0]!r} in ternary text") from None


def stats(matrix) -> dict:
    """Zero fraction and sign balance of a matrix."""
    d = to_dense(matrix)
    total = d.rows * d.cols
    plus = int(d.plus.sum())
    minus = int(d.minus.sum())
    nnz = plus + minus
    return {
        "rows": d.rows,
        "cols": d.cols,
        "zeros": total - nnz,
        "plus": plus,
        "minus": minus,
        "sparsity": (total - nnz) / total,
        "plus_fraction": plus / nnz if nnz else 0.0,
    }
