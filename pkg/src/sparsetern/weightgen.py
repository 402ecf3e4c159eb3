"""Deterministic synthesis of sparse random ternary matrices.

A :class:`WeightSpec` (seed, layer tag, shape, threshold, generator) fully
determines a matrix, so the matrix never has to be stored: any entry, row
block or column block can be regenerated on demand.

All arithmetic is done on ``uint64`` with wrap-around, so results are
bit-identical on every platform.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
COL_MULT = 0xC2B2AE3D27D4EB4F
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


class Generator(enum.IntEnum):
    STREAM = 0
    HASH = 1
    STRUCTURED = 2

    @classmethod
    def parse(cls, name: str | int | "Generator") -> "Generator":
        if isinstance(name, Generator):
            return name
        if isinstance(name, int):
            return cls(name)
        aliases = {
            "stream": cls.STREAM, "sequential": cls.STREAM,
            "hash": cls.HASH, "coordinate": cls.HASH,
            "structured": cls.STRUCTURED, "nofm": cls.STRUCTURED,
        }
        try:
            return aliases[name.lower()]
        except KeyError:
            raise ValueError(f"unknown generator {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class WeightSpec:
    seed: int
    layer_tag: int
    rows: int
    cols: int
    threshold: float
    generator: Generator = Generator.STREAM
    n: int = 0
    m: int = 0

    def __post_init__(self):
        object.__setattr__(self, "generator", Generator.parse(self.generator))
        if not (0 <= self.seed <= MASK64 and 0 <= self.layer_tag <= MASK64):
            raise ValueError("seed and layer_tag must be 64-bit unsigned words")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"shape must be positive, got {self.rows}x{self.cols}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.generator is Generator.STRUCTURED:
            if not (1 <= self.n <= self.m):
                raise ValueError(f"structured sparsity needs 1 <= n <= m, got {self.n}:{self.m}")
            if self.cols % self.m:
                raise ValueError(f"cols={self.cols} is not divisible by m={self.m}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def with_threshold(self, t: float) -> "WeightSpec":
        return WeightSpec(self.seed, self.layer_tag, self.rows, self.cols, t,
                          self.generator, self.n, self.m)


# --- scalar primitives (python ints) ---------------------------------------

def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int, reduced mod 2**64."""
    z = x & MASK64
    z ^= z >> 30
    z = (z * _M1) & MASK64
    z ^= z >> 27
    z = (z * _M2) & MASK64
    z ^= z >> 31
    return z


def stream_word(seed: int, index: int) -> int:
    """Word at position ``index`` of the SplitMix stream started at ``seed``."""
    return mix64((seed + (index + 1) * GOLDEN) & MASK64)


def coord_word(spec: WeightSpec, row: int, col: int) -> int:
    if not (0 <= row < spec.rows and 0 <= col < spec.cols):
        raise IndexError(f"entry ({row}, {col}) outside {spec.rows}x{spec.cols}")
    base = mix64(spec.seed ^ spec.layer_tag)
    return mix64(base ^ ((row * GOLDEN) & MASK64) ^ ((col * COL_MULT) & MASK64))


def word_to_uniform(word: int) -> float:
    u = (word >> 11) * 2.0 ** -53
    return 2.0 * u - 1.0


def ternarize(w: float, t: float) -> int:
    if abs(w) <= t:
        return 0
    return 1 if w > 0 else -1


def expected_sparsity(t: float) -> float:
    """Expected zero fraction of a matrix thresholded at ``t``.

    Uniform samples on [-1, 1) land in [-t, t] with probability t, so the
    threshold *is* the expected sparsity.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return t


# --- vectorized primitives (uint64 arrays) -----------------------------------

# uint64 wrap-around is the intended modular arithmetic
def _wrap():
    return np.errstate(over="ignore")


def mix64_array(x) -> np.ndarray:
    z = np.array(x, dtype=np.uint64)
    with _wrap():
        z ^= z >> np.uint64(30)
        z *= np.uint64(_M1)
        z ^= z >> np.uint64(27)
        z *= np.uint64(_M2)
        z ^= z >> np.uint64(31)
    return z


def stream_words(seed: int, index) -> np.ndarray:
    idx = np.asarray(index, dtype=np.uint64)
    with _wrap():
        return mix64_array(np.uint64(seed) + (idx + np.uint64(1)) * np.uint64(GOLDEN))


def coord_words(spec: WeightSpec, rows, cols) -> np.ndarray:
    """Coordinate hashes for broadcastable index arrays ``rows`` and ``cols``."""
    r = np.asarray(rows, dtype=np.uint64)
    c = np.asarray(cols, dtype=np.uint64)
    base = np.uint64(mix64(spec.seed ^ spec.layer_tag))
    with _wrap():
        return mix64_array(base ^ (r * np.uint64(GOLDEN)) ^ (c * np.uint64(COL_MULT)))


def words_to_uniform(words) -> np.ndarray:
    u = (np.asarray(words, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return 2.0 * u - 1.0


def ternarize_array(w, t: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = np.sign(w).astype(np.int8)
    out[np.abs(w) <= t] = 0
    return out


# --- generation ---------------------------------------------------------------

def _stream_seed(spec: WeightSpec) -> int:
    return spec.seed ^ mix64(spec.layer_tag)


def raw_words(spec: WeightSpec, rows, cols) -> np.ndarray:
    """Raw 64-bit words for a broadcastable grid of coordinates.

    Structured N:M matrices draw their words from the sequential stream.
    """
    r = np.asarray(rows, dtype=np.uint64)
    c = np.asarray(cols, dtype=np.uint64)
    if spec.generator is Generator.HASH:
        return coord_words(spec, r, c)
    with _wrap():
        return stream_words(_stream_seed(spec), r * np.uint64(spec.cols) + c)


def _structured(words: np.ndarray, n: int, m: int) -> np.ndarray:
    rows, cols = words.shape
    groups = words.reshape(rows, cols // m, m)
    # stable sort keeps the lower column first among equal words
    order = np.argsort(groups, axis=-1, kind="stable")
    chosen = np.zeros(groups.shape, dtype=bool)
    np.put_along_axis(chosen, order[..., :n], True, axis=-1)
    sign = np.where(groups & np.uint64(1), 1, -1).astype(np.int8)
    return np.where(chosen, sign, 0).astype(np.int8).reshape(rows, cols)


def generate_block(spec: WeightSpec, row0: int, row1: int, col0: int, col1: int) -> np.ndarray:
    """Entries ``[row0:row1, col0:col1]`` as int8, without building the rest.

    For structured generators the column range must be aligned to groups of m.
    """
    r = np.arange(row0, row1, dtype=np.uint64)[:, None]
    c = np.arange(col0, col1, dtype=np.uint64)[None, :]
    words = raw_words(spec, r, c)
    if spec.generator is Generator.STRUCTURED:
        if col0 % spec.m or col1 % spec.m:
            raise ValueError("structured blocks must align to groups of m columns")
        return _structured(words, spec.n, spec.m)
    return ternarize_array(words_to_uniform(words), spec.threshold)


def generate(spec: WeightSpec):
    """Materialize the full matrix described by ``spec``."""
    from .linalg import DenseTernary

    return DenseTernary(generate_block(spec, 0, spec.rows, 0, spec.cols))


def entry(spec: WeightSpec, row: int, col: int) -> int:
    """Single entry computed in isolation (random access)."""
    if not (0 <= row < spec.rows and 0 <= col < spec.cols):
        raise IndexError(f"entry ({row}, {col}) outside {spec.rows}x{spec.cols}")
    if spec.generator is Generator.STRUCTURED:
        g0 = (col // spec.m) * spec.m
        return int(generate_block(spec, row, row + 1, g0, g0 + spec.m)[0, col - g0])
    if spec.generator is Generator.HASH:
        word = coord_word(spec, row, col)
    else:
        word = stream_word(_stream_seed(spec), row * spec.cols + col)
    return ternarize(word_to_uniform(word), spec.threshold)
