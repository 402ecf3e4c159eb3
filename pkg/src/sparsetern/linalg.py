"""Multiplication-free kernels for ternary matrices.

Every kernel evaluates, for each output, ``sum(x[I+]) - sum(x[I-])`` with a
fixed accumulation order: the plus-sum is accumulated in ascending column
order starting from 0, then the minus-sum likewise, then one subtraction.
Because the order is fixed, the dense, index-pair, bitplane and on-the-fly
paths return bit-identical results.

Single vectors go through per-representation kernels that accumulate with
``np.add(..., where=mask)``.  Batches of 32+ vectors (1x1 convolutions over
time) go through a gather engine in channel-major layout.  No product is
formed anywhere in this module except in :func:`reference_float_matvec`,
which exists as a test oracle.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .weightgen import Generator, WeightSpec, generate_block

WORD = 64


@dataclass
class OpCounter:
    multiplications: int = 0
    additions: int = 0
    weight_bytes_read: int = 0

    def merge(self, other: "OpCounter") -> None:
        self.multiplications += other.multiplications
        self.additions += other.additions
        self.weight_bytes_read += other.weight_bytes_read


# --- representations ---------------------------------------------------------

def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DenseTernary:
    """Row-major int8 matrix with entries in {-1, 0, +1}."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=np.int8, copy=True)
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D matrix, got shape {e.shape}")
        if not np.isin(e, (-1, 0, 1)).all():
            raise ValueError("ternary entries must be -1, 0 or +1")
        object.__setattr__(self, "entries", _freeze(e))

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    @cached_property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.entries))

    @cached_property
    def plus(self) -> np.ndarray:
        return _freeze(self.entries == 1)

    @cached_property
    def minus(self) -> np.ndarray:
        return _freeze(self.entries == -1)

    def weight_bytes(self) -> int:
        return self.rows * self.cols

    def __eq__(self, other):
        return isinstance(other, DenseTernary) and np.array_equal(self.entries, other.entries)


@dataclass(frozen=True, eq=False)
class IndexPairMatrix:
    """Per-row ascending column lists of +1 (``I+``) and -1 (``I-``) entries.

    Stored CSR-style: ``plus_idx[plus_ptr[r]:plus_ptr[r+1]]`` is row r's I+.
    """

    rows: int
    cols: int
    plus_ptr: np.ndarray
    plus_idx: np.ndarray
    minus_ptr: np.ndarray
    minus_idx: np.ndarray

    def __post_init__(self):
        for name in ("plus_ptr", "minus_ptr"):
            object.__setattr__(self, name, _freeze(np.array(getattr(self, name), dtype=np.int64)))
        for name in ("plus_idx", "minus_idx"):
            object.__setattr__(self, name, _freeze(np.array(getattr(self, name), dtype=np.int32)))
        for ptr, idx in ((self.plus_ptr, self.plus_idx), (self.minus_ptr, self.minus_idx)):
            if ptr.shape != (self.rows + 1,) or ptr[0] != 0 or ptr[-1] != idx.size:
                raise ValueError("malformed row pointer array")
            if idx.size and (idx.min() < 0 or idx.max() >= self.cols):
                raise ValueError("column index out of range")
            for r in range(self.rows):
                seg = idx[ptr[r]:ptr[r + 1]]
                if seg.size > 1 and not (np.diff(seg) > 0).all():
                    raise ValueError(f"row {r}: indices must be strictly ascending")
        for r in range(self.rows):
            if np.intersect1d(self.row_plus(r), self.row_minus(r)).size:
                raise ValueError(f"row {r}: I+ and I- overlap")

    @classmethod
    def from_lists(cls, cols: int, plus: list, minus: list) -> "IndexPairMatrix":
        def pack(lists):
            ptr = np.zeros(len(lists) + 1, dtype=np.int64)
            ptr[1:] = np.cumsum([len(l) for l in lists])
            idx = np.concatenate([np.asarray(l, dtype=np.int32) for l in lists]) if lists else []
            return ptr, idx

        if len(plus) != len(minus):
            raise ValueError("plus and minus must list the same number of rows")
        pp, pi = pack(plus)
        mp, mi = pack(minus)
        return cls(len(plus), cols, pp, pi, mp, mi)

    def row_plus(self, r: int) -> np.ndarray:
        return self.plus_idx[self.plus_ptr[r]:self.plus_ptr[r + 1]]

    def row_minus(self, r: int) -> np.ndarray:
        return self.minus_idx[self.minus_ptr[r]:self.minus_ptr[r + 1]]

    @property
    def nnz(self) -> int:
        return int(self.plus_idx.size + self.minus_idx.size)

    def weight_bytes(self) -> int:
        return 4 * self.nnz + 8 * 2 * (self.rows + 1)

    @cached_property
    def _padded(self):
        # [rows, k] gather tables padded with column 0 plus validity masks
        out = []
        for ptr, idx in ((self.plus_ptr, self.plus_idx), (self.minus_ptr, self.minus_idx)):
            lens = np.diff(ptr)
            k = int(lens.max()) if lens.size else 0
            table = np.zeros((self.rows, k), dtype=np.int64)
            valid = np.arange(k)[None, :] < lens[:, None]
            table[valid] = idx
            out.append((table, valid))
        return out

    def __eq__(self, other):
        return (isinstance(other, IndexPairMatrix) and (self.rows, self.cols) == (other.rows, other.cols)
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("plus_ptr", "plus_idx", "minus_ptr", "minus_idx")))


@dataclass(frozen=True, eq=False)
class PackedBitplanes:
    """Two bitmasks per row: bit c of word c//64 flags a +1 (or -1) at column c."""

    rows: int
    cols: int
    plus_mask: np.ndarray
    minus_mask: np.ndarray

    def __post_init__(self):
        words = -(-self.cols // WORD)
        for name in ("plus_mask", "minus_mask"):
            a = np.array(getattr(self, name), dtype=np.uint64)
            if a.shape != (self.rows, words):
                raise ValueError(f"{name} must have shape {(self.rows, words)}, got {a.shape}")
            object.__setattr__(self, name, _freeze(a))
        if (self.plus_mask & self.minus_mask).any():
            raise ValueError("a column cannot be both +1 and -1")
        tail = self.cols % WORD
        if tail:
            spill = ~np.uint64((1 << tail) - 1)
            if ((self.plus_mask[:, -1] | self.minus_mask[:, -1]) & spill).any():
                raise ValueError("bits beyond the last column must be zero")

    @property
    def words(self) -> int:
        return self.plus_mask.shape[1]

    @cached_property
    def nnz(self) -> int:
        return int(_unpack(self.plus_mask, self.cols).sum() + _unpack(self.minus_mask, self.cols).sum())

    def weight_bytes(self) -> int:
        return 2 * 8 * self.rows * self.words

    def __eq__(self, other):
        return (isinstance(other, PackedBitplanes) and (self.rows, self.cols) == (other.rows, other.cols)
                and np.array_equal(self.plus_mask, other.plus_mask)
                and np.array_equal(self.minus_mask, other.minus_mask))


def _pack(mask: np.ndarray) -> np.ndarray:
    rows, cols = mask.shape
    words = -(-cols // WORD)
    padded = np.zeros((rows, words * WORD), dtype=bool)
    padded[:, :cols] = mask
    packed = np.packbits(padded, axis=1, bitorder="little")
    return packed.view("<u8").astype(np.uint64).reshape(rows, words)


def _unpack(words: np.ndarray, cols: int) -> np.ndarray:
    as_bytes = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :cols].astype(bool)


# --- conversions ---------------------------------------------------------------

def to_dense(m) -> DenseTernary:
    if isinstance(m, DenseTernary):
        return m
    if isinstance(m, WeightSpec):
        return DenseTernary(generate_block(m, 0, m.rows, 0, m.cols))
    if isinstance(m, IndexPairMatrix):
        e = np.zeros((m.rows, m.cols), dtype=np.int8)
        for r in range(m.rows):
            e[r, m.row_plus(r)] = 1
            e[r, m.row_minus(r)] = -1
        return DenseTernary(e)
    if isinstance(m, PackedBitplanes):
        e = _unpack(m.plus_mask, m.cols).astype(np.int8) - _unpack(m.minus_mask, m.cols).astype(np.int8)
        return DenseTernary(e)
    raise TypeError(f"not a ternary matrix: {type(m).__name__}")


def to_index_pairs(m) -> IndexPairMatrix:
    if isinstance(m, IndexPairMatrix):
        return m
    d = to_dense(m)
    rr, cc = np.nonzero(d.plus)
    pp = np.zeros(d.rows + 1, dtype=np.int64)
    pp[1:] = np.cumsum(np.bincount(rr, minlength=d.rows))
    rm, cm = np.nonzero(d.minus)
    mp = np.zeros(d.rows + 1, dtype=np.int64)
    mp[1:] = np.cumsum(np.bincount(rm, minlength=d.rows))
    # np.nonzero walks row-major, so columns come out ascending per row
    return IndexPairMatrix(d.rows, d.cols, pp, cc, mp, cm)


def to_bitplanes(m) -> PackedBitplanes:
    if isinstance(m, PackedBitplanes):
        return m
    d = to_dense(m)
    return PackedBitplanes(d.rows, d.cols, _pack(d.plus), _pack(d.minus))


_CONVERTERS = {
    "dense": to_dense, DenseTernary: to_dense,
    "index": to_index_pairs, IndexPairMatrix: to_index_pairs,
    "bitplane": to_bitplanes, PackedBitplanes: to_bitplanes,
}


def convert(m, to):
    """Convert between representations; ``to`` is a class or 'dense'/'index'/'bitplane'."""
    try:
        return _CONVERTERS[to](m)
    except KeyError:
        raise ValueError(f"unknown target representation {to!r}") from None


def transpose_dense(m) -> DenseTernary:
    return DenseTernary(to_dense(m).entries.T)


def shape_of(m) -> tuple[int, int]:
    return m.rows, m.cols


def nnz_of(m) -> int:
    if isinstance(m, WeightSpec):
        return to_dense(m).nnz
    return m.nnz


def weight_bytes_of(m) -> int:
    """Weight bytes one kernel call reads; zero when regenerating on the fly."""
    if isinstance(m, WeightSpec):
        return 0
    return m.weight_bytes()


# --- batched kernels: X [n, cols] -> [n, rows] -----------------------------------

def _acc_dtype(x: np.ndarray):
    return x.dtype if x.dtype in (np.float32, np.float64) else np.float32


def _forward_dense(plus, minus, X, accp, accm, col0=0):
    has_p = plus.any(axis=0)
    has_m = minus.any(axis=0)
    for j in range(plus.shape[1]):
        xc = X[:, col0 + j, None]
        if has_p[j]:
            np.add(accp, xc, out=accp, where=plus[:, j])
        if has_m[j]:
            np.add(accm, xc, out=accm, where=minus[:, j])


def _forward(m, X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    accp = np.zeros((n, m.rows), dtype=X.dtype)
    accm = np.zeros((n, m.rows), dtype=X.dtype)
    if isinstance(m, DenseTernary):
        _forward_dense(m.plus, m.minus, X, accp, accm)
    elif isinstance(m, IndexPairMatrix):
        for acc, (table, valid) in zip((accp, accm), m._padded):
            # position k of every row's list; lists are ascending so order is canonical
            for k in range(table.shape[1]):
                np.add(acc, X[:, table[:, k]], out=acc, where=valid[:, k])
    elif isinstance(m, PackedBitplanes):
        for j in range(m.cols):
            w, b = divmod(j, WORD)
            bit = np.uint64(b)
            xc = X[:, j, None]
            sel = ((m.plus_mask[:, w] >> bit) & np.uint64(1)).astype(bool)
            if sel.any():
                np.add(accp, xc, out=accp, where=sel)
            sel = ((m.minus_mask[:, w] >> bit) & np.uint64(1)).astype(bool)
            if sel.any():
                np.add(accm, xc, out=accm, where=sel)
    elif isinstance(m, WeightSpec):
        step = _block_width(m)
        for c0 in range(0, m.cols, step):
            c1 = min(c0 + step, m.cols)
            blk = generate_block(m, 0, m.rows, c0, c1)
            _forward_dense(blk == 1, blk == -1, X, accp, accm, col0=c0)
    else:
        raise TypeError(f"not a ternary matrix: {type(m).__name__}")
    return accp - accm


def _block_width(spec: WeightSpec) -> int:
    if spec.generator is Generator.STRUCTURED:
        return spec.m * max(1, WORD // spec.m)
    return WORD


def _backward_dense(plus, minus, G, accp, accm, row0=0):
    has_p = plus.any(axis=1)
    has_m = minus.any(axis=1)
    for i in range(plus.shape[0]):
        gr = G[:, row0 + i, None]
        if has_p[i]:
            np.add(accp, gr, out=accp, where=plus[i])
        if has_m[i]:
            np.add(accm, gr, out=accm, where=minus[i])


def _transpose(m, G: np.ndarray) -> np.ndarray:
    n = G.shape[0]
    accp = np.zeros((n, m.cols), dtype=G.dtype)
    accm = np.zeros((n, m.cols), dtype=G.dtype)
    if isinstance(m, DenseTernary):
        _backward_dense(m.plus, m.minus, G, accp, accm)
    elif isinstance(m, IndexPairMatrix):
        for r in range(m.rows):
            gr = G[:, r, None]
            p, q = m.row_plus(r), m.row_minus(r)
            if p.size:
                accp[:, p] += gr
            if q.size:
                accm[:, q] += gr
    elif isinstance(m, PackedBitplanes):
        for r in range(m.rows):
            gr = G[:, r, None]
            sel = _unpack(m.plus_mask[r:r + 1], m.cols)[0]
            if sel.any():
                np.add(accp, gr, out=accp, where=sel)
            sel = _unpack(m.minus_mask[r:r + 1], m.cols)[0]
            if sel.any():
                np.add(accm, gr, out=accm, where=sel)
    elif isinstance(m, WeightSpec):
        for r0 in range(0, m.rows, WORD):
            r1 = min(r0 + WORD, m.rows)
            blk = generate_block(m, r0, r1, 0, m.cols)
            _backward_dense(blk == 1, blk == -1, G, accp, accm, row0=r0)
    else:
        raise TypeError(f"not a ternary matrix: {type(m).__name__}")
    return accp - accm


def _record(counter: OpCounter | None, m, vectors: int, outputs: int) -> None:
    if counter is None:
        return
    counter.additions += vectors * (nnz_of(m) + outputs)
    counter.weight_bytes_read += weight_bytes_of(m)


def _as_float(x) -> np.ndarray:
    x = np.asarray(x)
    return x if x.dtype in (np.float32, np.float64) else x.astype(np.float32)


# --- batched engine: channel-major [inputs, n] -> [outputs, n] ----------------------
#
# Walks padded per-output index tables one position at a time, gathering whole
# contiguous input rows.  Padding points at an extra all-(+0.0) row; adding
# +0.0 to an accumulator that started at +0.0 never changes a bit, so the
# canonical order is preserved exactly.

BATCH_CUTOFF = 32


def _tables(plus: np.ndarray, minus: np.ndarray):
    """Padded ascending index tables ([outputs, k] each) from boolean masks."""
    out = []
    sentinel = plus.shape[1]
    for mask in (plus, minus):
        lens = mask.sum(axis=1)
        k = int(lens.max()) if lens.size else 0
        table = np.full((mask.shape[0], k), sentinel, dtype=np.intp)
        table[np.arange(k)[None, :] < lens[:, None]] = np.nonzero(mask)[1]
        out.append(table)
    return out


def _gather(tables, Xt: np.ndarray) -> np.ndarray:
    ext = np.concatenate([Xt, np.zeros((1, Xt.shape[1]), dtype=Xt.dtype)])
    accs = []
    for table in tables:
        acc = np.zeros((table.shape[0], Xt.shape[1]), dtype=Xt.dtype)
        for k in range(table.shape[1]):
            acc += ext[table[:, k]]
        accs.append(acc)
    return accs[0] - accs[1]


def _fwd_tables(m):
    cache = m.__dict__
    if "_fwd" not in cache:
        if isinstance(m, IndexPairMatrix):
            tabs = []
            for table, valid in m._padded:
                t = np.where(valid, table, m.cols).astype(np.intp)
                tabs.append(t)
            cache["_fwd"] = tabs
        else:
            d = to_dense(m)
            cache["_fwd"] = _tables(d.plus, d.minus)
    return cache["_fwd"]


def _bwd_tables(m):
    cache = m.__dict__
    if "_bwd" not in cache:
        d = to_dense(m)
        cache["_bwd"] = _tables(d.plus.T, d.minus.T)
    return cache["_bwd"]


def _forward_cm(m, Xt: np.ndarray) -> np.ndarray:
    if isinstance(m, WeightSpec):
        out = np.empty((m.rows, Xt.shape[1]), dtype=Xt.dtype)
        for r0 in range(0, m.rows, WORD):
            r1 = min(r0 + WORD, m.rows)
            blk = generate_block(m, r0, r1, 0, m.cols)
            out[r0:r1] = _gather(_tables(blk == 1, blk == -1), Xt)
        return out
    return _gather(_fwd_tables(m), Xt)


def _transpose_cm(m, Gt: np.ndarray) -> np.ndarray:
    if isinstance(m, WeightSpec):
        out = np.empty((m.cols, Gt.shape[1]), dtype=Gt.dtype)
        step = _block_width(m)
        for c0 in range(0, m.cols, step):
            c1 = min(c0 + step, m.cols)
            blk = generate_block(m, 0, m.rows, c0, c1).T
            out[c0:c1] = _gather(_tables(blk == 1, blk == -1), Gt)
        return out
    return _gather(_bwd_tables(m), Gt)


def _apply_cm(fn_small, fn_big, m, Xt: np.ndarray, workers: int) -> np.ndarray:
    n = Xt.shape[1]
    if n < BATCH_CUTOFF:
        return fn_small(m, np.ascontiguousarray(Xt.T)).T
    if workers <= 1 or n < 2 * workers * BATCH_CUTOFF:
        return fn_big(m, Xt)
    chunks = np.array_split(np.arange(n), workers)
    with ThreadPoolExecutor(workers) as pool:
        parts = pool.map(lambda idx: fn_big(m, np.ascontiguousarray(Xt[:, idx])), chunks)
        return np.concatenate(list(parts), axis=1)


# --- public kernels --------------------------------------------------------------

def matvec(m, x, counter: OpCounter | None = None) -> np.ndarray:
    """``y[r] = sum(x[I+_r]) - sum(x[I-_r])`` for any representation.

    Additions are counted as ``|I+| + |I-|`` per row plus one for the final
    subtraction; no multiplication is performed.
    """
    x = _as_float(x)
    if x.shape != (m.cols,):
        raise ValueError(f"matrix has {m.cols} columns but x has shape {x.shape}")
    y = _forward(m, x[None, :])[0]
    _record(counter, m, 1, m.rows)
    return y


def matvec_transpose(m, g, counter: OpCounter | None = None) -> np.ndarray:
    g = _as_float(g)
    if g.shape != (m.rows,):
        raise ValueError(f"matrix has {m.rows} rows but g has shape {g.shape}")
    y = _transpose(m, g[None, :])[0]
    _record(counter, m, 1, m.cols)
    return y


def pointwise_apply(m, X, counter: OpCounter | None = None, workers: int = 1) -> np.ndarray:
    """1x1 convolution: apply ``m`` to the channel vector at every (batch, time).

    ``X`` has shape [batch, cols, time]; result is [batch, rows, time].
    Splitting over (batch, time) across ``workers`` threads leaves every
    output's accumulation order untouched.
    """
    X = _as_float(X)
    if X.ndim != 3 or X.shape[1] != m.cols:
        raise ValueError(f"expected [batch, {m.cols}, time] input, got {X.shape}")
    b, c, t = X.shape
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(c, b * t)
    out = _apply_cm(_forward, _forward_cm, m, Xt, workers)
    _record(counter, m, b * t, m.rows)
    return np.ascontiguousarray(out.reshape(m.rows, b, t).transpose(1, 0, 2))


def pointwise_apply_transpose(m, G, counter: OpCounter | None = None, workers: int = 1) -> np.ndarray:
    """Input gradient of :func:`pointwise_apply`: [batch, rows, time] -> [batch, cols, time]."""
    G = _as_float(G)
    if G.ndim != 3 or G.shape[1] != m.rows:
        raise ValueError(f"expected [batch, {m.rows}, time] gradient, got {G.shape}")
    b, r, t = G.shape
    Gt = np.ascontiguousarray(G.transpose(1, 0, 2)).reshape(r, b * t)
    out = _apply_cm(_transpose, _transpose_cm, m, Gt, workers)
    _record(counter, m, b * t, m.cols)
    return np.ascontiguousarray(out.reshape(m.cols, b, t).transpose(1, 0, 2))


def reference_float_matvec(m, x, counter: OpCounter | None = None) -> np.ndarray:
    """Oracle: ternary weights cast to floats, ordinary multiply-accumulate.

    Positive and negative weights feed separate accumulators, column by
    column, so the float order matches the canonical kernels exactly.
    """
    d = to_dense(m)
    x = _as_float(x)
    if x.shape != (d.cols,):
        raise ValueError(f"matrix has {d.cols} columns but x has shape {x.shape}")
    wp = d.plus.astype(x.dtype)
    wm = d.minus.astype(x.dtype)
    p = np.zeros(d.rows, dtype=x.dtype)
    q = np.zeros(d.rows, dtype=x.dtype)
    for c in range(d.cols):
        p += wp[:, c] * x[c]
        q += wm[:, c] * x[c]
    if counter is not None:
        counter.multiplications += 2 * d.rows * d.cols
        counter.additions += 2 * d.rows * d.cols + d.rows
        counter.weight_bytes_read += 4 * d.rows * d.cols
    return p - q
