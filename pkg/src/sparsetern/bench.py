"""Kernel timing and static cost accounting.

Timing is informative only; every kernel must first reproduce the float
reference bit-for-bit or the benchmark aborts.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import linalg
from .linalg import OpCounter
from .model import Network
from .tcsconv import Block, FloatPointwise, TernaryPointwise
from .weightgen import Generator, WeightSpec

KERNELS = ("reference", "dense", "index", "bitplane", "onthefly")


class BenchMismatch(RuntimeError):
    pass


@dataclass
class BenchRow:
    kernel: str
    rows: int
    cols: int
    t: float
    reps: int
    median_ns: int
    multiplications: int
    additions: int
    weight_bytes_read: int


def _operand(kernel, spec: WeightSpec):
    if kernel == "onthefly":
        return spec
    if kernel == "reference":
        return linalg.to_dense(spec)
    return linalg.convert(linalg.to_dense(spec), kernel)


def _call(kernel, m, x, counter):
    if kernel == "reference":
        return linalg.reference_float_matvec(m, x, counter)
    return linalg.matvec(m, x, counter)


def bench_matvec(shapes, t_list, reps: int = 5, seed: int = 0, warmup: int = 1,
                 generator=Generator.STREAM, kernels=KERNELS) -> list[BenchRow]:
    """Median wall time per matvec for every kernel, shape and threshold."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    rows_out = []
    rng = np.random.default_rng(seed)
    for tag, ((r, c), t) in enumerate((s, t) for s in shapes for t in t_list):
        spec = WeightSpec(seed, tag, r, c, t, generator)
        x = rng.standard_normal(c).astype(np.float32)
        expected = linalg.reference_float_matvec(linalg.to_dense(spec), x)
        for kernel in kernels:
            m = _operand(kernel, spec)
            counter = OpCounter()
            y = _call(kernel, m, x, counter)
            if y.tobytes() != expected.tobytes():
                raise BenchMismatch(f"{kernel} disagrees with the reference for {r}x{c}, t={t}")
            for _ in range(warmup):
                _call(kernel, m, x, None)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter_ns()
                _call(kernel, m, x, None)
                times.append(time.perf_counter_ns() - t0)
            rows_out.append(BenchRow(kernel, r, c, t, reps, int(statistics.median(times)),
                                     counter.multiplications, counter.additions, counter.weight_bytes_read))
    return rows_out


def bench_pointwise_threads(rows: int, cols: int, t: float, batch: int, time_len: int,
                            thread_counts=(1, 2, 4), reps: int = 3, seed: int = 0):
    """Scaling of :func:`linalg.pointwise_apply` with worker threads: [(threads, median_ns)]."""
    spec = WeightSpec(seed, 0, rows, cols, t)
    m = linalg.to_dense(spec)
    X = np.random.default_rng(seed).standard_normal((batch, cols, time_len)).astype(np.float32)
    ref = linalg.pointwise_apply(m, X)
    out = []
    for n in thread_counts:
        if linalg.pointwise_apply(m, X, workers=n).tobytes() != ref.tobytes():
            raise BenchMismatch(f"threaded pointwise_apply with {n} workers changed the result")
        times = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            linalg.pointwise_apply(m, X, workers=n)
            times.append(time.perf_counter_ns() - t0)
        out.append((n, int(statistics.median(times))))
    return out


def bench_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kernel", "rows", "cols", "t", "reps", "median_ns",
                "multiplications", "additions", "weight_bytes_read"])
    for r in rows:
        w.writerow([r.kernel, r.rows, r.cols, repr(r.t), r.reps, r.median_ns,
                    r.multiplications, r.additions, r.weight_bytes_read])
    return buf.getvalue()


# --- static cost model ------------------------------------------------------------------

@dataclass
class LayerCost:
    name: str
    kind: str
    shape: tuple
    weights: int
    multiplications: int
    additions: int
    weight_bytes_read: int
    activation_bytes_read: int
    activation_bytes_written: int
    t: float | None = None


@dataclass
class CostReport:
    layers: list = field(default_factory=list)

    def total(self, attr: str) -> int:
        return sum(getattr(l, attr) for l in self.layers)

    def weights_of(self, kind: str) -> int:
        return sum(l.weights for l in self.layers if l.kind == kind)

    @property
    def pointwise_dominates(self) -> bool:
        """True when 1x1 weights (float or implicit ternary) outnumber depthwise weights."""
        pw = self.weights_of("pointwise") + self.weights_of("ternary")
        return pw > self.weights_of("depthwise")

    def to_dict(self) -> dict:
        d = {"layers": [asdict(l) for l in self.layers]}
        for attr in ("multiplications", "additions", "weight_bytes_read"):
            d[attr] = self.total(attr)
        d["pointwise_dominates"] = self.pointwise_dominates
        return d


def _block_costs(block: Block, batch: int, T: int, on_the_fly: bool) -> list[LayerCost]:
    out = []
    positions = batch * T

    def pointwise(layer, name):
        if isinstance(layer, TernaryPointwise):
            nnz = layer.matrix.nnz
            wbytes = 0 if on_the_fly else linalg.weight_bytes_of(layer._op)
            spec_t = layer.spec.threshold if layer.spec is not None else None
            return LayerCost(name, "ternary", (layer.c_out, layer.c_in), layer.c_out * layer.c_in,
                             0, positions * (nnz + layer.c_out), wbytes,
                             4 * positions * layer.c_in, 4 * positions * layer.c_out, spec_t)
        assert isinstance(layer, FloatPointwise)
        n = layer.c_out * layer.c_in
        return LayerCost(name, "pointwise", (layer.c_out, layer.c_in), n,
                         positions * n, positions * layer.c_out * (layer.c_in - 1), 4 * n,
                         4 * positions * layer.c_in, 4 * positions * layer.c_out)

    def bn(layer, name):
        e = positions * layer.channels
        # inference form: gamma * (x - mean) * inv + beta
        return LayerCost(name, "batchnorm", (layer.channels,), 2 * layer.channels,
                         2 * e, 2 * e, 4 * 4 * layer.channels, 4 * e, 4 * e)

    for u in block.units:
        dw = u.depthwise
        e = positions * dw.channels
        out.append(LayerCost(u.depthwise.weight.name.rsplit(".", 1)[0], "depthwise", (dw.channels, dw.kernel),
                             dw.channels * dw.kernel, e * dw.kernel, e * (dw.kernel - 1),
                             4 * dw.channels * dw.kernel, 4 * e, 4 * e))
        out.append(pointwise(u.pointwise, u.bn.gamma.name.rsplit(".", 2)[0] + ".pw"))
        out.append(bn(u.bn, u.bn.gamma.name.rsplit(".", 1)[0]))
    if block.skip.proj is not None:
        out.append(pointwise(block.skip.proj, block.skip.proj.name))
    if block.skip.bn is not None:
        out.append(bn(block.skip.bn, block.skip.bn.gamma.name.rsplit(".", 1)[0]))
    return out


def model_cost(network: Network, input_shape, on_the_fly: bool = True) -> CostReport:
    """Per-layer operation and byte counts for one inference forward pass.

    ``input_shape`` is (batch, in_channels, T).  Ternary layers count
    ``nnz + rows`` additions per position, the same rule the kernels use.
    """
    batch, channels, T = input_shape
    if channels != network.config.in_channels:
        raise ValueError(f"network expects {network.config.in_channels} input channels, got {channels}")
    report = CostReport()
    for b in network.stages:
        report.layers += _block_costs(b, batch, T, on_the_fly)
    W, k = network.config.W, network.config.num_classes
    report.layers.append(LayerCost("pool", "pool", (W,), 0, batch * W, batch * W * (T - 1), 0,
                                   4 * batch * W * T, 4 * batch * W))
    report.layers.append(LayerCost("head", "linear", (k, W), k * W + k, batch * k * W, batch * k * W,
                                   4 * (k * W + k), 4 * batch * W, 4 * batch * k))
    return report
