"""Time-channel separable residual blocks with hand-written backward passes.

Activations are ``[batch, channels, time]`` arrays.  A repetition inside a
block is depthwise conv -> pointwise (1x1) conv -> batch norm -> ReLU; the
skip branch joins before the last ReLU.  A frozen ternary pointwise layer has
no parameters: its input gradient is the transpose product and it never
receives a weight gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .linalg import DenseTernary, OpCounter
from .weightgen import WeightSpec

DTYPE = np.float32

SKIP_MODES = ("trained", "ternary", "identity", "none")
POINTWISE_MODES = ("float", "ternary")


class StaleCacheError(RuntimeError):
    pass


@dataclass(eq=False)
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _check_channels(x: np.ndarray, channels: int, who: str) -> None:
    if x.ndim != 3 or x.shape[1] != channels:
        raise ValueError(f"{who}: expected [batch, {channels}, time], got {x.shape}")


# --- elementwise ---------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


# --- layers ----------------------------------------------------------------------

class Depthwise:
    """Per-channel 1D convolution, odd kernel, stride 1, zero 'same' padding."""

    def __init__(self, channels: int, kernel: int, rng=None, name="dw", weights=None):
        if kernel < 1 or kernel % 2 == 0:
            raise ValueError(f"kernel length must be odd, got {kernel}")
        if weights is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weights = _uniform(rng, np.sqrt(3.0 / kernel), (channels, kernel))
        weights = np.array(weights, dtype=DTYPE)
        if weights.shape != (channels, kernel):
            raise ValueError(f"weights must have shape {(channels, kernel)}")
        self.channels, self.kernel = channels, kernel
        self.weight = Param(f"{name}.weight", weights)

    def params(self):
        return [self.weight]

    def _pad(self, x):
        p = (self.kernel - 1) // 2
        return np.pad(x, ((0, 0), (0, 0), (p, p)))

    def forward(self, x):
        _check_channels(x, self.channels, "depthwise")
        t = x.shape[2]
        xp = self._pad(x)
        w = self.weight.value
        y = np.zeros_like(x)
        for k in range(self.kernel):
            y += w[None, :, k, None] * xp[:, :, k:k + t]
        return y, x

    def backward(self, x, dy):
        if dy.shape != x.shape:
            raise ValueError(f"depthwise: gradient shape {dy.shape} != input shape {x.shape}")
        t = x.shape[2]
        p = (self.kernel - 1) // 2
        xp = self._pad(x)
        w = self.weight.value
        dxp = np.zeros_like(xp)
        for k in range(self.kernel):
            dxp[:, :, k:k + t] += w[None, :, k, None] * dy
            self.weight.grad[:, k] += (dy * xp[:, :, k:k + t]).sum(axis=(0, 2))
        return dxp[:, :, p:p + t]


class BatchNorm:
    """Per-channel batch norm over (batch, time) positions."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, name="bn"):
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=DTYPE))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=DTYPE))
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, training=True):
        _check_channels(x, self.channels, "batchnorm")
        g = self.gamma.value[None, :, None]
        b = self.beta.value[None, :, None]
        if training:
            count = x.shape[0] * x.shape[2]
            if count < 2:
                raise ValueError("batchnorm needs at least 2 (batch, time) positions in training mode")
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(DTYPE)
            unbiased = var * (count / (count - 1))
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(DTYPE)
        else:
            mean, var = self.running_mean, self.running_var
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean[None, :, None]) * inv[None, :, None]
        return (g * xhat + b).astype(x.dtype), (xhat, inv, training)

    def backward(self, cache, dy):
        xhat, inv, training = cache
        if dy.shape != xhat.shape:
            raise ValueError(f"batchnorm: gradient shape {dy.shape} != {xhat.shape}")
        dbeta = dy.sum(axis=(0, 2))
        dgamma = (dy * xhat).sum(axis=(0, 2))
        self.beta.grad += dbeta
        self.gamma.grad += dgamma
        scale = (self.gamma.value * inv)[None, :, None]
        if not training:
            return scale * dy
        n = xhat.shape[0] * xhat.shape[2]
        return scale / n * (n * dy - dbeta[None, :, None] - xhat * dgamma[None, :, None])


class FloatPointwise:
    """Trainable float 1x1 convolution (``c_out x c_in`` matrix)."""

    frozen = False

    def __init__(self, c_in: int, c_out: int, rng=None, name="pw", weights=None):
        if weights is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weights = _uniform(rng, np.sqrt(3.0 / c_in), (c_out, c_in))
        weights = np.array(weights, dtype=DTYPE)
        if weights.shape != (c_out, c_in):
            raise ValueError(f"weights must have shape {(c_out, c_in)}")
        self.c_in, self.c_out = c_in, c_out
        self.weight = Param(f"{name}.weight", weights)

    def params(self):
        return [self.weight]

    def forward(self, x):
        _check_channels(x, self.c_in, "pointwise")
        return np.matmul(self.weight.value, x), x

    def backward(self, x, dy):
        self.weight.grad += np.tensordot(dy, x, axes=([0, 2], [0, 2]))
        return np.matmul(self.weight.value.T, dy)


class TernaryPointwise:
    """Frozen ternary 1x1 convolution evaluated with add/subtract only.

    The matrix is regenerated from its :class:`WeightSpec`; ``kernel`` picks
    the representation used at run time ('dense', 'index', 'bitplane', or
    'onthefly' to regenerate blocks during every call).
    """

    frozen = True

    def __init__(self, spec: WeightSpec | None = None, matrix=None, kernel: str = "dense", name="pw"):
        if spec is None and matrix is None:
            raise ValueError("need a WeightSpec or an explicit matrix")
        self.spec = spec
        self.name = name
        self.counter = OpCounter()
        self._op = linalg.to_dense(spec if matrix is None else matrix)
        self.c_out, self.c_in = self._op.rows, self._op.cols
        self.set_kernel(kernel)

    def set_kernel(self, kernel: str) -> None:
        """Switch the run-time representation; results are bit-identical across kernels."""
        if kernel == "onthefly":
            if self.spec is None:
                raise ValueError("on-the-fly evaluation needs a WeightSpec")
            op = self.spec
        else:
            op = linalg.convert(self.matrix, kernel)
        self._op, self.kernel = op, kernel

    @property
    def matrix(self) -> DenseTernary:
        return linalg.to_dense(self._op)

    def params(self):
        return []

    def forward(self, x):
        _check_channels(x, self.c_in, "ternary pointwise")
        return linalg.pointwise_apply(self._op, x, self.counter), None

    def backward(self, cache, dy):
        return linalg.pointwise_apply_transpose(self._op, dy, self.counter)


class SkipLink:
    """Residual branch: trained float matrix, ternary matrix + BN, identity, or none."""

    def __init__(self, mode: str, c_in: int, c_out: int, *, rng=None, spec=None, matrix=None, name="skip"):
        if mode not in SKIP_MODES:
            raise ValueError(f"unknown skip mode {mode!r}")
        if mode == "identity" and c_in != c_out:
            raise ValueError(f"identity skip needs c_in == c_out, got {c_in} -> {c_out}")
        self.mode = mode
        self.proj = None
        self.bn = None
        if mode == "trained":
            self.proj = FloatPointwise(c_in, c_out, rng, name=f"{name}.proj")
        elif mode == "ternary":
            self.proj = TernaryPointwise(spec, matrix, name=f"{name}.proj")
            # a constant ternary matrix has no scale of its own
            self.bn = BatchNorm(c_out, name=f"{name}.bn")

    def params(self):
        out = []
        for layer in (self.proj, self.bn):
            if layer is not None:
                out += layer.params()
        return out

    def forward(self, x, training=True):
        if self.mode == "none":
            return None, None
        if self.mode == "identity":
            return x, None
        s, pc = self.proj.forward(x)
        bc = None
        if self.bn is not None:
            s, bc = self.bn.forward(s, training)
        return s, (pc, bc)

    def backward(self, cache, ds):
        if self.mode == "none":
            return None
        if self.mode == "identity":
            return ds
        pc, bc = cache
        if self.bn is not None:
            ds = self.bn.backward(bc, ds)
        return self.proj.backward(pc, ds)


class Unit:
    """One separable repetition: depthwise -> pointwise -> batch norm."""

    def __init__(self, depthwise: Depthwise, pointwise, bn: BatchNorm):
        if pointwise.c_in != depthwise.channels or bn.channels != pointwise.c_out:
            raise ValueError("unit layers disagree on channel counts")
        self.depthwise, self.pointwise, self.bn = depthwise, pointwise, bn

    def params(self):
        return self.depthwise.params() + self.pointwise.params() + self.bn.params()

    def forward(self, x, training=True):
        h, dc = self.depthwise.forward(x)
        h, pc = self.pointwise.forward(h)
        h, bc = self.bn.forward(h, training)
        return h, (dc, pc, bc)

    def backward(self, cache, dy):
        dc, pc, bc = cache
        d = self.bn.backward(bc, dy)
        d = self.pointwise.backward(pc, d)
        return self.depthwise.backward(dc, d)


@dataclass
class BlockCache:
    version: int
    x: np.ndarray
    units: list
    pre: list
    skip: object


class Block:
    """M separable units with ReLU in between; skip joins before the last ReLU."""

    def __init__(self, units: list[Unit], skip: SkipLink):
        if not units:
            raise ValueError("a block needs at least one unit")
        self.units = units
        self.skip = skip
        self.version = 0

    @property
    def c_in(self) -> int:
        return self.units[0].depthwise.channels

    @property
    def c_out(self) -> int:
        return self.units[-1].bn.channels

    def params(self):
        out = []
        for u in self.units:
            out += u.params()
        return out + self.skip.params()

    def ternary_layers(self):
        layers = [u.pointwise for u in self.units if u.pointwise.frozen]
        if self.skip.mode == "ternary":
            layers.append(self.skip.proj)
        return layers

    def invalidate(self) -> None:
        """Mark cached activations stale (call after parameters change)."""
        self.version += 1

    def forward(self, x, training=True):
        _check_channels(x, self.c_in, "block")
        h = x
        ucaches, pre = [], []
        for i, u in enumerate(self.units):
            z, uc = u.forward(h, training)
            ucaches.append(uc)
            if i == len(self.units) - 1:
                s, sc = self.skip.forward(x, training)
                if s is not None:
                    z = z + s
            pre.append(z)
            h = relu(z)
        return h, BlockCache(self.version, x, ucaches, pre, sc)

    def backward(self, cache: BlockCache, dy):
        if cache.version != self.version:
            raise StaleCacheError("block parameters changed since this cache was produced")
        d = dy
        dskip = None
        for i in reversed(range(len(self.units))):
            d = relu_backward(cache.pre[i], d)
            if i == len(self.units) - 1:
                dskip = self.skip.backward(cache.skip, d)
            d = self.units[i].backward(cache.units[i], d)
        if dskip is not None:
            d = d + dskip
        return d


def cast_params(layer, dtype) -> None:
    """Recast every trainable tensor of ``layer`` (used for float64 gradient checks)."""
    for p in layer.params():
        p.value = p.value.astype(dtype)
        p.grad = np.zeros_like(p.value)


def make_block(c_in: int, c_out: int, repeats: int, kernel: int, pointwise: str, skip: str, *,
               rng: np.random.Generator, spec_for=None, name="block") -> Block:
    """Build a block.

    ``spec_for(rows, cols, slot)`` hands out WeightSpecs for ternary layers;
    ``slot`` is j for the j-th pointwise layer and ``repeats`` for the skip.
    """
    if pointwise not in POINTWISE_MODES:
        raise ValueError(f"unknown pointwise mode {pointwise!r}")
    if skip not in SKIP_MODES:
        raise ValueError(f"unknown skip mode {skip!r}")
    if (pointwise == "ternary" or skip == "ternary") and spec_for is None:
        raise ValueError("ternary layers need a spec factory")
    units = []
    ch = c_in
    for j in range(repeats):
        dw = Depthwise(ch, kernel, rng, name=f"{name}.{j}.dw")
        if pointwise == "ternary":
            pw = TernaryPointwise(spec_for(c_out, ch, j), name=f"{name}.{j}.pw")
        else:
            pw = FloatPointwise(ch, c_out, rng, name=f"{name}.{j}.pw")
        units.append(Unit(dw, pw, BatchNorm(c_out, name=f"{name}.{j}.bn")))
        ch = c_out
    spec = spec_for(c_out, c_in, repeats) if skip == "ternary" else None
    link = SkipLink(skip, c_in, c_out, rng=rng, spec=spec, name=f"{name}.skip")
    return Block(units, link)
