"""N x M x W separable residual networks, parameter accounting and training.

A network is prologue -> N residual blocks -> epilogue -> average pool over
time -> linear classifier.  Block pointwise layers (and optionally skip
links) can be frozen random ternary matrices; everything else is trained
with SGD + momentum on cross-entropy.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .tcsconv import (DTYPE, POINTWISE_MODES, SKIP_MODES, Block, Param, TernaryPointwise,
                      make_block)
from .weightgen import Generator, WeightSpec, mix64, stream_words, words_to_uniform

log = logging.getLogger(__name__)

TEMPLATE_LEN = 9
SPEC_BYTES = 16  # seed + layer_tag: enough to regenerate a frozen matrix


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _from_mapping(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class ModelConfig:
    N: int = 3
    M: int = 1
    W: int = 32
    in_channels: int = 16
    num_classes: int = 8
    K0: int = 11
    K: int = 9
    Ke: int = 5
    pointwise_mode: list = "float"
    skip_mode: list = "identity"
    t: float = 0.5
    seed: int = 0
    generator: str = "stream"
    generator_n: int = 2
    generator_m: int = 4

    def __post_init__(self):
        for name in ("N", "M", "W", "in_channels", "num_classes", "K0", "K", "Ke"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("K0", "K", "Ke"):
            if getattr(self, name) % 2 == 0:
                raise ConfigError(f"{name} must be odd")
        self.pointwise_mode = self._per_block("pointwise_mode", POINTWISE_MODES)
        self.skip_mode = self._per_block("skip_mode", SKIP_MODES)
        if not isinstance(self.t, (int, float)) or not 0.0 <= self.t <= 1.0:
            raise ConfigError(f"t must lie in [0, 1], got {self.t!r}")
        self.t = float(self.t)
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        try:
            self.generator = Generator.parse(self.generator).label
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.generator == "structured":
            if not 1 <= self.generator_n <= self.generator_m:
                raise ConfigError("structured generator needs 1 <= generator_n <= generator_m")
            if self.W % self.generator_m:
                raise ConfigError(f"W={self.W} must be divisible by generator_m={self.generator_m}")

    def _per_block(self, name, allowed):
        v = getattr(self, name)
        modes = [v] * self.N if isinstance(v, str) else list(v)
        if len(modes) != self.N:
            raise ConfigError(f"{name} lists {len(modes)} modes for N={self.N} blocks")
        for mode in modes:
            if mode not in allowed:
                raise ConfigError(f"{name}: unknown mode {mode!r} (allowed: {', '.join(allowed)})")
        return modes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return _from_mapping(cls, data)

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        if changes.get("N", self.N) != self.N:
            # uniform per-block modes follow a change of depth
            for name in ("pointwise_mode", "skip_mode"):
                if name not in changes and len(set(d[name])) == 1:
                    d[name] = d[name][0]
        d.update(changes)
        return ModelConfig.from_dict(d)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    data_seed: int = 0
    dataset_size: int = 2048
    T: int = 64
    num_classes: int = 8
    amplitude: float = 2.0
    val_fraction: float = 0.2

    def __post_init__(self):
        for name in ("epochs", "batch_size", "dataset_size", "T", "num_classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need learning_rate >= 0 and 0 <= momentum < 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.amplitude < 0:
            raise ConfigError("amplitude must be non-negative")
        if not isinstance(self.data_seed, int) or self.data_seed < 0:
            raise ConfigError("data_seed must be a non-negative integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _from_mapping(cls, data)


# --- network -----------------------------------------------------------------------

class Linear:
    def __init__(self, c_in, c_out, rng):
        bound = 1.0 / math.sqrt(c_in)
        self.weight = Param("head.weight", rng.uniform(-bound, bound, (c_out, c_in)).astype(DTYPE))
        self.bias = Param("head.bias", np.zeros(c_out, dtype=DTYPE))

    def params(self):
        return [self.weight, self.bias]


class Network:
    def __init__(self, config: ModelConfig, prologue: Block, blocks: list[Block], epilogue: Block, head: Linear):
        self.config = config
        self.prologue, self.blocks, self.epilogue, self.head = prologue, blocks, epilogue, head

    @property
    def stages(self) -> list[Block]:
        return [self.prologue, *self.blocks, self.epilogue]

    def params(self) -> list[Param]:
        out = []
        for b in self.stages:
            out += b.params()
        return out + self.head.params()

    def ternary_layers(self) -> list[TernaryPointwise]:
        out = []
        for b in self.stages:
            out += b.ternary_layers()
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def invalidate(self) -> None:
        for b in self.stages:
            b.invalidate()

    def forward(self, x, training=True):
        h = np.asarray(x, dtype=DTYPE) if np.asarray(x).dtype != np.float64 else x
        caches = []
        for b in self.stages:
            h, c = b.forward(h, training)
            caches.append(c)
        pooled = h.mean(axis=2)
        logits = pooled @ self.head.weight.value.T + self.head.bias.value
        return logits, (caches, pooled, h.shape[2])

    def backward(self, cache, dlogits):
        caches, pooled, t = cache
        self.head.weight.grad += dlogits.T @ pooled
        self.head.bias.grad += dlogits.sum(axis=0)
        dpooled = dlogits @ self.head.weight.value
        d = np.repeat(dpooled[:, :, None] / t, t, axis=2).astype(dpooled.dtype)
        for b, c in zip(reversed(self.stages), reversed(caches)):
            d = b.backward(c, d)
        return d

    def predict(self, x, chunk=256):
        return np.concatenate([self.forward(x[i:i + chunk], training=False)[0]
                               for i in range(0, len(x), chunk)])


def _layer_tags(config: ModelConfig):
    """Topological index of every 1x1 slot: prologue 0, then M pointwise + 1 skip per block."""
    per_block = config.M + 1
    return lambda block, slot: 1 + block * per_block + slot


def build(config: ModelConfig) -> Network:
    rng = np.random.default_rng(config.seed)
    gen = Generator.parse(config.generator)
    tag_of = _layer_tags(config)

    def spec_factory(block):
        def spec_for(rows, cols, slot):
            return WeightSpec(config.seed, tag_of(block, slot), rows, cols, config.t, gen,
                              config.generator_n if gen is Generator.STRUCTURED else 0,
                              config.generator_m if gen is Generator.STRUCTURED else 0)
        return spec_for

    W = config.W
    prologue = make_block(config.in_channels, W, 1, config.K0, "float", "none", rng=rng, name="prologue")
    blocks = [make_block(W, W, config.M, config.K, config.pointwise_mode[i], config.skip_mode[i],
                         rng=rng, spec_for=spec_factory(i), name=f"block{i}")
              for i in range(config.N)]
    epilogue = make_block(W, W, 1, config.Ke, "float", "none", rng=rng, name="epilogue")
    head = Linear(W, config.num_classes, rng)
    return Network(config, prologue, blocks, epilogue, head)


# --- parameter accounting ------------------------------------------------------------

@dataclass
class LayerCount:
    name: str
    kind: str  # "float" or "ternary"
    trainable: int = 0
    frozen_entries: int = 0
    bytes_on_the_fly: int = 0
    bytes_materialized: int = 0


@dataclass
class ParamReport:
    trainable_float_count: int
    frozen_implicit_count: int
    stored_bytes_on_the_fly: int
    stored_bytes_materialized: int
    layers: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def count_params(network: Network) -> ParamReport:
    """Trainable floats, implicit ternary entries and bytes under both storage policies.

    Floats cost 4 bytes.  A frozen ternary matrix costs one WeightSpec when
    regenerated on the fly, or 2 bits per entry when materialized.
    """
    layers = []
    for p in network.params():
        layers.append(LayerCount(p.name, "float", p.size, 0, 4 * p.size, 4 * p.size))
    for t in network.ternary_layers():
        entries = t.c_out * t.c_in
        layers.append(LayerCount(t.name, "ternary", 0, entries, SPEC_BYTES, -(-2 * entries // 8)))
    return ParamReport(
        trainable_float_count=sum(l.trainable for l in layers),
        frozen_implicit_count=sum(l.frozen_entries for l in layers),
        stored_bytes_on_the_fly=sum(l.bytes_on_the_fly for l in layers),
        stored_bytes_materialized=sum(l.bytes_materialized for l in layers),
        layers=layers,
    )


def deepest_within_budget(template: ModelConfig, pointwise: str, skip: str, budget: int, max_blocks=256):
    """Largest N whose all-``pointwise``/``skip`` network has at most ``budget`` trainable floats."""
    best = 0
    for n in range(1, max_blocks + 1):
        cfg = template.replace(N=n, pointwise_mode=pointwise, skip_mode=skip)
        if count_params(build(cfg)).trainable_float_count > budget:
            break
        best = n
    return best


# --- synthetic data -------------------------------------------------------------------

@dataclass
class SyntheticDataset:
    x: np.ndarray  # [n, channels, T] float32
    y: np.ndarray  # [n] int64
    seed: int

    def __len__(self):
        return len(self.y)


def class_template(label: int, channels: int) -> np.ndarray:
    """Fixed [channels, 9] pattern in [-1, 1) derived from the class index alone."""
    words = stream_words(mix64(label + 1), np.arange(channels * TEMPLATE_LEN))
    return words_to_uniform(words).reshape(channels, TEMPLATE_LEN)


def make_synthetic(tc: TrainConfig, in_channels: int, T: int | None = None) -> SyntheticDataset:
    """Unit-variance noise with a class template pasted at a random time offset."""
    T = tc.T if T is None else T
    if T < TEMPLATE_LEN:
        raise ConfigError(f"sequence length {T} is shorter than the template length {TEMPLATE_LEN}")
    rng = np.random.default_rng(tc.data_seed)
    n, k = tc.dataset_size, tc.num_classes
    labels = rng.permutation(np.arange(n) % k)
    x = rng.standard_normal((n, in_channels, T))
    offsets = rng.integers(0, T - TEMPLATE_LEN + 1, size=n)
    templates = np.stack([class_template(c, in_channels) for c in range(k)])
    for i in range(n):
        o = offsets[i]
        x[i, :, o:o + TEMPLATE_LEN] += tc.amplitude * templates[labels[i]]
    return SyntheticDataset(x.astype(DTYPE), labels.astype(np.int64), tc.data_seed)


def split(ds: SyntheticDataset, val_fraction: float):
    n_val = max(1, int(round(len(ds) * val_fraction)))
    n_train = len(ds) - n_val
    return (ds.x[:n_train], ds.y[:n_train]), (ds.x[n_train:], ds.y[n_train:])


# --- training -------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(logits.dtype)


def evaluate(net: Network, x, y):
    logits = net.predict(x)
    loss, _ = cross_entropy(logits, y)
    return loss, float((logits.argmax(axis=1) == y).mean())


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float


def train(net: Network, ds: SyntheticDataset, tc: TrainConfig) -> list[MetricsRow]:
    """SGD + momentum; train/validation loss and accuracy recorded after each epoch."""
    (xt, yt), (xv, yv) = split(ds, tc.val_fraction)
    params = net.params()
    velocity = [np.zeros_like(p.value) for p in params]
    lr, mom = np.float32(tc.learning_rate), np.float32(tc.momentum)
    history = []
    for epoch in range(1, tc.epochs + 1):
        order = np.random.default_rng([tc.data_seed, epoch]).permutation(len(yt))
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            net.zero_grad()
            # divergence is detected from the loss, not from float warnings
            with np.errstate(over="ignore", invalid="ignore"):
                logits, cache = net.forward(xt[idx], training=True)
                loss, dlogits = cross_entropy(logits, yt[idx])
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch offset {start}; "
                                           f"check the inputs or lower the learning rate ({tc.learning_rate})")
                net.backward(cache, dlogits)
                for p, v in zip(params, velocity):
                    v *= mom
                    v += p.grad
                    p.value -= lr * v
            net.invalidate()
        for name, (x, y) in (("train", (xt, yt)), ("val", (xv, yv))):
            with np.errstate(over="ignore", invalid="ignore"):
                loss, acc = evaluate(net, x, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite {name} loss after epoch {epoch}")
            history.append(MetricsRow(epoch, name, loss, acc))
        log.info("epoch %d: train acc %.4f, val acc %.4f", epoch, history[-2].accuracy, history[-1].accuracy)
    return history


def final_accuracy(history: list[MetricsRow], which="val") -> float:
    return [r for r in history if r.split == which][-1].accuracy


def metrics_csv(history: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "loss", "accuracy"])
    for r in history:
        w.writerow([r.epoch, r.split, repr(r.loss), repr(r.accuracy)])
    return buf.getvalue()


def run(config: ModelConfig, tc: TrainConfig):
    """Build, synthesize data and train; returns (network, history)."""
    if config.num_classes != tc.num_classes:
        raise ConfigError(f"model has {config.num_classes} classes but the task has {tc.num_classes}")
    net = build(config)
    ds = make_synthetic(tc, config.in_channels)
    return net, train(net, ds, tc)


# --- sweeps and Pareto fronts -----------------------------------------------------------

@dataclass
class SweepRow:
    t: float
    params_trainable: int
    accuracy: float


def _sweep_one(args):
    config, tc = args
    net, history = run(config, tc)
    return SweepRow(config.t, count_params(net).trainable_float_count, final_accuracy(history))


def sparsity_sweep(config: ModelConfig, t_list, tc: TrainConfig, jobs: int = 1) -> list[SweepRow]:
    """One training run per threshold, everything else held fixed; sorted by t."""
    ts = sorted(float(t) for t in t_list)
    if any(not 0.0 <= t <= 1.0 for t in ts):
        raise ConfigError("thresholds must lie in [0, 1]")
    tasks = [(config.replace(t=t), tc) for t in ts]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(min(jobs, len(tasks))) as pool:
            return list(pool.map(_sweep_one, tasks))
    return [_sweep_one(task) for task in tasks]


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "params_trainable", "accuracy"])
    for r in rows:
        w.writerow([repr(r.t), r.params_trainable, repr(r.accuracy)])
    return buf.getvalue()


def pareto_flags(points) -> list[bool]:
    """Non-dominated flags for (params, accuracy) points: fewer params and higher accuracy win.

    Sweeps groups of equal parameter count in ascending order; a point survives
    when it is the best of its group and beats every smaller network.
    """
    pts = [(int(p), float(a)) for p, a in points]
    flags = [False] * len(pts)
    order = sorted(range(len(pts)), key=lambda i: pts[i][0])
    best_smaller = -math.inf
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and pts[order[j]][0] == pts[order[i]][0]:
            j += 1
        group = order[i:j]
        top = max(pts[g][1] for g in group)
        for g in group:
            flags[g] = pts[g][1] == top and top > best_smaller
        best_smaller = max(best_smaller, top)
        i = j
    return flags


def pareto_report(configs: list[ModelConfig], accuracies: list[float]):
    if len(configs) != len(accuracies):
        raise ValueError("need one accuracy per config")
    params = [count_params(build(c)).trainable_float_count for c in configs]
    flags = pareto_flags(zip(params, accuracies))
    return [(p, a, f) for p, a, f in zip(params, accuracies, flags)]


def load_json(path, cls):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return cls.from_dict(data)
