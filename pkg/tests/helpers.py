"""Shared oracles for the test-suite: finite differences and cached training runs."""
from __future__ import annotations

import functools

import numpy as np

from sparsetern import model
from sparsetern.tcsconv import cast_params

FD_STEP = 1e-3
FD_RTOL = 1e-3

# one "criterion N: PASS|FAIL ..." line per acceptance check, shown in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def block_gradcheck(block, x, weights, h=FD_STEP, training=True):
    """Central-difference check of every trainable tensor and the input of ``block``.

    Runs in float64 on loss = sum(Y * weights).  Perturbations that flip any
    ReLU mask inside the block straddle a kink and are left out.
    Returns {tensor name: relative error}.
    """
    cast_params(block, np.float64)
    x = np.array(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)

    def evaluate(inp):
        y, cache = block.forward(inp, training)
        return float((y * weights).sum()), [p > 0 for p in cache.pre]

    _, cache = block.forward(x, training)
    for p in block.params():
        p.zero_grad()
    dx = block.backward(cache, weights)
    _, masks0 = evaluate(x)

    targets = [(p.name, p.value, p.grad.copy()) for p in block.params()] + [("input", x, dx)]
    errors = {}
    for name, arr, analytic in targets:
        fd = np.zeros_like(arr)
        keep = np.ones(arr.shape, dtype=bool)
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + h
            lp, mp = evaluate(x)
            arr[i] = orig - h
            lm, mm = evaluate(x)
            arr[i] = orig
            if any((a != b).any() for a, b in zip(mp + mm, masks0 + masks0)):
                keep[i] = False
                continue
            fd[i] = (lp - lm) / (2 * h)
        errors[name] = relative_error(fd[keep], analytic[keep]) if keep.any() else 0.0
    return errors


# default synthetic task used by the parity / collapse checks
PARITY_MODEL = model.ModelConfig(N=3, M=1, W=32, in_channels=16, num_classes=8, skip_mode="none")
PARITY_TRAIN = model.TrainConfig(epochs=30, dataset_size=2048, T=64, num_classes=8)


@functools.lru_cache(maxsize=None)
def trained(pointwise: str, t: float, skip: str = "none"):
    """Train (once per session) a parity-task model; returns the metrics history."""
    cfg = PARITY_MODEL.replace(pointwise_mode=pointwise, t=t, skip_mode=skip)
    _, history = model.run(cfg, PARITY_TRAIN)
    return history
