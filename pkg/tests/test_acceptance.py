"""Acceptance criteria, each at its stated tolerance and time budget.

Every test records one "criterion N: PASS|FAIL" line; the lines are printed
as they happen (visible with ``-s``) and repeated in the terminal summary.
"""
import hashlib
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

import helpers
from helpers import PARITY_MODEL, PARITY_TRAIN, block_gradcheck, trained
from sparsetern import bench, linalg, model, tcsconv
from sparsetern.linalg import OpCounter
from sparsetern.model import ModelConfig, TrainConfig
from sparsetern.weightgen import Generator, WeightSpec, generate

pytestmark = pytest.mark.slow


def check(number: int, ok: bool, detail: str, elapsed: float, budget: float):
    within = elapsed < budget
    verdict = "PASS" if ok and within else "FAIL"
    line = f"criterion {number}: {verdict}  {detail}  [{elapsed:.2f}s of {budget:g}s]"
    helpers.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert within, line


def test_criterion_1_sparsity_law():
    start = time.perf_counter()
    worst = 0.0
    for gen in (Generator.STREAM, Generator.HASH):
        for t in (0.1, 0.3, 0.5, 0.7, 0.9):
            e = generate(WeightSpec(2024, 1, 512, 512, t, gen)).entries
            sigma = math.sqrt(t * (1 - t) / e.size)
            worst = max(worst, abs((e == 0).mean() - t) / sigma)
    elapsed = time.perf_counter() - start
    check(1, worst <= 3.0, f"max |zero fraction - t| = {worst:.2f} sigma (limit 3)", elapsed, 1.0)


def test_criterion_2_endpoints():
    start = time.perf_counter()
    zeros_at_one = dense_zeros = 0
    total = 0
    for gen in (Generator.STREAM, Generator.HASH):
        zeros_at_one += int(generate(WeightSpec(7, 2, 1024, 1024, 1.0, gen)).entries.any())
        e = generate(WeightSpec(7, 2, 1024, 1024, 0.0, gen)).entries
        dense_zeros += int((e == 0).sum())
        total += e.size
    elapsed = time.perf_counter() - start
    rate = dense_zeros / total * 1e6
    check(2, zeros_at_one == 0 and rate <= 1.0,
          f"t=1 nonzero matrices: {zeros_at_one}; t=0 zeros per 1e6: {rate:.2f} (limit 1)", elapsed, 1.0)


def test_criterion_3_kernel_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    cases = mismatches = mults = 0
    shapes = [(512, 512), (1, 1), (1, 512), (512, 1)]
    while cases < 1000:
        if cases < len(shapes):
            rows, cols = shapes[cases]
        else:
            rows, cols = (int(v) for v in rng.integers(1, 513 if cases % 10 == 0 else 97, size=2))
        t = float(rng.choice([0.0, 1.0])) if cases % 50 == 7 else float(rng.uniform())
        spec = WeightSpec(int(rng.integers(2 ** 63)), cases, rows, cols, t, Generator(cases % 2))
        x = rng.standard_normal(cols).astype(np.float32)
        dense = linalg.to_dense(spec)
        want = linalg.reference_float_matvec(dense, x).tobytes()
        for m in (dense, linalg.to_index_pairs(dense), linalg.to_bitplanes(dense), spec):
            c = OpCounter()
            mismatches += linalg.matvec(m, x, c).tobytes() != want
            mults += c.multiplications
        cases += 1
    elapsed = time.perf_counter() - start
    check(3, mismatches == 0 and mults == 0,
          f"{cases} cases x 4 kernels: {mismatches} mismatches, {mults} multiplications", elapsed, 30.0)


def test_criterion_4_adjoint():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(500):
        m = generate(WeightSpec(int(rng.integers(2 ** 63)), i, 256, 256, float(rng.uniform()), Generator(i % 2)))
        x, g = rng.standard_normal((2, 256)).astype(np.float32)
        lhs = float(np.dot(linalg.matvec(m, x).astype(np.float64), g))
        rhs = float(np.dot(x.astype(np.float64), linalg.matvec_transpose(m, g)))
        worst = max(worst, abs(lhs - rhs) / (abs(lhs) + 1e-12))
    elapsed = time.perf_counter() - start
    check(4, worst < 1e-4, f"max relative adjoint gap {worst:.2e} (limit 1e-4)", elapsed, 5.0)


def test_criterion_5_gradients():
    start = time.perf_counter()
    worst, where = 0.0, ""
    for pointwise in tcsconv.POINTWISE_MODES:
        for skip in tcsconv.SKIP_MODES:
            def spec_for(rows, cols, slot):
                return WeightSpec(55, 10 + slot, rows, cols, 0.5)
            block = tcsconv.make_block(8, 8, 2, 3, pointwise, skip, rng=np.random.default_rng(5),
                                       spec_for=spec_for)
            rng = np.random.default_rng(6)
            errors = block_gradcheck(block, rng.standard_normal((2, 8, 16)), rng.standard_normal((2, 8, 16)))
            name, err = max(errors.items(), key=lambda kv: kv[1])
            if err >= worst:
                worst, where = err, f"{pointwise}/{skip}:{name}"
    elapsed = time.perf_counter() - start
    check(5, worst < 1e-3, f"8 block variants, worst relative error {worst:.2e} at {where} (limit 1e-3)",
          elapsed, 120.0)


def test_criterion_6_frozen_invariance():
    start = time.perf_counter()
    cfg = PARITY_MODEL.replace(pointwise_mode="ternary", skip_mode="ternary")
    tc = TrainConfig.from_dict({**PARITY_TRAIN.to_dict(), "epochs": 5})
    net = model.build(cfg)

    def digests():
        return [hashlib.sha256(layer.matrix.entries.tobytes()).hexdigest() for layer in net.ternary_layers()]

    before = digests()
    model.train(net, model.make_synthetic(tc, cfg.in_channels), tc)
    after = digests()
    regenerated = [hashlib.sha256(generate(layer.spec).entries.tobytes()).hexdigest()
                   for layer in net.ternary_layers()]
    elapsed = time.perf_counter() - start
    check(6, before == after == regenerated,
          f"{len(before)} ternary matrices, SHA-256 unchanged after 5 epochs", elapsed, 120.0)


PARITY_RUNS = [("float", 0.5), ("ternary", 0.0), ("ternary", 0.5), ("ternary", 0.9), ("ternary", 1.0)]


def test_criterion_7_training_parity():
    start = time.perf_counter()
    acc = {run: trained(*run) for run in PARITY_RUNS}
    elapsed = time.perf_counter() - start
    val = {run: model.final_accuracy(h) for run, h in acc.items()}
    fp_train = model.final_accuracy(acc[("float", 0.5)], "train")
    gap_sparse = abs(val[("ternary", 0.9)] - val[("ternary", 0.0)])
    gap_fp = abs(val[("ternary", 0.5)] - val[("float", 0.5)])
    ok = gap_sparse <= 0.05 and gap_fp <= 0.05 and fp_train >= 0.90
    check(7, ok,
          f"val RT0.9={val[('ternary', 0.9)]:.4f} RT0.0={val[('ternary', 0.0)]:.4f} "
          f"RT0.5={val[('ternary', 0.5)]:.4f} FP={val[('float', 0.5)]:.4f}; FP train={fp_train:.4f}",
          elapsed, 15 * 60.0)


def test_criterion_8_collapse():
    start = time.perf_counter()
    history = trained("ternary", 1.0)
    elapsed = time.perf_counter() - start
    val = model.final_accuracy(history)
    limit = 2 / PARITY_TRAIN.num_classes
    check(8, val <= limit, f"t=1.0 skip=none val accuracy {val:.4f} (limit {limit:.3f})", elapsed, 15 * 60.0)


def _walk_trainable(net):
    found = []
    for stage in net.stages:
        for unit in stage.units:
            found += [unit.depthwise.weight, unit.bn.gamma, unit.bn.beta]
            if isinstance(unit.pointwise, tcsconv.FloatPointwise):
                found.append(unit.pointwise.weight)
        if isinstance(stage.skip.proj, tcsconv.FloatPointwise):
            found.append(stage.skip.proj.weight)
        if stage.skip.bn is not None:
            found += [stage.skip.bn.gamma, stage.skip.bn.beta]
    return found + [net.head.weight, net.head.bias]


def test_criterion_9_compression_arithmetic():
    start = time.perf_counter()
    base = ModelConfig(N=4, M=2, W=16, skip_mode="trained")
    problems = []

    def trainable(cfg):
        net = model.build(cfg)
        count = model.count_params(net).trainable_float_count
        enumerated = sum(p.size for p in _walk_trainable(net))
        if count != enumerated:
            problems.append(f"count {count} != enumeration {enumerated}")
        return count

    ref = trainable(base)
    for b in range(base.N):
        pw = ["float"] * base.N
        pw[b] = "ternary"
        if ref - trainable(base.replace(pointwise_mode=pw)) != base.M * base.W ** 2:
            problems.append(f"block {b} ternary delta")
        sk = ["trained"] * base.N
        sk[b] = "identity"
        if ref - trainable(base.replace(skip_mode=sk)) != base.W ** 2:
            problems.append(f"block {b} identity delta")

    big = ModelConfig(N=8, M=2, W=128, K=9)
    dominated = bench.model_cost(model.build(big), (1, big.in_channels, 16)).pointwise_dominates
    full = trainable(big)
    half = trainable(big.replace(pointwise_mode=["float"] * 4 + ["ternary"] * 4))
    reduction = 1 - half / full
    elapsed = time.perf_counter() - start
    ok = not problems and dominated and reduction >= 0.40
    check(9, ok, f"deltas exact ({len(problems)} problems); last-half ternary cuts {reduction:.1%} "
                 f"of {full} trainable floats (limit 40%)", elapsed, 1.0)


def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "sparsetern", *args], capture_output=True)
    return proc.returncode, proc.stdout


def test_criterion_10_determinism(tmp_path):
    start = time.perf_counter()
    cfg = tmp_path / "model.json"
    cfg.write_text(json.dumps(PARITY_MODEL.replace(pointwise_mode="ternary").to_dict()))
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        codes, stdout = [], []
        for args in (["gen", "--seed", "11", "--rows", "256", "--cols", "256", "--t", "0.7", "--out", str(d / "m.tern1")],
                     ["count", "--config", str(cfg), "--out", str(d / "count.json")],
                     ["train", "--config", str(cfg), "--metrics-out", str(d / "metrics.csv")]):
            code, out = _cli(*args)
            codes.append(code)
            stdout.append(out.replace(str(d).encode(), b"<dir>"))
        files = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
        outputs.append((codes, stdout, files))
    elapsed = time.perf_counter() - start
    (codes_a, out_a, files_a), (codes_b, out_b, files_b) = outputs
    ok = codes_a == codes_b == [0, 0, 0] and files_a == files_b and out_a == out_b and len(files_a) == 3
    check(10, ok, f"gen/count/train twice: exit codes {codes_a} {codes_b}, "
                  f"{len(files_a)} files byte-identical={files_a == files_b}", elapsed, 20 * 60.0)
