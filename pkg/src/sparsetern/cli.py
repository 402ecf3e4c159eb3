"""Command-line entry point: ``sparsetern {gen,inspect,count,train,sweep,bench}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Every subcommand first prints its fully resolved configuration as JSON.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, model, tern1
from .weightgen import Generator, WeightSpec, generate

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _write(path: str, text: str | bytes) -> None:
    p = Path(path)
    if isinstance(text, bytes):
        p.write_bytes(text)
    else:
        p.write_text(text)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _shape_list(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        try:
            r, c = item.lower().split("x")
            out.append((int(r), int(c)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected shapes like 512x512, got {item!r}") from None
    return out


def _load_section(path, key, cls):
    """Read a config file holding either the bare object or a resolved-run document."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise model.ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(data, dict) and key in data and isinstance(data[key], dict):
        data = data[key]
    return cls.from_dict(data)


def _configs(args):
    cfg = _load_section(args.config, "model", model.ModelConfig) if args.config else model.ModelConfig()
    tc = (_load_section(args.train_config, "train", model.TrainConfig)
          if args.train_config else model.TrainConfig(num_classes=cfg.num_classes))
    return cfg, tc


# --- subcommands ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    try:
        spec = WeightSpec(args.seed, args.layer_tag, args.rows, args.cols, args.t,
                          Generator.parse(args.generator),
                          args.n if args.generator == "structured" else 0,
                          args.m if args.generator == "structured" else 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit({"command": "gen", "seed": spec.seed, "layer_tag": spec.layer_tag, "rows": spec.rows,
           "cols": spec.cols, "t": spec.threshold, "generator": spec.generator.label,
           "n": spec.n, "m": spec.m, "format": args.format, "out": args.out})
    matrix = generate(spec)
    if args.format == "text":
        _write(args.out, tern1.to_text(matrix))
    else:
        _write(args.out, tern1.encode(spec, matrix))
    _emit({"stats": tern1.stats(matrix)})
    return EXIT_OK


def cmd_inspect(args) -> int:
    _emit({"command": "inspect", "in": args.input})
    spec, matrix = tern1.load(args.input)
    _emit({"header": {"seed": spec.seed, "layer_tag": spec.layer_tag, "rows": spec.rows, "cols": spec.cols,
                      "t": spec.threshold, "generator": spec.generator.label, "n": spec.n, "m": spec.m},
           "stats": tern1.stats(matrix)})
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = _load_section(args.config, "model", model.ModelConfig)
    _emit({"command": "count", "model": cfg.to_dict()})
    report = model.count_params(model.build(cfg)).to_dict()
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, tc = _configs(args)
    _emit({"command": "train", "model": cfg.to_dict(), "train": tc.to_dict(), "metrics_out": args.metrics_out})
    _, history = model.run(cfg, tc)
    _write(args.metrics_out, model.metrics_csv(history))
    _emit({"final_train_accuracy": model.final_accuracy(history, "train"),
           "final_val_accuracy": model.final_accuracy(history, "val")})
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, tc = _configs(args)
    if cfg.num_classes != tc.num_classes:
        raise model.ConfigError(f"model has {cfg.num_classes} classes but the task has {tc.num_classes}")
    ts = sorted(args.t_list)
    _emit({"command": "sweep", "model": cfg.to_dict(), "train": tc.to_dict(), "t_list": ts,
           "jobs": args.jobs, "out": args.out})
    rows = model.sparsity_sweep(cfg, ts, tc, jobs=args.jobs)
    _write(args.out, model.sweep_csv(rows))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    if any(not 0 <= t <= 1 for t in args.t_list):
        raise UsageError("thresholds must lie in [0, 1]")
    _emit({"command": "bench", "shapes": [f"{r}x{c}" for r, c in args.shapes], "t_list": args.t_list,
           "reps": args.reps, "seed": args.seed, "threads": args.threads, "out": args.out})
    rows = bench.bench_matvec(args.shapes, args.t_list, reps=args.reps, seed=args.seed)
    _write(args.out, bench.bench_csv(rows))
    if args.threads:
        r, c = args.shapes[0]
        for n, ns in bench.bench_pointwise_threads(r, c, args.t_list[0], 8, 128, args.threads,
                                                    reps=args.reps, seed=args.seed):
            _emit({"pointwise_threads": n, "median_ns": ns})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsetern", description="Constant sparse random ternary 1x1 convolutions.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a ternary matrix file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--layer-tag", type=int, default=0)
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--t", type=float, default=0.5)
    g.add_argument("--generator", choices=["stream", "hash", "structured"], default="stream")
    g.add_argument("--n", type=int, default=2, help="nonzeros per group (structured)")
    g.add_argument("--m", type=int, default=4, help="group width (structured)")
    g.add_argument("--out", required=True)
    g.add_argument("--format", choices=["tern1", "text"], default="tern1")
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("inspect", help="print header and statistics of a TERN1 file")
    i.add_argument("--in", dest="input", required=True)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("count", help="print the parameter report of a model config")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_count)

    t = sub.add_parser("train", help="train on the synthetic task")
    t.add_argument("--config")
    t.add_argument("--train-config")
    t.add_argument("--metrics-out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train once per sparsity threshold")
    s.add_argument("--config")
    s.add_argument("--train-config")
    s.add_argument("--t-list", type=_float_list, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="benchmark the matvec kernels")
    b.add_argument("--shapes", type=_shape_list, default=[(512, 512)])
    b.add_argument("--t-list", type=_float_list, default=[0.0, 0.5, 0.9])
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threads", type=lambda v: [int(x) for x in v.split(",")], default=None,
                   help="also time pointwise_apply with these worker counts, e.g. 1,2,4")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, model.ConfigError) as exc:
        print(f"sparsetern {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, tern1.Tern1Error, model.TrainingDiverged, bench.BenchMismatch, ValueError) as exc:
        print(f"sparsetern {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
