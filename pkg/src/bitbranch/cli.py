"""Command-line surface: quantize, decompose, train, eval, bench, inspect.

Every command validates its flags before touching files, never mutates its
inputs, and writes only to explicit --out paths. All randomness derives
from --seed, so reruns with identical flags produce byte-identical model
files and logs. Exit codes: 0 success, 1 failed check or divergence,
2 file/usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench, datasets, nn, train
from .core import ConfigError, DivergenceError, StageError


def _format_ratio(ratio: float) -> str:
    if abs(ratio - round(ratio)) < 1e-9:
        return f"{int(round(ratio))}x"
    return f"{ratio:.1f}x"


def _parse_arch(arch: str) -> list[int]:
    kind, _, dims = arch.partition(":")
    if kind != "mlp" or not dims:
        raise ConfigError(f"unsupported arch {arch!r} (expected mlp:d0-d1-...-dk)")
    return [int(d) for d in dims.split("-")]


def _load_dataset(args) -> tuple[np.ndarray, np.ndarray]:
    name = args.dataset
    if name.startswith("grid:"):
        images, labels = datasets.load_grid(name[5:])
        return images.reshape(len(images), -1), labels
    if name not in datasets.GENERATORS:
        raise ConfigError(f"unknown dataset {name!r}")
    if name == "blobs":
        return datasets.make_blobs(args.n, seed=args.seed)
    return datasets.GENERATORS[name](args.n, noise=args.noise, seed=args.seed)


def _require_file(path: str) -> None:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")


def _apply_config(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Fill flags from a key=value config file; explicit flags win."""
    if not getattr(args, "config", None):
        return
    _require_file(args.config)
    with open(args.config) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            if not hasattr(args, key):
                raise ConfigError(f"config key {key!r} does not match any flag")
            default = parser_defaults.get(key)
            if getattr(args, key) != default:
                continue  # flag explicitly set on the command line
            if isinstance(default, bool):
                setattr(args, key, value.lower() in ("1", "true", "yes"))
            elif isinstance(default, int):
                setattr(args, key, int(value))
            elif isinstance(default, float):
                setattr(args, key, float(value))
            elif default is None:  # typed flags without a default, e.g. --lr
                try:
                    setattr(args, key, int(value))
                except ValueError:
                    try:
                        setattr(args, key, float(value))
                    except ValueError:
                        setattr(args, key, value)
            else:
                setattr(args, key, value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_quantize(args) -> int:
    _require_file(args.model)
    model = nn.load_model(args.model)
    if model.stage != "float":
        raise StageError(f"quantize expects a float-stage model, got {model.stage}")
    # a trained checkpoint's full-precision layers (e.g. the first dense
    # input) stay full precision; a fully unconfigured float model gets the
    # requested bits everywhere
    configured = any(s.m_bits or s.k_bits for s in model.specs)
    model = nn.with_bits(model, args.M, args.K, keep_full_precision=configured)
    out = nn.quantize_model(model, grid=args.grid)
    nn.save_model(out, args.out)
    print(f"compression ratio: {_format_ratio(32.0 / args.K)}")
    return 0


def cmd_decompose(args) -> int:
    _require_file(args.model)
    model = nn.load_model(args.model)
    out = nn.decompose_model(model)
    nn.save_model(out, args.out)
    print(f"decomposed {sum(1 for s in out.specs if s.kind in ('dense', 'conv2d'))} "
          f"layers; compression ratio: {_format_ratio(nn.compression_ratio(out))}")
    return 0


def cmd_train(args) -> int:
    x, y = _load_dataset(args)
    (xt, yt), (xv, yv) = datasets.split(x, y, args.val_frac, seed=args.seed)
    dims = _parse_arch(args.arch)
    if dims[0] != x.shape[1]:
        raise ConfigError(f"arch input dim {dims[0]} != dataset features {x.shape[1]}")
    cfg = train.TrainConfig(algorithm=args.alg, optimizer=args.optimizer, lr=args.lr,
                            epochs=args.epochs, batch_size=args.batch_size,
                            seed=args.seed, grid=args.grid)
    rng = np.random.Generator(np.random.Philox(args.seed))
    m_bits = args.M if args.M > 0 else None
    k_bits = args.K if args.K > 0 else None
    flavor = "mbbn" if args.alg == "mbbn" else "qnn"
    if flavor == "mbbn" and (m_bits is None or k_bits is None):
        raise ConfigError("mbbn training needs M >= 1 and K >= 1")
    if args.progressive_from and flavor == "mbbn":
        raise ConfigError("progressive fine-tuning applies to qnn training only")
    model = nn.init_mlp(dims, rng, m_bits=m_bits, k_bits=k_bits, flavor=flavor)

    gs = train.init_grad_state(model, cfg)
    try:
        if args.progressive_from:
            results = train.progressive_schedule(
                model, (xt, yt), cfg, from_bits=args.progressive_from,
                to_bits=args.K, val_set=(xv, yv))
            res = results[-1]
            history = [row for r in results for row in r.history]
        else:
            res = train.train_model(model, (xt, yt), cfg, val_set=(xv, yv), gs=gs)
            history = res.history
    except DivergenceError as exc:
        train.save_checkpoint(args.out, model, gs, cfg)
        print(f"training diverged: {exc}; last checkpoint kept at {args.out}",
              file=sys.stderr)
        return 1
    train.save_checkpoint(args.out, res.model, res.grad_state, cfg)
    if args.log:
        train.write_log(history, args.log)
    final = history[-1] if history else {"loss": float("nan"), "train_acc":
                                         nn.accuracy(res.model, xt, yt),
                                         "val_acc": nn.accuracy(res.model, xv, yv)}
    print(f"final: loss={final['loss']:.4f} train_acc={final['train_acc']:.4f} "
          f"val_acc={final['val_acc']:.4f}")
    return 0


def cmd_eval(args) -> int:
    _require_file(args.model)
    x, y = _load_dataset(args)
    model = nn.load_model(args.model)
    acc = nn.accuracy(model, x, y, threads=args.threads)
    print(f"accuracy[{model.stage}]: {acc:.4f}")
    if not args.model2:
        return 0
    _require_file(args.model2)
    other = nn.load_model(args.model2)
    logits_a = nn.model_forward(model, x, threads=args.threads)
    logits_b = nn.model_forward(other, x, threads=args.threads)
    max_diff = float(np.max(np.abs(logits_a - logits_b)))
    same_class = bool(np.all(np.argmax(logits_a, 1) == np.argmax(logits_b, 1)))
    ok = max_diff <= 1e-6 and same_class
    print(f"accuracy[{other.stage}]: {nn.accuracy(other, x, y, threads=args.threads):.4f}")
    print(f"max logit diff: {max_diff:.3e}")
    print(f"equivalent: {'true' if ok else 'false'}")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    sizes = [tuple(int(v) for v in s.split("x")) for s in args.sizes.split(",")]
    precisions = [tuple(int(v) for v in s.split("x")) for s in args.precisions.split(",")]
    rows = bench.bench_gemm(sizes, precisions, repeats=args.repeats,
                            seed=args.seed, threads=args.threads)
    if args.out:
        bench.write_csv(rows, args.out)
    if args.plot_data:
        bench.write_plot_data(rows, args.plot_data)
    for row in rows:
        print(",".join(str(row[f]) for f in bench.CSV_FIELDS))
    return 0


def cmd_inspect(args) -> int:
    _require_file(args.model)
    model = nn.load_model(args.model)
    print(f"stage: {model.stage}")
    print(f"flavor: {model.flavor}")
    for i, spec in enumerate(model.specs):
        if spec.kind == "dense":
            print(f"layer {i}: dense {spec.in_features}->{spec.out_features} "
                  f"M={spec.m_bits} K={spec.k_bits} r={spec.r} follows_bn={spec.follows_bn}")
        elif spec.kind == "conv2d":
            kh, kw = spec.kernel
            print(f"layer {i}: conv2d {spec.in_features}->{spec.out_features} "
                  f"{kh}x{kw}/s{spec.stride}p{spec.padding} M={spec.m_bits} K={spec.k_bits} "
                  f"r={spec.r} follows_bn={spec.follows_bn}")
        elif spec.kind == "batchnorm":
            print(f"layer {i}: batchnorm features={spec.in_features} eps={spec.eps}")
        else:
            print(f"layer {i}: activation {spec.act}")
    print(f"weight bytes: {nn.weight_payload_bytes(model)}")
    print(f"compression ratio: {_format_ratio(nn.compression_ratio(model))}")
    return 0


def cmd_speedup_table(args) -> int:
    params = bench.SpeedModelParams(gamma=args.gamma, beta=args.beta,
                                    register_bits=args.L, n=args.N)
    grid = bench.speedup_grid(params)
    print("M\\K " + " ".join(f"{k:>7d}" for k in range(1, 9)))
    for m in range(1, 9):
        print(f"{m:>3d} " + " ".join(f"{grid[m - 1, k - 1]:7.2f}" for k in range(1, 9)))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitbranch")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--config", default="", help="key=value file mirroring flags")
        p.set_defaults(_defaults={a.dest: a.default for a in p._actions})

    p = sub.add_parser("quantize", help="float model -> quantized-stage model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--grid", choices=["odd", "linear"], default="odd")
    common(p)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("decompose", help="quantized model -> bit-plane model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("train", help="train a toy network")
    p.add_argument("--dataset", default="moons", help="moons|spirals|blobs|grid:PATH")
    p.add_argument("--arch", default="mlp:2-16-16-2")
    p.add_argument("--alg", choices=["qnn", "mbbn"], default="qnn")
    p.add_argument("--M", type=int, default=2, help="activation bits (0 = float)")
    p.add_argument("--K", type=int, default=2, help="weight bits (0 = float)")
    p.add_argument("--optimizer", choices=["auto", "sgd", "adam"], default="auto")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--grid", choices=["odd", "linear"], default="odd",
                   help="simulated-quantizer grid for qnn training")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--n", type=int, default=512, help="dataset size")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--val-frac", type=float, default=0.25)
    p.add_argument("--progressive-from", type=int, default=0,
                   help="start bits for progressive fine-tuning down to --K")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default="", help="CSV training log path")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate model(s); with --model2 check equivalence")
    p.add_argument("--model", required=True)
    p.add_argument("--model2", default="")
    p.add_argument("--dataset", default="moons")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--noise", type=float, default=0.1)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="micro-benchmark the packed kernel")
    p.add_argument("--sizes", default="1x8192x1")
    p.add_argument("--precisions", default="1x1,2x2,3x3")
    p.add_argument("--repeats", type=int, default=11)
    p.add_argument("--out", default="")
    p.add_argument("--plot-data", default="")
    common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="dump layer specs and storage accounting")
    p.add_argument("--model", required=True)
    common(p)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("speedup-table", help="analytic speedup over the M,K grid")
    p.add_argument("--gamma", type=float, default=1.91)
    p.add_argument("--beta", type=float, default=0.955)
    p.add_argument("--L", type=int, default=64)
    p.add_argument("--N", type=int, default=8192)
    common(p)
    p.set_defaults(fn=cmd_speedup_table)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args, args._defaults)
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, StageError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
