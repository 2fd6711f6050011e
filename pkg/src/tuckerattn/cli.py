"""Command-line entry point: ``tuckerattn <command> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
container error. The default seed comes from ``TUCKERATTN_SEED`` (0 if unset).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import accounting
from .attention_reference import MhaWeights, stack_attention_tensors
from .conversion import mha_to_gqa, mha_to_mla, mha_to_tucker, report_gqa, report_mla, report_tucker, spectrum
from .grad_training import ToyConfig, toy_train
from .rope import RopeConfig
from .tensor_io import ContainerError, load_weights, save_weights
from .tucker import TuckerAttentionParams, kv_cache_bytes, materialize, random_params
from .variants import GqaWeights, MlaWeights, gqa_lift, mla_lift
from .verification import SUITES, decode_error, run_suites

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SEED_ENV = "TUCKERATTN_SEED"


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def int_list(text: str) -> tuple:
    try:
        values = tuple(int(v) for v in text.replace("x", ",").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def fmt(value: float) -> str:
    return f"{value:.17g}"


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def lift(obj):
    if isinstance(obj, MhaWeights):
        return stack_attention_tensors(obj)
    if isinstance(obj, GqaWeights):
        return gqa_lift(obj)
    if isinstance(obj, MlaWeights):
        return mla_lift(obj)
    if isinstance(obj, TuckerAttentionParams):
        return materialize(obj)
    raise UsageError(f"container kind {getattr(obj, 'kind', '?')!r} holds no attention weights")


# -- commands ----------------------------------------------------------------


def cmd_init(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.kind == "mha":
        obj = MhaWeights.random(args.heads, args.d_model, rng=rng)
    elif args.kind == "gqa":
        obj = GqaWeights.random(args.heads, args.n_kv, args.d_model, rng=rng)
    elif args.kind == "mla":
        d_cq, d_ck = (args.d_c * 2)[:2]
        obj = MlaWeights.random(args.heads, args.d_model, d_cq, d_ck, shared_kv=args.shared_kv, rng=rng)
    else:
        if args.ranks is None:
            raise UsageError("--ranks is required for tucker")
        pre, post = _split_ranks(args.ranks)
        obj = random_params(args.heads, args.d_model, pre, post, shared_kv=args.shared_kv, rng=rng)
    manifest, _ = save_weights(args.out, obj)
    print(f"wrote {manifest}")
    return EXIT_OK


def _split_ranks(ranks):
    if len(ranks) == 3:
        return ranks, None
    if len(ranks) == 6:
        return ranks[:3], ranks[3:]
    raise UsageError("--ranks takes 3 values (both tensors) or 6 (pre then post)")


def cmd_spectrum(args) -> int:
    spectra = spectrum(lift(load_weights(args.weights)))
    rows = []
    for tensor, mode, values in spectra.items():
        rows.extend((tensor, mode, idx, fmt(v)) for idx, v in enumerate(values))
    write_csv(args.out, ("tensor", "mode", "index", "value"), rows)
    print(f"wrote {args.out}")
    if not args.no_figure:
        from .plotting import plot_spectrum

        print(f"wrote {plot_spectrum(spectra, Path(args.out).with_suffix('.png'))}")
    return EXIT_OK


def cmd_convert(args) -> int:
    src = load_weights(args.weights)
    if not isinstance(src, MhaWeights):
        raise UsageError("--weights must be an mha container")
    if args.to == "gqa":
        if args.n_kv is None:
            raise UsageError("--n-kv is required for gqa")
        dst = mha_to_gqa(src, args.n_kv)
        report = report_gqa(src, dst)
    elif args.to == "mla":
        if args.ranks is None or len(args.ranks) not in (1, 2):
            raise UsageError("--ranks takes d_c or d_cq,d_ck for mla")
        d_cq, d_ck = (args.ranks * 2)[:2]
        dst = mha_to_mla(src, d_cq, d_ck, shared=args.shared_kv)
        report = report_mla(src, dst)
    else:
        if args.ranks is None:
            raise UsageError("--ranks is required for tucker")
        pre, post = _split_ranks(args.ranks)
        dst = mha_to_tucker(src, pre, post, shared_kv=args.shared_kv)
        report = report_tucker(src, dst)
    save_weights(args.out, dst)
    print("quantity,relative_error")
    for name, err in report.rows():
        print(f"{name},{fmt(err)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = run_suites(args.suite, seed=args.seed)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def parse_dims(text: str) -> accounting.ModelDims:
    """Optional leading ``gpt2`` preset, then comma-separated ``key=value`` overrides; ranks as ``8x128x64``."""
    parts = [p for p in text.split(",") if p]
    dims = accounting.ModelDims(n_heads=1, d_model=1)
    if parts and parts[0] == "gpt2":
        dims = accounting.GPT2
        parts = parts[1:]
    allowed = {"n_heads", "d_model", "n_tokens", "layers", "n_kv", "d_c", "d_cq", "ranks"}
    for part in parts:
        key, sep, value = part.partition("=")
        if not sep or key not in allowed:
            raise UsageError(f"bad --dims item {part!r}; keys are {sorted(allowed)}")
        try:
            parsed = tuple(int(v) for v in value.split("x")) if key == "ranks" else int(value)
        except ValueError:
            raise UsageError(f"bad --dims value {part!r}") from None
        if key == "ranks" and len(parsed) != 3:
            raise UsageError("ranks needs three values, e.g. ranks=8x128x64")
        dims = dims.with_(**{key: parsed})
    if dims.d_model % dims.n_heads:
        raise UsageError("d_model must be divisible by n_heads")
    return dims


def cmd_params(args) -> int:
    dims = parse_dims(args.dims).with_(bytes_per_value=accounting.DTYPE_BYTES[args.dtype])
    methods = accounting.METHODS if args.method == "all" else (args.method,)
    header = ("method", "phase", "dtype", "params_per_layer", "params_total", "params_mb",
              "kv_per_layer", "kv_total", "kv_mb")
    rows = []
    for m in methods:
        try:
            r = accounting.account(m, dims, args.phase)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows.append((m, r.phase, args.dtype, r.params_per_layer, r.params_total, r.params_mb,
                     r.kv_per_layer, r.kv_total, r.kv_mb))
    if args.format == "csv":
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    else:
        for m, _, _, ppl, _, pmb, kpl, _, kmb in rows:
            print(f"{m:<17} params {pmb:>9} MB ({ppl}/layer)   KV cache {kmb:>9} MB ({kpl}/layer)")
    return EXIT_OK


def cmd_decode_demo(args) -> int:
    params = load_weights(args.weights)
    if not isinstance(params, TuckerAttentionParams):
        raise UsageError("--weights must be a tucker container")
    rope = RopeConfig(params.ranks_pre[2]) if args.rope == "latent" else None
    if rope is not None and rope.dim % 2:
        raise UsageError("latent RoPE needs an even key rank r3")
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.tokens, params.d_model))
    err = decode_error(params, x, rope)
    n_bytes = kv_cache_bytes(params, args.tokens, accounting.DTYPE_BYTES[args.dtype])
    print(f"tokens={args.tokens} rope={args.rope} shared_kv={params.shared_kv}")
    print(f"cache_values={n_bytes // accounting.DTYPE_BYTES[args.dtype]}")
    print(f"cache_bytes={n_bytes} ({accounting.format_mb(n_bytes)} MB per layer at {args.dtype})")
    print(f"max_relative_deviation={err:.3e}")
    return EXIT_OK if err <= 1e-10 else EXIT_VERIFY


def cmd_train_toy(args) -> int:
    cfg = ToyConfig(seed=args.seed, steps=args.steps, lr=args.lr, shared_kv=args.shared_kv, init=args.init)
    result = toy_train(cfg)
    write_csv(args.out, ("step", "loss"), [(i, fmt(v)) for i, v in enumerate(result.losses)])
    print(f"wrote {args.out}")
    if not args.no_figure:
        from .plotting import plot_losses

        print(f"wrote {plot_losses(result.losses, Path(args.out).with_suffix('.png'))}")
    print(f"loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f} "
          f"({100 * result.reduction:.1f}% reduction){' DIVERGED' if result.diverged else ''}")
    return EXIT_VERIFY if result.diverged else EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tuckerattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def seeded(p):
        p.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV} or 0")
        return p

    p = seeded(sub.add_parser("init", help="write a random weight container"))
    p.add_argument("--kind", choices=("mha", "gqa", "mla", "tucker"), default="mha")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-kv", type=int, default=2)
    p.add_argument("--d-c", type=int_list, default=(8,), help="d_c, or d_cq,d_ck")
    p.add_argument("--ranks", type=int_list, help="r1,r2,r3 (or six values: pre then post)")
    p.add_argument("--shared-kv", action="store_true")
    p.add_argument("--out", required=True, help="container path without extension")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("spectrum", help="normalized singular spectra of the lifted tensors")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="CSV path; a PNG is written next to it")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("convert", help="convert MHA weights and report reconstruction error")
    p.add_argument("--from", dest="source", choices=("mha",), default="mha")
    p.add_argument("--to", choices=("gqa", "mla", "tucker"), required=True)
    p.add_argument("--ranks", type=int_list)
    p.add_argument("--n-kv", type=int)
    p.add_argument("--shared-kv", action="store_true")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = seeded(sub.add_parser("verify", help="run oracle suites"))
    p.add_argument("--suite", action="append", choices=tuple(SUITES),
                   help="repeatable; all suites when omitted")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("params", help="parameter and KV-cache accounting")
    p.add_argument("--method", choices=accounting.METHODS + ("all",), default="all")
    p.add_argument("--dims", default="gpt2", help="gpt2 and/or key=value items, e.g. gpt2,ranks=8x128x64")
    p.add_argument("--dtype", choices=tuple(accounting.DTYPE_BYTES), default="bf16")
    p.add_argument("--phase", choices=("train", "inference"), default="train")
    p.add_argument("--format", choices=("csv", "table"), default="table")
    p.set_defaults(func=cmd_params)

    p = seeded(sub.add_parser("decode-demo", help="incremental decoding against the full forward"))
    p.add_argument("--weights", required=True)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--rope", choices=("latent", "none"), default="none")
    p.add_argument("--dtype", choices=tuple(accounting.DTYPE_BYTES), default="bf16")
    p.set_defaults(func=cmd_decode_demo)

    p = seeded(sub.add_parser("train-toy", help="train on the copy-previous-token task"))
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--init", choices=("random", "mha"), default="random")
    p.add_argument("--shared-kv", action="store_true")
    p.add_argument("--out", required=True, help="CSV path; a PNG is written next to it")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = default_seed()
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ContainerError) as exc:
        print(f"{parser.prog} {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
