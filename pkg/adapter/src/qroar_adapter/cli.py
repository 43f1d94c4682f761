"""Command-line front end: patch checkpoints, serve evaluations, self-test.

Exit codes: 0 success, 1 validation failure, 2 I/O failure. The serve
subcommand writes protocol lines to standard output and logs to standard
error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .model import (
    ModelConfig,
    init_model,
    load_corpus,
    load_model,
    logit_self_test,
    make_corpus,
    save_corpus,
    save_model,
)
from .patching import DEFAULT_K_PATTERNS, DEFAULT_Q_PATTERNS, adapter_apply
from .plans import PlanError, load_plan
from .serving import adapter_serve

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2

logger = logging.getLogger("qroar_adapter.cli")


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qroar-adapter", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("apply", help="patch a safetensors checkpoint with a plan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--q-pattern", action="append", default=None)
    p.add_argument("--k-pattern", action="append", default=None)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("serve", help="speak the evaluator protocol on stdio")
    p.add_argument("--model", required=True, help="model directory (config.json + weights)")
    p.add_argument("--corpus", required=True, help="token corpus JSON")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("self-test", help="check that a plan preserves logits")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="max relative logit change for a symmetric plan")
    p.set_defaults(func=cmd_self_test)

    p = sub.add_parser("init-demo", help="write a seeded toy model and corpus")
    p.add_argument("--out", required=True, help="model directory to create")
    p.add_argument("--corpus", default=None, help="corpus path (default <out>/corpus.json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--train-window", type=int, default=64)
    p.add_argument("--pi-factor", type=float, default=4.0)
    p.add_argument("--pairing", choices=("half_split", "interleaved"), default="half_split")
    p.add_argument("--docs", type=int, default=4)
    p.add_argument("--doc-tokens", type=int, default=2048)
    p.set_defaults(func=cmd_init_demo)

    return parser


def cmd_apply(args) -> int:
    q_patterns = tuple(args.q_pattern) if args.q_pattern else DEFAULT_Q_PATTERNS
    k_patterns = tuple(args.k_pattern) if args.k_pattern else DEFAULT_K_PATTERNS
    patched = adapter_apply(
        args.checkpoint, args.plan, args.out, q_patterns=q_patterns, k_patterns=k_patterns
    )
    for name, role in patched:
        print(f"{name}\t{role}")
    print(f"patched {len(patched)} tensors into {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    model = load_model(args.model)
    documents = load_corpus(args.corpus)
    return adapter_serve(model, documents)


def cmd_self_test(args) -> int:
    model = load_model(args.model)
    plan = load_plan(args.plan)
    drift = logit_self_test(model, plan, seed=args.seed)
    if plan.mode != "symmetric":
        print(f"plan mode is {plan.mode}; logit preservation only holds for "
              f"symmetric plans (observed relative change {drift:.3g})")
        return EXIT_OK
    ok = drift <= args.tolerance
    print(
        f"symmetric plan changed logits by {drift:.3g} relative "
        f"({'within' if ok else 'EXCEEDS'} tolerance {args.tolerance:g}); "
        f"{'pairing convention matches' if ok else 'check the pairing convention'}"
    )
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_init_demo(args) -> int:
    config = ModelConfig(
        vocab_size=args.vocab,
        d_model=args.d_model,
        num_layers=args.layers,
        num_heads=args.heads,
        head_dim=args.head_dim,
        mlp_hidden=2 * args.d_model,
        pairing=args.pairing,
        train_window=args.train_window,
        pi_factor=args.pi_factor,
    )
    model = init_model(args.seed, config)
    save_model(model, args.out)
    corpus_path = args.corpus or f"{args.out.rstrip('/')}/corpus.json"
    save_corpus(make_corpus(args.seed, args.docs, args.doc_tokens, args.vocab), corpus_path)
    print(f"wrote model to {args.out} and corpus to {corpus_path} (seed {args.seed})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PlanError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
