"""Command-line front end.

Five subcommands move artifacts between files: synth writes a bundle
directory, diagnose turns a bundle into a report JSON, search turns a bundle
(plus optional report) into a plan JSON, apply patches a tensor-container
checkpoint with a plan, and report renders a report (optionally joined with
a plan) as text, CSV, or JSON.

Data goes to stdout or the requested output file; logs go to stderr. Exit
codes: 0 success, 1 validation failure, 2 I/O failure, 3 backend or protocol
failure.
"""
from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import logging
import os
import sys

import numpy as np

from . import io as qio
from .diagnostics import compute_report
from .evaluator import (
    BackendError,
    ExternalEvaluator,
    LogitDistortionEvaluator,
    ObjectiveSpec,
    OutlierSpec,
    QuantSpec,
    synth_model,
)
from .search import (
    STRATEGIES,
    SearchConfig,
    SearchStageError,
    band_window,
    gamma_bound,
    run_qroar,
)
from .bands import band_freq_stats
from .rope import PAIRINGS

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_BACKEND = 3

SUPPORTED_BANDS = (6, 8)
SUPPORTED_GRID = (5, 9)  # inclusive range

logger = logging.getLogger("qroar.cli")


class CliError(ValueError):
    """Bad flags or bad flag combinations; exits with the validation code."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; that slot belongs to I/O
    # failures here, so route usage errors through the validation path.
    def error(self, message: str):
        raise CliError(message)


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError:
        raise CliError(f"expected a comma-separated list of integers, got {text!r}")
    if not values:
        raise CliError(f"expected a non-empty list of integers, got {text!r}")
    return values


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("QROAR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"QROAR_SEED must be an integer, got {env!r}")
    return 0


def _check_band_count(num_bands: int, allow_nonstandard: bool) -> None:
    if num_bands not in SUPPORTED_BANDS and not allow_nonstandard:
        raise CliError(
            f"--bands {num_bands} is outside the supported set {SUPPORTED_BANDS}; "
            "pass --allow-nonstandard to override"
        )


def _check_grid_count(grid: int, allow_nonstandard: bool) -> None:
    lo, hi = SUPPORTED_GRID
    if not lo <= grid <= hi and not allow_nonstandard:
        raise CliError(
            f"--grid {grid} is outside the supported range [{lo}, {hi}]; "
            "pass --allow-nonstandard to override"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qroar", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic desk-scale bundle")
    p.add_argument("--out", required=True, help="bundle directory to create")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default: $QROAR_SEED or 0)")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--train-window", type=int, default=256)
    p.add_argument("--pi-factor", type=float, default=8.0)
    p.add_argument("--base", type=float, default=10000.0)
    p.add_argument("--pairing", choices=PAIRINGS, default="half_split")
    p.add_argument("--lengths", type=_csv_ints, default=(128, 512, 2048),
                   help="evaluation context lengths, comma separated")
    p.add_argument("--bits", type=int, default=4, help="weight quantizer bit width")
    p.add_argument("--granularity", choices=("per_tensor", "per_output_channel", "per_group"),
                   default="per_tensor")
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--act-bits", type=int, default=None,
                   help="also fake-quantize activations at this width")
    p.add_argument("--no-quant", action="store_true", help="keep weights full precision")
    p.add_argument("--no-outliers", action="store_true")
    p.add_argument("--outlier-channels", type=_csv_ints, default=(3, 11, 27))
    p.add_argument("--outlier-pairs", type=_csv_ints, default=(2, 3))
    p.add_argument("--row-gain", type=float, default=8.0)
    p.add_argument("--amp", type=float, default=3.0)
    p.add_argument("--growth", type=float, default=4.0)
    p.add_argument("--tail-df", type=float, default=3.0)
    p.add_argument("--min-samples", type=int, default=1000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("diagnose", help="compute a diagnostics report")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--eps", type=float, default=0.01, help="tail quantile level is 1 - eps")
    p.add_argument("--displacement", type=float, default=None)
    p.add_argument("--curves", action="store_true", help="attach position-binned TIR_A curves")
    p.add_argument("--allow-nonstandard", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("search", help="search per-band rescale factors")
    p.add_argument("--bundle", required=True)
    p.add_argument("--report", default=None, help="existing report JSON (recomputed when omitted)")
    p.add_argument("--out", required=True, help="plan JSON path")
    p.add_argument("--strategy", choices=STRATEGIES, default="coordinate")
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--kappa", type=float, default=1.2)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--eta", type=float, default=1e-4)
    p.add_argument("--max-passes", type=int, default=3)
    p.add_argument("--clamp", type=float, nargs=2, default=(0.25, 4.0), metavar=("LO", "HI"))
    p.add_argument("--lengths", type=_csv_ints, default=None)
    p.add_argument("--samples", type=int, default=4096, help="logit samples per length")
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--displacement", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--evaluator", choices=("builtin", "external"), default="builtin")
    p.add_argument("--backend", default=None, help="backend command line (external evaluator)")
    p.add_argument("--window", type=int, default=256, help="sliding window for ppl backends")
    p.add_argument("--timeout", type=float, default=60.0, help="backend response timeout, seconds")
    p.add_argument("--allow-nonstandard", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("apply", help="patch a checkpoint with a plan")
    p.add_argument("--checkpoint", required=True, help="tensor container to patch")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True, help="patched container path")
    p.add_argument("--q-pattern", action="append", default=None,
                   help="glob for query projections (repeatable)")
    p.add_argument("--k-pattern", action="append", default=None,
                   help="glob for key projections (repeatable)")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("report", help="render a report as text, CSV, or JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--plan", default=None, help="join per-band factors from this plan")
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.add_argument("--kappa", type=float, default=1.2, help="window center pull (no plan given)")
    p.add_argument("--tau", type=float, default=0.3, help="window width knob (no plan given)")
    p.set_defaults(func=cmd_report)

    return parser


def cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    outliers = None
    if not args.no_outliers:
        outliers = OutlierSpec(
            channels=args.outlier_channels,
            target_pairs=args.outlier_pairs,
            row_gain=args.row_gain,
            amp=args.amp,
            growth=args.growth,
            tail_df=args.tail_df,
        )
    quant = None
    if not args.no_quant:
        quant = QuantSpec(args.bits, args.granularity, group_size=args.group_size)
    act_quant = QuantSpec(args.act_bits, "per_output_channel") if args.act_bits else None
    bundle = synth_model(
        seed,
        d_model=args.d_model,
        num_heads=args.heads,
        head_dim=args.head_dim,
        train_window=args.train_window,
        pi_factor=args.pi_factor,
        base=args.base,
        pairing=args.pairing,
        lengths=args.lengths,
        outliers=outliers,
        quant=quant,
        act_quant=act_quant,
        min_samples=args.min_samples,
    )
    qio.write_bundle(bundle, args.out)
    print(
        f"wrote bundle to {args.out} "
        f"(d_model={args.d_model}, heads={args.heads}, head_dim={args.head_dim}, "
        f"train_window={args.train_window}, pi={args.pi_factor:g}, seed={seed})"
    )
    return EXIT_OK


def cmd_diagnose(args) -> int:
    _check_band_count(args.bands, args.allow_nonstandard)
    bundle = qio.read_bundle(args.bundle)
    report = compute_report(
        bundle, args.bands, eps=args.eps, displacement=args.displacement, with_curves=args.curves
    )
    qio.write_report(report, args.out)
    worst = int(np.argmax(report.band_tir_w))
    print(
        f"wrote report to {args.out} (B={args.bands}, eps={args.eps:g}, "
        f"D={report.displacement:g}, worst band by TIR_W: {worst} "
        f"at {report.band_tir_w[worst]:.4g})"
    )
    return EXIT_OK


def cmd_search(args) -> int:
    _check_band_count(args.bands, args.allow_nonstandard)
    _check_grid_count(args.grid, args.allow_nonstandard)
    if args.evaluator == "external" and not args.backend:
        raise CliError("--evaluator external requires --backend")
    if args.backend and args.evaluator != "external":
        raise CliError("--backend only applies to --evaluator external")
    seed = _resolve_seed(args)
    bundle = qio.read_bundle(args.bundle)
    if args.report is not None:
        report = qio.read_report(args.report)
        if report.partition.num_bands != args.bands:
            raise CliError(
                f"report has {report.partition.num_bands} bands but --bands is {args.bands}"
            )
    else:
        report = compute_report(bundle, args.bands, eps=args.eps, displacement=args.displacement)
    config = SearchConfig(
        num_bands=args.bands,
        grid_points=args.grid,
        strategy=args.strategy,
        kappa=args.kappa,
        tau=args.tau,
        eta=args.eta,
        max_passes=args.max_passes,
        lengths=tuple(args.lengths) if args.lengths else (),
        global_clamp=tuple(args.clamp),
        seed=seed,
    )
    lengths = config.lengths or bundle.eval_lengths or tuple(sorted(bundle.caches))
    spec = ObjectiveSpec(
        lengths=lengths, samples_per_length=args.samples, window=args.window, seed=seed
    )
    if args.evaluator == "external":
        with ExternalEvaluator(args.backend, spec, timeout=args.timeout) as backend:
            plan = run_qroar(bundle, report, config, evaluate=backend)
    else:
        plan = run_qroar(bundle, report, config, evaluate=LogitDistortionEvaluator(bundle, spec))
        plan.provenance["search"]["evaluator"] = "logit_mse"
    qio.write_plan(plan, args.out)
    meta = plan.provenance["search"]
    print(
        f"wrote plan to {args.out} (mode={plan.mode}, objective={meta['objective_value']:.6g}, "
        f"identity={meta['identity_objective']:.6g}, evaluations={meta['evaluations']})"
    )
    if meta["objective_value"] > meta["identity_objective"]:
        print("plan objective exceeds the identity objective", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_apply(args) -> int:
    plan = qio.read_plan(args.plan)
    q_patterns = tuple(args.q_pattern) if args.q_pattern else qio.DEFAULT_Q_PATTERNS
    k_patterns = tuple(args.k_pattern) if args.k_pattern else qio.DEFAULT_K_PATTERNS
    patched = qio.patch_checkpoint(
        args.checkpoint, plan, args.out, q_patterns=q_patterns, k_patterns=k_patterns
    )
    for name, role in patched:
        for b in range(plan.num_bands):
            g = plan.scales[b]
            if role == "k" and plan.mode == "symmetric":
                g = 1.0 / g
            print(f"{name}\t{role}\tband={b}\tg={g:.12g}")
    print(f"patched {len(patched)} tensors into {args.out}")
    return EXIT_OK


def _report_rows(report, plan, kappa: float, tau: float) -> list[dict]:
    rows = []
    for b in range(report.partition.num_bands):
        med, _, ratio = band_freq_stats(report.partition, b)
        if plan is not None and plan.provenance.get("search", {}).get("windows"):
            lo, hi = plan.provenance["search"]["windows"][b]
        else:
            gamma = gamma_bound(ratio, tau)
            lo, hi = band_window(gamma, float(report.band_tir_w[b]), kappa)
        rows.append(
            {
                "band": b,
                "omega_med": med,
                "ip": float(report.band_ip[b]),
                "tir_w": float(report.band_tir_w[b]),
                "tir_a": float(report.band_tir_a[b]),
                "g_min": lo,
                "g_max": hi,
                "g_star": float(plan.scales[b]) if plan is not None else 1.0,
            }
        )
    return rows


def cmd_report(args) -> int:
    report = qio.read_report(args.report)
    plan = qio.read_plan(args.plan) if args.plan else None
    if plan is not None and plan.num_bands != report.partition.num_bands:
        raise CliError(
            f"plan has {plan.num_bands} bands but the report has {report.partition.num_bands}"
        )
    if args.format == "json":
        text = json.dumps(qio.report_to_document(report), sort_keys=True, indent=2) + "\n"
    elif args.format == "csv":
        buf = _stdio.StringIO()
        writer = csv.DictWriter(
            buf,
            fieldnames=["band", "omega_med", "ip", "tir_w", "tir_a", "g_min", "g_max", "g_star"],
        )
        writer.writeheader()
        for row in _report_rows(report, plan, args.kappa, args.tau):
            writer.writerow({k: f"{v:.12g}" if isinstance(v, float) else v for k, v in row.items()})
        text = buf.getvalue()
    else:
        lines = [
            f"bands={report.partition.num_bands} eps={report.eps:g} "
            f"displacement={report.displacement:g} pairing={report.pairing}",
            f"{'band':>4} {'omega_med':>12} {'IP':>12} {'TIR_W':>10} {'TIR_A':>10} "
            f"{'window':>21} {'g*':>8}",
        ]
        for row in _report_rows(report, plan, args.kappa, args.tau):
            lines.append(
                f"{row['band']:>4} {row['omega_med']:>12.6g} {row['ip']:>12.6g} "
                f"{row['tir_w']:>10.4g} {row['tir_a']:>10.4g} "
                f"[{row['g_min']:>9.4g},{row['g_max']:>9.4g}] {row['g_star']:>8.4g}"
            )
        if plan is not None:
            meta = plan.provenance.get("search", {})
            obj = meta.get("objective_value")
            ident = meta.get("identity_objective")
            if obj is not None and ident is not None:
                delta = ident - obj
                rel = delta / ident if ident else float("nan")
                lines.append(
                    f"objective {obj:.6g} vs identity {ident:.6g} "
                    f"(improvement {delta:.6g}, {100 * rel:.2f}%)"
                )
            lines.append(f"mode={plan.mode} scales=" + " ".join(f"{g:.6g}" for g in plan.scales))
        text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _exit_code_for(exc: Exception) -> int:
    # search wraps evaluator failures twice (memo context, then the stage),
    # so classify against the whole explicit cause chain
    node: BaseException | None = exc
    seen: set[int] = set()
    while node is not None and id(node) not in seen:
        seen.add(id(node))
        if isinstance(node, BackendError):
            return EXIT_BACKEND
        if isinstance(node, (qio.TensorFileError, OSError)):
            return EXIT_IO
        node = node.__cause__
    return EXIT_VALIDATION


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
    except (BackendError, qio.TensorFileError, OSError, SearchStageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc)
    except NotImplementedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
