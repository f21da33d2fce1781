"""Command-line driver: validate, eval, sweep, ablate, ncap, retrieve, synth.

Exit codes: 0 success, 1 domain/config error, 2 unreadable or malformed
on-disk data.  All file outputs are byte-stable given identical inputs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bundle as bundle_mod
from . import evalkit, fusion, search
from .errors import DomainError, EngineError, FormatError
from .evalkit import RunConfig
from .fusion import FusionWeights
from .metrics import DEFAULT_K_LISTS, METRIC_NAMES


def _comma_ints(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _comma_floats(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_weight_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=0.6,
                   help="weight of averaged modified-caption features (default 0.6)")
    p.add_argument("--beta", type=float, default=0.4,
                   help="weight of fine-grained prompt features (default 0.4)")
    p.add_argument("--gamma", type=float, default=0.2,
                   help="gallery caption-mean weight (default 0.2)")
    p.add_argument("--drop", type=str, default=None,
                   help="comma-separated channels to mask out (QM,QF,QV,TC,TV)")
    p.add_argument("--ncap-query", type=int, default=None,
                   help="use only the first N query caption rows")
    p.add_argument("--ncap-target", type=int, default=None,
                   help="use only the first N gallery caption rows")
    p.add_argument("--allow-negative-residual", action="store_true",
                   help="permit alpha + beta > 1")
    p.add_argument("--no-normalize", action="store_true",
                   help="skip unit-normalizing constituent channels before fusion")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=1,
                   help="ranking worker cap; never changes results")
    p.add_argument("--kernel", choices=search.KERNELS, default="blocked")
    excl = p.add_mutually_exclusive_group()
    excl.add_argument("--exclude-ref", dest="exclude_ref", action="store_true",
                      default=None, help="drop each query's reference image from its gallery")
    excl.add_argument("--no-exclude-ref", dest="exclude_ref", action="store_false",
                      help="keep reference images in the gallery")


def _weights_from(args: argparse.Namespace) -> FusionWeights:
    weights = FusionWeights(alpha=args.alpha, beta=args.beta, gamma=args.gamma,
                            n_query_captions_used=args.ncap_query,
                            n_target_captions_used=args.ncap_target,
                            allow_negative_residual=args.allow_negative_residual)
    if args.drop:
        weights = fusion.apply_ablation(weights, fusion.parse_channels(args.drop.split(",")))
    return weights


def _config_from(args: argparse.Namespace) -> RunConfig:
    requested = None
    if getattr(args, "metrics", None):
        requested = tuple(tok.strip() for tok in args.metrics.split(",") if tok.strip())
    k_lists = dict(DEFAULT_K_LISTS)
    if getattr(args, "k", None):
        k_lists = {name: tuple(args.k) for name in METRIC_NAMES}
    exclusion = None
    if getattr(args, "exclude_ref", None) is not None:
        exclusion = "exclude_reference" if args.exclude_ref else "none"
    return RunConfig(weights=_weights_from(args), metrics=requested, k_lists=k_lists,
                     exclusion=exclusion, normalize_inputs=not args.no_normalize,
                     kernel=args.kernel, threads=args.threads)


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _print_summary(report) -> None:
    for metric in sorted(report.metrics):
        for k in sorted(report.metrics[metric]):
            print(f"{metric}@{k} {report.metrics[metric][k]:.6f}")
    if report.category_average is not None:
        for metric in sorted(report.category_average):
            for k in sorted(report.category_average[metric]):
                print(f"average/{metric}@{k} {report.category_average[metric][k]:.6f}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    bundle = bundle_mod.load_bundle(args.bundle, check=False)
    report = bundle_mod.validate(bundle)
    for violation in report.violations:
        print(violation, file=sys.stderr)
    return 0 if report.ok else 1


def cmd_eval(args: argparse.Namespace) -> int:
    bundle = bundle_mod.load_bundle(args.bundle, check=False)
    report = bundle_mod.validate(bundle)
    if not report.ok:
        raise DomainError(f"bundle fails validation:\n{report}")
    cfg = _config_from(args)
    result = evalkit.evaluate(bundle, cfg)
    if args.out:
        _write_text(args.out, result.to_json())
    _print_summary(result)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    bundle = bundle_mod.load_bundle(args.bundle, check=False)
    cfg = _config_from(args)
    result = evalkit.sweep(bundle, grid_step=args.step, gamma_values=args.gamma_values,
                           base_config=cfg, alphas=args.alphas, betas=args.betas)
    _write_text(args.out, result.to_csv(metric=args.metric, k=args.topk))
    if args.out:
        print(f"{len(result.cells)} cells -> {args.out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    bundle = bundle_mod.load_bundle(args.bundle, check=False)
    cfg = _config_from(args)
    if args.drop_sets:
        drops = [fusion.parse_channels(entry.split(",")) for entry in args.drop_sets]
        drops.insert(0, frozenset())
    else:
        drops = list(evalkit.ABLATION_PRESET)
    rows = evalkit.ablate(bundle, cfg, drops)
    lines = ["dropped,metric,k,value"]
    order = [c for c in fusion.Channel]
    for drop, report in rows:
        label = "none" if not drop else "+".join(c.value for c in order if c in drop)
        for metric in sorted(report.metrics):
            for k in sorted(report.metrics[metric]):
                lines.append(f"{label},{metric},{k},{report.metrics[metric][k]:.6f}")
    _write_text(args.out, "\n".join(lines) + "\n")
    if args.out:
        print(f"{len(rows)} rows -> {args.out}")
    return 0


def cmd_ncap(args: argparse.Namespace) -> int:
    bundle = bundle_mod.load_bundle(args.bundle, check=False)
    cfg = _config_from(args)
    rows = evalkit.ncap_sweep(bundle, args.n, side=args.side, config=cfg)
    lines = ["side,n,metric,k,value"]
    for n, report in rows:
        for metric in sorted(report.metrics):
            for k in sorted(report.metrics[metric]):
                lines.append(f"{args.side},{n},{metric},{k},{report.metrics[metric][k]:.6f}")
    _write_text(args.out, "\n".join(lines) + "\n")
    if args.out:
        print(f"{len(rows)} rows -> {args.out}")
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    bundle = bundle_mod.load_bundle(args.bundle, check=False)
    m = bundle.manifest
    if not 0 <= args.query_id < m.query_count:
        raise DomainError(f"query id {args.query_id} out of range [0, {m.query_count})")
    if not 1 <= args.topk <= m.gallery_count:
        raise DomainError(f"topk {args.topk} out of range [1, {m.gallery_count}]")
    cfg = _config_from(args)
    prep = evalkit._prepare(bundle, cfg)
    fused_g = evalkit._fuse_gallery(prep, cfg.weights)
    q_m = None if prep.q_m is None else prep.q_m[args.query_id]
    fused_q = fusion.fuse_query(q_m, prep.q_f[args.query_id], prep.q_v[args.query_id],
                                cfg.weights)
    annotation = bundle.annotations[args.query_id]
    exclusions = None
    if evalkit._resolve_exclusion(bundle, cfg) == "exclude_reference" \
            and annotation.reference_id is not None:
        exclusions = (annotation.reference_id,)
    ranking = search.top_k(fused_q, fused_g, args.topk, exclusions=exclusions,
                           kernel=cfg.kernel)
    for idx, score in ranking.entries():
        print(f"{idx}\t{score:.6f}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    ncap_query = args.ncap if args.ncap_query is None else args.ncap_query
    built = bundle_mod.synth_bundle(
        gallery_count=args.targets, query_count=args.queries, dim=args.dim,
        captions_per_target=args.ncap, captions_per_query=ncap_query,
        protocol=args.protocol, planted_fraction=args.planted_fraction,
        seed=args.seed)
    bundle_mod.write_bundle(built, args.out)
    print(f"bundle written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cirfuse",
        description="Fuse precomputed feature channels, rank galleries by cosine "
                    "similarity, and score retrieval metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a bundle against every format invariant")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("eval", help="evaluate a bundle and report metrics")
    p.add_argument("bundle")
    _add_weight_flags(p)
    _add_run_flags(p)
    p.add_argument("--metrics", type=str, default=None,
                   help="comma-separated subset of map,recall,recall_subset")
    p.add_argument("--k", type=_comma_ints, default=None,
                   help="comma-separated cutoffs applied to every requested metric")
    p.add_argument("--out", type=str, default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid-sweep alpha/beta/gamma")
    p.add_argument("bundle")
    _add_weight_flags(p)
    _add_run_flags(p)
    p.add_argument("--step", type=float, default=0.1, help="alpha/beta grid step")
    p.add_argument("--gamma-values", type=_comma_floats, default=[0.2],
                   help="gamma values to sweep (comma-separated)")
    p.add_argument("--alphas", type=_comma_floats, default=None,
                   help="explicit alpha list overriding --step")
    p.add_argument("--betas", type=_comma_floats, default=None,
                   help="explicit beta list overriding --step")
    p.add_argument("--metric", type=str, default=None, help="restrict CSV to one metric")
    p.add_argument("--topk", type=int, default=None, help="restrict CSV to one k")
    p.add_argument("--out", type=str, default=None, help="write the CSV here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="evaluate channel-drop derivatives")
    p.add_argument("bundle")
    _add_weight_flags(p)
    _add_run_flags(p)
    p.add_argument("--drop-set", dest="drop_sets", action="append", default=None,
                   metavar="CHANNELS",
                   help="evaluate this drop set (repeatable, e.g. --drop-set QM,TC); "
                        "default is the standard 7-row preset plus baseline")
    p.add_argument("--out", type=str, default=None, help="write the CSV here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ncap", help="sweep how many caption rows feed the averages")
    p.add_argument("bundle")
    _add_weight_flags(p)
    _add_run_flags(p)
    p.add_argument("--side", choices=("query", "target"), default="target")
    p.add_argument("--n", type=_comma_ints, required=True,
                   help="comma-separated caption counts")
    p.add_argument("--out", type=str, default=None, help="write the CSV here")
    p.set_defaults(func=cmd_ncap)

    p = sub.add_parser("retrieve", help="dump the ranked list for one query")
    p.add_argument("bundle")
    _add_weight_flags(p)
    _add_run_flags(p)
    p.add_argument("--query-id", type=int, required=True)
    p.add_argument("--topk", type=int, default=5)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("synth", help="generate a synthetic planted-target bundle")
    p.add_argument("--targets", type=int, default=100, help="gallery size K")
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--ncap", type=int, default=3, help="caption rows per gallery item")
    p.add_argument("--ncap-query", type=int, default=None,
                   help="caption rows per query (defaults to --ncap)")
    p.add_argument("--protocol", choices=bundle_mod.PROTOCOLS, default="multi_gt")
    p.add_argument("--planted-fraction", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
