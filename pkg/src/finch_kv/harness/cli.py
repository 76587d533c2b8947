"""Command-line entry point: ``finch-kv {run,sweep,needle,oracle-check,heatmap,bench}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from ..compressor import NORM_MODES, CompressionConfig
from ..formats import load_weights, save_cache
from ..kv_cache import ORDERING_MODES
from ..model import ModelConfig, build_model
from ..pipeline import MODES, RunConfig, answer_distance, prefill_finch, run
from .corpus import NeedleSpec, make_needle_corpus, read_token_file
from .experiments import (
    SCHEMA_VERSION,
    ExperimentReport,
    SweepGrid,
    emit_heatmap,
    measure_prefill_scaling,
    needle_retention,
    needle_study,
    oracle_check,
    run_sweep,
    write_trace_csv,
)

log = logging.getLogger("finch_kv")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x)


def _common(p: argparse.ArgumentParser) -> None:
    budget = p.add_mutually_exclusive_group()
    budget.add_argument("--target-tokens", type=int, metavar="K", help="compressed cache size k")
    budget.add_argument("--sigma", type=float, metavar="S", help="compression ratio n_cont/k")
    p.add_argument("--chunk-size", type=int, default=128, metavar="M")
    p.add_argument("--norm-mode", choices=NORM_MODES, default="column-mean")
    p.add_argument("--order-mode", choices=ORDERING_MODES, default="ranking")
    p.add_argument("--max-new-tokens", type=int, default=4, metavar="A")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.add_argument("--weights", type=Path, metavar="FILE", help="binary weight file (default: seeded toy model)")
    p.add_argument("--n-max", type=int, default=512, help="context window of the seeded toy model")
    p.add_argument("--csv-out", type=Path, metavar="FILE")
    p.add_argument("--trace", action="store_true", help="capture per-step selections")


def build_parser() -> argparse.ArgumentParser:
    base = argparse.ArgumentParser(add_help=False)
    base.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="finch-kv", description="Prompt-guided KV-cache compression on a toy decoder.", parents=[base]
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[base], help="prefill + generate on token files or a needle corpus")
    _common(p)
    p.add_argument("--mode", choices=MODES, default="finch")
    p.add_argument("--doc", type=Path, metavar="FILE")
    p.add_argument("--prompt", type=Path, metavar="FILE")
    p.add_argument("--answer", type=Path, metavar="FILE", help="reference answers for EM/F1")
    p.add_argument("--n-cont", type=int, default=384, help="needle corpus length when --doc is absent")
    p.add_argument("--offset", type=float, default=0.5, help="needle position when --doc is absent")
    p.add_argument("--dump-cache", type=Path, metavar="FILE", help="write a cache snapshot at generation start")

    p = sub.add_parser("sweep", parents=[base], help="grid of modes x sigma x chunk size x needle offset")
    _common(p)
    p.add_argument("--modes", default="vanilla,finch")
    p.add_argument("--sigmas", type=_floats, default=(2.0, 4.0, 8.0))
    p.add_argument("--chunk-sizes", type=_ints, default=None)
    p.add_argument("--offsets", type=_floats, default=(0.0, 0.5, 1.0))
    p.add_argument("--seeds", type=_ints, default=(0,))
    p.add_argument("--n-cont", type=int, default=256)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-timing", action="store_true", help="leave timing columns empty (byte-stable output)")

    p = sub.add_parser("needle", parents=[base], help="needle retention, finch vs truncate")
    _common(p)
    p.add_argument("--offsets", type=_floats, default=(0.0, 0.25, 0.5, 0.75, 1.0))
    p.add_argument("--seeds", type=int, default=100, help="number of corpus seeds")
    p.add_argument("--n-cont", type=int, default=512)

    p = sub.add_parser("oracle-check", parents=[base], help="compare selections against the brute-force oracle")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("heatmap", parents=[base], help="emit prompt-attention matrices for one layer")
    _common(p)
    p.add_argument("--doc", type=Path, metavar="FILE")
    p.add_argument("--prompt", type=Path, metavar="FILE")
    p.add_argument("--n-cont", type=int, default=384)
    p.add_argument("--offset", type=float, default=0.5)
    p.add_argument("--layer", type=int, default=-1, help="layer index (negative counts from the end)")

    p = sub.add_parser("bench", parents=[base], help="prefill cost scaling of finch vs vanilla")
    p.add_argument("--n-cont", type=_ints, default=(256, 512, 1024, 2048))
    p.add_argument("--chunk-size", type=int, default=64)
    p.add_argument("--target-tokens", type=int, default=64)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv-out", type=Path)
    return parser


def _weights(args):
    if args.weights:
        return load_weights(args.weights)
    return build_model(ModelConfig(n_max=args.n_max), args.seed)


def _compression(args, default_sigma: float = 4.0) -> CompressionConfig:
    if args.target_tokens is None and args.sigma is None:
        args.sigma = default_sigma
    return CompressionConfig(
        k=args.target_tokens,
        sigma=args.sigma,
        m=args.chunk_size,
        norm_mode=args.norm_mode,
        ordering_mode=args.order_mode,
    )


def _inputs(args, weights):
    """(docs, prompts, answers, needle offsets) from files or a synthetic corpus."""
    if args.doc:
        docs = read_token_file(args.doc)
        if not args.prompt:
            raise SystemExit("--prompt is required with --doc")
        prompts = read_token_file(args.prompt)
        if len(prompts) == 1:
            prompts = prompts * len(docs)
        if len(prompts) != len(docs):
            raise SystemExit("prompt file must hold one line or one line per document")
        answers = read_token_file(args.answer) if getattr(args, "answer", None) else [None] * len(docs)
        return docs, prompts, answers, [None] * len(docs)
    corpus = make_needle_corpus(NeedleSpec(args.n_cont, args.offset, args.seed), weights.config)
    return [corpus.doc], [corpus.prompt], [corpus.answer], [corpus.needle_offsets]


def _write_or_print(report: ExperimentReport, path) -> None:
    if path:
        report.write(path)
    else:
        sys.stdout.write(report.to_csv())


def cmd_run(args) -> int:
    weights = _weights(args)
    comp = _compression(args)
    cfg = RunConfig(args.mode, comp, args.max_new_tokens, args.seed)
    docs, prompts, answers, needles = _inputs(args, weights)
    report = ExperimentReport()
    for i, (doc, prompt, answer, needle) in enumerate(zip(docs, prompts, answers, needles)):
        result, pre = run(weights, doc, prompt, cfg, trace=args.trace)
        dist = answer_distance(result.tokens, answer) if answer is not None else {"exact_match": None, "token_f1": None}
        report.rows.append(
            dict(
                schema_version=SCHEMA_VERSION,
                mode=result.mode,
                k=result.k,
                sigma=result.sigma,
                m=comp.m if args.mode == "finch" else None,
                norm_mode=comp.norm_mode,
                ordering_mode=comp.ordering_mode,
                needle_offset=args.offset if needle is not None else None,
                seed=args.seed,
                em=dist["exact_match"],
                f1=dist["token_f1"],
                needle_retention=needle_retention(result.retained, needle) if needle is not None else None,
                prefill_ops=result.prefill_ops,
                generation_ops=result.generation_ops,
                cache_length=result.cache_length,
                cache_bytes=result.cache_bytes,
                prefill_ms=result.prefill_ms,
                generation_ms=result.generation_ms,
                status="ok",
            )
        )
        log.info("doc %d -> %s", i, result.tokens)
        if args.trace and pre.trace:
            trace_path = (args.csv_out or Path("finch")).with_suffix(f".trace{i}.csv")
            write_trace_csv(pre.trace, trace_path)
        if args.dump_cache:
            save_cache(pre.cache, args.dump_cache if len(docs) == 1 else args.dump_cache.with_suffix(f".{i}.kvc"))
    _write_or_print(report, args.csv_out)
    return 0


def cmd_sweep(args) -> int:
    weights = _weights(args)
    grid = SweepGrid(
        modes=tuple(args.modes.split(",")),
        sigmas=args.sigmas,
        chunk_sizes=args.chunk_sizes or (args.chunk_size,),
        offsets=args.offsets,
        seeds=args.seeds,
        n_cont=args.n_cont,
        max_new_tokens=args.max_new_tokens,
        norm_mode=args.norm_mode,
        ordering_mode=args.order_mode,
    )
    report = run_sweep(weights, grid, args.csv_out, workers=args.workers, timing=not args.no_timing)
    if not args.csv_out:
        sys.stdout.write(report.to_csv())
    for row in report.failed:
        log.error("failed cell: %s", row)
    return 1 if report.failed else 0


def cmd_needle(args) -> int:
    weights = _weights(args)
    comp = _compression(args)
    study = needle_study(
        weights,
        offsets=args.offsets,
        seeds=range(args.seed, args.seed + args.seeds),
        sigma=comp.ratio(args.n_cont),
        n_cont=args.n_cont,
        m=comp.m,
        a_reserve=args.max_new_tokens,
        norm_mode=comp.norm_mode,
        ordering_mode=comp.ordering_mode,
    )
    out = open(args.csv_out, "w", newline="") if args.csv_out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["offset", "finch_mean_retention", "finch_pass_rate", "truncate_mean_retention"])
        for off, fin, tru, rate in zip(study.offsets, study.finch, study.truncate, study.pass_rate()):
            w.writerow([off, f"{fin.mean():.6g}", f"{rate:.6g}", f"{tru.mean():.6g}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_oracle_check(args) -> int:
    n, problems = oracle_check(args.instances, args.seed)
    for p in problems[:20]:
        print(p)
    print(f"oracle-check: {n} instances, {len(problems)} mismatches")
    return 1 if problems else 0


def cmd_heatmap(args) -> int:
    weights = _weights(args)
    comp = _compression(args)
    docs, prompts, _, _ = _inputs(args, weights)
    pre = prefill_finch(weights, docs[0], prompts[0], comp, a_reserve=args.max_new_tokens, trace=True)
    layer = args.layer % weights.config.n_layers
    out = args.csv_out or Path(f"heatmap_layer{layer}.csv")
    mats = emit_heatmap(pre.trace, layer, out)
    print(f"wrote {len(mats)} matrices for layer {layer} to {out}: shapes {[m.shape for m in mats]}")
    return 0


def cmd_bench(args) -> int:
    res = measure_prefill_scaling(args.n_cont, m=args.chunk_size, k=args.target_tokens, reps=args.reps, seed=args.seed)
    rows = [["mode", "n_cont", "median_ms", "attn_macs"]]
    for mode in ("finch", "vanilla"):
        for n, s, macs in zip(res.n_cont, res.seconds[mode], res.macs[mode]):
            rows.append([mode, n, f"{s * 1e3:.3f}", macs])
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    else:
        csv.writer(sys.stdout).writerows(rows)
    for mode in ("finch", "vanilla"):
        print(f"# {mode}: time slope {res.slope(mode):.3f}, attention-MAC slope {res.slope(mode, 'macs'):.3f}", file=sys.stderr)
    return 0


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "needle": cmd_needle,
    "oracle-check": cmd_oracle_check,
    "heatmap": cmd_heatmap,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
