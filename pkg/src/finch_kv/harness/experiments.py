"""Sweeps, needle studies, oracle cross-checks and prefill scaling benchmarks."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..compressor import CompressionConfig, PrefillState, compress_step, segment_document
from ..kv_cache import KvCache
from ..model import ModelConfig, Weights, build_model
from ..pipeline import RunConfig, answer_distance, prefill_finch, prefill_vanilla, run, truncate_offsets
from .corpus import NeedleSpec, make_needle_corpus
from .oracle import oracle_selection

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
COLUMNS = [
    "schema_version",
    "mode",
    "k",
    "sigma",
    "m",
    "norm_mode",
    "ordering_mode",
    "needle_offset",
    "seed",
    "em",
    "f1",
    "needle_retention",
    "prefill_ops",
    "generation_ops",
    "cache_length",
    "cache_bytes",
    "prefill_ms",
    "generation_ms",
    "status",
]


@dataclass
class ExperimentReport:
    rows: list[dict] = field(default_factory=list)

    def sorted_rows(self) -> list[dict]:
        def key(row):
            return (str(row["mode"]), float(row["needle_offset"] or 0), int(row["seed"] or 0), float(row["sigma"] or 0), int(row["m"] or 0))

        return sorted(self.rows, key=key)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COLUMNS)  # csv module writes RFC 4180 CRLF rows
        writer.writeheader()
        for row in self.sorted_rows():
            writer.writerow({c: _fmt(row.get(c, "")) for c in COLUMNS})
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), newline="")

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.rows if r.get("status") != "ok"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def needle_retention(retained: list[np.ndarray], needle_offsets) -> float:
    """Share of needle offsets present in the cache, averaged over layers."""
    return float(np.mean([np.isin(needle_offsets, r).mean() for r in retained]))


@dataclass(frozen=True)
class SweepGrid:
    modes: tuple[str, ...] = ("vanilla", "finch")
    sigmas: tuple[float, ...] = (2, 4, 8)
    chunk_sizes: tuple[int, ...] = (64,)
    offsets: tuple[float, ...] = (0.0, 0.5, 1.0)
    seeds: tuple[int, ...] = (0,)
    n_cont: int = 256
    max_new_tokens: int = 4
    norm_mode: str = "column-mean"
    ordering_mode: str = "ranking"

    def cells(self) -> list[dict]:
        out = []
        for offset, seed, mode in itertools.product(self.offsets, self.seeds, self.modes):
            if mode == "vanilla":
                out.append(dict(mode=mode, offset=offset, seed=seed, sigma=None, m=None))
            elif mode == "truncate":
                out += [dict(mode=mode, offset=offset, seed=seed, sigma=s, m=None) for s in self.sigmas]
            else:
                out += [
                    dict(mode=mode, offset=offset, seed=seed, sigma=s, m=m)
                    for s, m in itertools.product(self.sigmas, self.chunk_sizes)
                ]
        return out


def run_cell(weights: Weights, grid: SweepGrid, cell: dict, timing: bool = True) -> dict:
    row = dict(
        schema_version=SCHEMA_VERSION,
        mode=cell["mode"],
        needle_offset=cell["offset"],
        seed=cell["seed"],
        m=cell["m"],
        sigma=cell["sigma"],
        norm_mode=grid.norm_mode,
        ordering_mode=grid.ordering_mode,
    )
    try:
        corpus = make_needle_corpus(NeedleSpec(grid.n_cont, cell["offset"], cell["seed"]), weights.config)
        comp = CompressionConfig(
            sigma=cell["sigma"] or 1,
            m=cell["m"] or grid.n_cont,
            norm_mode=grid.norm_mode,
            ordering_mode=grid.ordering_mode,
        )
        result, _ = run(weights, corpus.doc, corpus.prompt, RunConfig(cell["mode"], comp, grid.max_new_tokens, cell["seed"]))
        dist = answer_distance(result.tokens, corpus.answer)
        row.update(
            k=result.k,
            sigma=result.sigma,
            em=dist["exact_match"],
            f1=dist["token_f1"],
            needle_retention=needle_retention(result.retained, corpus.needle_offsets),
            prefill_ops=result.prefill_ops,
            generation_ops=result.generation_ops,
            cache_length=result.cache_length,
            cache_bytes=result.cache_bytes,
            prefill_ms=result.prefill_ms if timing else None,
            generation_ms=result.generation_ms if timing else None,
            status="ok",
        )
    except Exception as exc:  # a failing cell is reported, the sweep goes on
        log.warning("cell %s failed: %s", cell, exc)
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    return row


def run_sweep(weights: Weights, grid: SweepGrid, out_path=None, workers: int = 1, timing: bool = True) -> ExperimentReport:
    cells = grid.cells()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda c: run_cell(weights, grid, c, timing), cells))
    else:
        rows = [run_cell(weights, grid, c, timing) for c in cells]
    report = ExperimentReport(rows)
    if out_path is not None:
        try:
            report.write(out_path)
        except OSError as exc:
            log.error("could not write %s: %s", out_path, exc)
            report.rows.append({"mode": "report", "status": f"error: {exc}", "needle_offset": 0, "seed": 0, "sigma": 0, "m": 0})
    return report


@dataclass
class NeedleStudy:
    offsets: list[float]
    finch: np.ndarray  # (len(offsets), n_seeds) retention fractions
    truncate: np.ndarray

    def pass_rate(self, threshold: float = 0.9) -> np.ndarray:
        return (self.finch >= threshold).mean(axis=1)


def needle_study(
    weights: Weights,
    offsets=(0.0, 0.25, 0.5, 0.75, 1.0),
    seeds=range(100),
    sigma: float = 4,
    n_cont: int = 512,
    m: int = 128,
    a_reserve: int = 8,
    norm_mode: str = "column-mean",
    ordering_mode: str = "ranking",
) -> NeedleStudy:
    """Retained share of needle offsets for finch and truncate at matched k."""
    seeds = list(seeds)
    comp = CompressionConfig(sigma=sigma, m=m, norm_mode=norm_mode, ordering_mode=ordering_mode)
    fin = np.zeros((len(offsets), len(seeds)))
    tru = np.zeros_like(fin)
    for i, off in enumerate(offsets):
        for j, seed in enumerate(seeds):
            corpus = make_needle_corpus(NeedleSpec(n_cont, off, seed), weights.config)
            pre = prefill_finch(weights, corpus.doc, corpus.prompt, comp, a_reserve=a_reserve)
            fin[i, j] = needle_retention(pre.cache.provenance, corpus.needle_offsets)
            kept = truncate_offsets(n_cont, comp.target_tokens(n_cont))
            tru[i, j] = needle_retention([kept], corpus.needle_offsets)
    return NeedleStudy(list(offsets), fin, tru)


@dataclass
class OracleCase:
    seed: int
    config: ModelConfig
    compression: CompressionConfig
    n_cont: int
    n_que: int


def random_case(seed: int) -> OracleCase:
    rng = np.random.default_rng(seed)
    H = int(rng.choice([1, 2, 4]))
    d_head = int(rng.choice([4, 8]))
    cfg = ModelConfig(n_layers=int(rng.integers(1, 4)), n_heads=H, d_model=H * d_head, vocab=32, n_max=96)
    n_cont = int(rng.integers(4, 40))
    k = int(rng.integers(1, n_cont + 1))
    m = int(rng.integers(1, 17))
    comp = CompressionConfig(
        k=k,
        m=m,
        norm_mode=str(rng.choice(["column-mean", "literal", "none"])),
        ordering_mode=str(rng.choice(["ranking", "positional"])),
    )
    return OracleCase(seed, cfg, comp, n_cont, int(rng.integers(1, 6)))


def oracle_check_case(case: OracleCase) -> list[str]:
    """Run one prefill step by step; return a description of every mismatch."""
    weights = build_model(case.config, case.seed)
    rng = np.random.default_rng(case.seed + 7919)
    doc = rng.integers(1, case.config.vocab, case.n_cont)
    prompt = rng.integers(1, case.config.vocab, case.n_que)
    comp = case.compression
    chunks = segment_document(doc, comp, prompt.size, 0, case.config.n_max)
    state = PrefillState(chunks_remaining=len(chunks), k=comp.target_tokens(doc.size), sigma=comp.ratio(doc.size))
    cache = KvCache.for_model(case.config)
    offset, problems = 0, []
    for chunk in chunks:
        new_cache, new_state, sel = compress_step(weights, cache, chunk, prompt, state, comp, doc_offset=offset)
        expect = oracle_selection(weights, cache, chunk, prompt, comp, new_state.r)
        for li, (got, want) in enumerate(zip(sel.indices, expect.indices)):
            if not np.array_equal(got, want):
                problems.append(f"seed={case.seed} it={state.it} layer={li}: {got.tolist()} != {want.tolist()}")
        cache, state = new_cache, new_state
        offset += chunk.size
    return problems


def oracle_check(n: int = 1000, start_seed: int = 0) -> tuple[int, list[str]]:
    problems: list[str] = []
    for seed in range(start_seed, start_seed + n):
        problems += oracle_check_case(random_case(seed))
    return n, problems


def write_trace_csv(trace, path) -> None:
    if not trace:
        raise ValueError("no trace captured; run with tracing enabled")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "layer", "rank", "index", "provenance", "score"])
        for rec in trace:
            for rank, (idx, prov) in enumerate(zip(rec.selected.tolist(), rec.provenance.tolist())):
                w.writerow([rec.iteration, rec.layer, rank, idx, prov, f"{rec.scores[idx]:.9g}"])


def emit_heatmap(trace, layer: int, out_path) -> list[np.ndarray]:
    """Prompt-row attention over cache+chunk columns, one block per iteration.

    Written in long form (``iteration,prompt_row,column,score``); returns the
    per-iteration matrices.
    """
    if not trace:
        raise ValueError("no trace captured; run with tracing enabled")
    recs = [r for r in trace if r.layer == layer]
    if not recs:
        raise ValueError(f"trace has no records for layer {layer}")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "prompt_row", "column", "score"])
        for rec in recs:
            for p, row in enumerate(rec.a_cont.tolist()):
                for j, val in enumerate(row):
                    w.writerow([rec.iteration, p, j, f"{val:.9g}"])
    return [r.a_cont for r in recs]


@dataclass
class ScalingResult:
    n_cont: list[int]
    seconds: dict[str, list[float]]
    macs: dict[str, list[int]]

    def slope(self, mode: str, metric: str = "seconds") -> float:
        ys = getattr(self, metric)[mode]
        return float(np.polyfit(np.log(self.n_cont), np.log(ys), 1)[0])


def measure_prefill_scaling(
    n_conts=(256, 512, 1024, 2048),
    m: int = 64,
    k: int = 64,
    n_que: int = 4,
    reps: int = 5,
    seed: int = 0,
) -> ScalingResult:
    """Median prefill wall time and attention multiply-adds for finch and vanilla.

    Finch keeps ``m`` and ``k`` fixed so its per-step window is constant; the
    model's context window is sized to fit the largest vanilla input.
    """
    cfg = ModelConfig(n_max=max(n_conts) + n_que)
    weights = build_model(cfg, seed)
    rng = np.random.default_rng(seed)
    prompt = np.asarray(cfg.rare_ids)[:n_que]
    comp = CompressionConfig(k=k, m=m)
    seconds = {"finch": [], "vanilla": []}
    macs = {"finch": [], "vanilla": []}
    for n in n_conts:
        doc = rng.integers(1, cfg.rare_ids.start, n)
        for mode in ("finch", "vanilla"):
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                pre = prefill_finch(weights, doc, prompt, comp) if mode == "finch" else prefill_vanilla(weights, doc, prompt)
                times.append(time.perf_counter() - t0)
            seconds[mode].append(float(np.median(times)))
            macs[mode].append(pre.attn_macs)
    return ScalingResult(list(n_conts), seconds, macs)
