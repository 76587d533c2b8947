"""End-to-end runs: prefill (finch / vanilla / truncate), greedy decoding, scoring."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .compressor import CompressionConfig, PrefillState, compress_step, segment_document
from .kv_cache import KvCache, append, memory_bytes, rows_from_forward
from .model import EOS_ID, CapacityError, Weights, forward_chunk
from .tensor_core import ParameterError

MODES = ("finch", "vanilla", "truncate")


@dataclass
class PrefillResult:
    cache: KvCache
    ops: int
    logits: np.ndarray | None = None  # next-token logits when the prompt is already cached
    cache_history: list[int] = field(default_factory=list)
    trace: list | None = None
    attn_macs: int = 0


@dataclass
class Generation:
    tokens: list[int]
    steps: int
    cache: KvCache
    start_length: int


@dataclass(frozen=True)
class RunConfig:
    mode: str = "finch"
    compression: CompressionConfig = field(default_factory=lambda: CompressionConfig(sigma=4))
    max_new_tokens: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if self.max_new_tokens < 1:
            raise ParameterError("max_new_tokens must be >= 1")


@dataclass
class RunResult:
    mode: str
    tokens: list[int]
    prefill_ops: int
    generation_ops: int
    cache_length: int
    cache_bytes: int
    prefill_ms: float
    generation_ms: float
    k: int
    sigma: float
    retained: list[np.ndarray]  # per-layer document offsets in the cache at generation start


def _ids(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).ravel()


def prefill_finch(
    weights: Weights,
    doc,
    prompt,
    config: CompressionConfig,
    a_reserve: int = 0,
    trace: bool = False,
    track_shadow: bool = False,
) -> PrefillResult:
    """Compress ``doc`` chunk by chunk under ``prompt`` down to ``k`` rows.

    The prompt is re-fed with every chunk but never cached.
    """
    doc, prompt = _ids(doc), _ids(prompt)
    cfg = weights.config
    chunks = segment_document(doc, config, prompt.size, a_reserve, cfg.n_max)
    state = PrefillState(
        chunks_remaining=len(chunks),
        k=config.target_tokens(doc.size),
        sigma=config.ratio(doc.size),
    )
    cache = KvCache.for_model(cfg, track_shadow=track_shadow)
    records: list | None = [] if trace else None
    offset = 0
    for chunk in chunks:
        cache, state, _ = compress_step(weights, cache, chunk, prompt, state, config, doc_offset=offset, trace=records)
        offset += chunk.size
    return PrefillResult(cache=cache, ops=len(chunks), cache_history=state.history, trace=records, attn_macs=state.attn_macs)


def _prefill_full(weights: Weights, tokens: np.ndarray, provenance: np.ndarray, a_reserve: int, track_shadow: bool) -> PrefillResult:
    cfg = weights.config
    if tokens.size + a_reserve > cfg.n_max:
        raise CapacityError(f"input of {tokens.size} tokens (+{a_reserve} reserved) exceeds n_max={cfg.n_max}")
    cache = KvCache.for_model(cfg, track_shadow=track_shadow)
    out = forward_chunk(weights, tokens, np.arange(tokens.size), cache, keep_scores=False)
    cache = append(cache, rows_from_forward(out, slice(None), cache, provenance))
    return PrefillResult(cache=cache, ops=1, logits=out.logits[-1], cache_history=[cache.length], attn_macs=out.attn_macs)


def prefill_vanilla(weights: Weights, doc, prompt, a_reserve: int = 0, track_shadow: bool = False) -> PrefillResult:
    """One pass over ``[doc ++ prompt]``; every row is cached."""
    doc, prompt = _ids(doc), _ids(prompt)
    prov = np.concatenate([np.arange(doc.size), np.full(prompt.size, -1)])
    return _prefill_full(weights, np.concatenate([doc, prompt]), prov, a_reserve, track_shadow)


def truncate_offsets(n_cont: int, k: int) -> np.ndarray:
    """Head ``ceil(k/2)`` and tail ``floor(k/2)`` document offsets."""
    if k >= n_cont:
        return np.arange(n_cont)
    head = (k + 1) // 2
    tail = k // 2
    return np.concatenate([np.arange(head), np.arange(n_cont - tail, n_cont)]).astype(np.int64)


def prefill_truncate(weights: Weights, doc, prompt, k: int, a_reserve: int = 0) -> PrefillResult:
    doc, prompt = _ids(doc), _ids(prompt)
    keep = truncate_offsets(doc.size, k)
    prov = np.concatenate([keep, np.full(prompt.size, -1)])
    return _prefill_full(weights, np.concatenate([doc[keep], prompt]), prov, a_reserve, False)


def generate(
    weights: Weights,
    cache: KvCache,
    prompt_tail,
    max_new_tokens: int,
    logits: np.ndarray | None = None,
    eos_id: int = EOS_ID,
) -> Generation:
    """Greedy decoding from ``cache``.

    ``prompt_tail`` holds input tokens not yet in the cache; it is fed in one
    pass first. With an empty tail, ``logits`` must carry the next-token
    distribution. Every emitted token is then fed back, so each step grows
    the cache by exactly one row.
    """
    tail = _ids(prompt_tail)
    start = cache.length
    cfg = weights.config
    if start + tail.size + max_new_tokens > cfg.n_max:
        raise CapacityError(f"cache {start} + tail {tail.size} + {max_new_tokens} new tokens exceeds n_max={cfg.n_max}")
    if max_new_tokens <= 0:
        return Generation([], 0, cache, start)
    pos = cache.max_position() + 1
    if tail.size:
        out = forward_chunk(weights, tail, np.arange(pos, pos + tail.size), cache, keep_scores=False)
        cache = append(cache, rows_from_forward(out, slice(None), cache))
        logits = out.logits[-1]
        pos += tail.size
    elif logits is None:
        raise ParameterError("need prompt_tail tokens or next-token logits")
    tokens: list[int] = []
    steps = 0
    while len(tokens) < max_new_tokens:
        tok = int(np.argmax(logits))
        tokens.append(tok)
        out = forward_chunk(weights, [tok], [pos], cache, keep_scores=False)
        cache = append(cache, rows_from_forward(out, slice(None), cache))
        logits = out.logits[-1]
        pos += 1
        steps += 1
        if tok == eos_id:
            break
    return Generation(tokens, steps, cache, start)


def answer_distance(y_hat, y_ref) -> dict:
    """Exact match and token-multiset F1 between two token sequences."""
    y_hat, y_ref = [int(t) for t in y_hat], [int(t) for t in y_ref]
    em = int(y_hat == y_ref)
    if not y_hat and not y_ref:
        return {"exact_match": em, "token_f1": 1.0}
    if not y_hat or not y_ref:
        return {"exact_match": em, "token_f1": 0.0}
    common = sum((Counter(y_hat) & Counter(y_ref)).values())
    if common == 0:
        return {"exact_match": em, "token_f1": 0.0}
    precision = common / len(y_hat)
    recall = common / len(y_ref)
    return {"exact_match": em, "token_f1": 2 * precision * recall / (precision + recall)}


def run(weights: Weights, doc, prompt, config: RunConfig, trace: bool = False) -> tuple[RunResult, PrefillResult]:
    doc, prompt = _ids(doc), _ids(prompt)
    comp = config.compression
    a = config.max_new_tokens
    k = doc.size if config.mode == "vanilla" else comp.target_tokens(doc.size)

    t0 = time.perf_counter()
    if config.mode == "finch":
        pre = prefill_finch(weights, doc, prompt, comp, a_reserve=a, trace=trace)
        tail, logits = prompt, None
    elif config.mode == "vanilla":
        pre = prefill_vanilla(weights, doc, prompt, a_reserve=a)
        tail, logits = [], pre.logits
    else:
        pre = prefill_truncate(weights, doc, prompt, k, a_reserve=a)
        tail, logits = [], pre.logits
    t1 = time.perf_counter()
    gen = generate(weights, pre.cache, tail, a, logits=logits)
    t2 = time.perf_counter()

    cache = pre.cache
    retained = [p[p >= 0] for p in cache.provenance]
    result = RunResult(
        mode=config.mode,
        tokens=gen.tokens,
        prefill_ops=pre.ops,
        generation_ops=gen.steps,
        cache_length=cache.length,
        cache_bytes=memory_bytes(cache),
        prefill_ms=(t1 - t0) * 1e3,
        generation_ms=(t2 - t1) * 1e3,
        k=k,
        sigma=doc.size / k,
        retained=retained,
    )
    return result, pre
