"""Prompt-guided chunked KV-cache compression.

Each prefill step runs ``[chunk ++ prompt]`` against the current cache,
scores every cache/chunk key by how much the prompt attends to it, and keeps
the top ``r`` rows per layer. The budget ``r`` grows by ``m / sigma`` per
chunk and lands on ``k`` after the last one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .kv_cache import ORDERING_MODES, KvCache, SelectionResult, rows_from_forward, select_and_reposition
from .model import Weights, forward_chunk
from .tensor_core import ParameterError, ShapeError, top_r_indices

NORM_MODES = ("column-mean", "literal", "none")
ROUNDING = ("floor", "nearest", "ceil")


@dataclass(frozen=True)
class CompressionConfig:
    """Give exactly one of ``k`` (target tokens) or ``sigma`` (ratio)."""

    k: int | None = None
    sigma: float | Fraction | None = None
    m: int = 128
    norm_mode: str = "column-mean"
    ordering_mode: str = "ranking"
    rounding: str = "floor"

    def __post_init__(self):
        if (self.k is None) == (self.sigma is None):
            raise ParameterError("give exactly one of k or sigma")
        if self.k is not None and self.k < 1:
            raise ParameterError("k must be >= 1")
        if self.sigma is not None and self.sigma < 1:
            raise ParameterError("sigma must be >= 1")
        if self.m < 1:
            raise ParameterError("chunk size m must be >= 1")
        if self.norm_mode not in NORM_MODES:
            raise ParameterError(f"norm_mode must be one of {NORM_MODES}")
        if self.ordering_mode not in ORDERING_MODES:
            raise ParameterError(f"ordering_mode must be one of {ORDERING_MODES}")
        if self.rounding not in ROUNDING:
            raise ParameterError(f"rounding must be one of {ROUNDING}")

    def target_tokens(self, n_cont: int) -> int:
        if n_cont < 1:
            raise ParameterError("document must hold at least one token")
        if self.k is not None:
            if self.k > n_cont:
                raise ParameterError(f"k={self.k} exceeds document length {n_cont}")
            return int(self.k)
        return max(1, math.floor(Fraction(n_cont) / Fraction(self.sigma)))

    def ratio(self, n_cont: int) -> Fraction:
        """Effective sigma = n_cont / k (exact)."""
        return Fraction(n_cont, self.target_tokens(n_cont))

    def max_chunk(self, n_max: int, n_cont: int, n_que: int, a_reserve: int) -> int:
        return n_max - self.target_tokens(n_cont) - n_que - a_reserve


@dataclass
class PrefillState:
    it: int = 0
    c: int = 0
    r: int = 0
    chunks_remaining: int = 0
    k: int = 0
    sigma: Fraction = Fraction(1)
    consumed: int = 0  # document tokens processed so far
    attn_macs: int = 0
    history: list[int] = field(default_factory=list)


def segment_document(doc, config: CompressionConfig, n_que: int, a_reserve: int, n_max: int) -> list[np.ndarray]:
    """Split ``doc`` into consecutive chunks of ``config.m`` tokens."""
    doc = np.asarray(doc, dtype=np.int64).ravel()
    if doc.size == 0:
        raise ParameterError("empty document")
    m_max = config.max_chunk(n_max, doc.size, n_que, a_reserve)
    if config.m > m_max:
        raise ParameterError(f"chunk size m={config.m} exceeds m_max={m_max}")
    return [doc[i:i + config.m] for i in range(0, doc.size, config.m)]


def sum_heads(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3:
        raise ShapeError("expected an (H, M, N) score slice")
    return scores.sum(axis=0)


def extract_prompt_submatrix(a_sum: np.ndarray, m: int, n_que: int, c: int) -> np.ndarray:
    """Prompt-query rows against cache+chunk key columns."""
    a_sum = np.asarray(a_sum)
    if a_sum.shape != (m + n_que, m + n_que + c):
        raise ShapeError(f"expected ({m + n_que}, {m + n_que + c}), got {a_sum.shape}")
    return a_sum[m:m + n_que, :m + c]


def attend_counts(m: int, n_que: int, c: int) -> np.ndarray:
    """How many window queries (chunk + prompt) can see each cache/chunk key."""
    M = m + n_que
    return np.concatenate([np.full(c, M), M - np.arange(m)]).astype(np.int64)


def normalize_scores(a_cont: np.ndarray, counts, norm_mode: str = "column-mean") -> np.ndarray:
    a_cont = np.asarray(a_cont, dtype=np.float64)
    if norm_mode == "none":
        return a_cont
    if norm_mode == "literal":
        return a_cont * (np.count_nonzero(a_cont) / a_cont.shape[1])
    if norm_mode != "column-mean":
        raise ParameterError(f"unknown norm_mode {norm_mode!r}")
    counts = np.asarray(counts)
    if counts.shape != (a_cont.shape[1],):
        raise ShapeError("one count per column required")
    if np.any(counts < 1):
        raise ParameterError("attend counts must be >= 1")
    return a_cont / counts


def aggregate(a_norm: np.ndarray) -> np.ndarray:
    return np.asarray(a_norm, dtype=np.float64).sum(axis=0)


def r_schedule(state: PrefillState, next_chunk_len: int, sigma, rounding: str = "floor", k: int | None = None) -> int:
    """Budget after consuming the next chunk: ``round(m/sigma) + c``.

    On the final chunk (``state.chunks_remaining == 1``) the budget is
    ``k`` so the compressed cache ends at exactly the target size. With
    ``k`` given the budget also stays within ``k`` and never drops below what
    the rest of the document (``k * sigma - consumed``) can top up. The
    result never exceeds ``next_chunk_len + c``.
    """
    sigma = Fraction(sigma)
    if sigma < 1:
        raise ParameterError("sigma must be >= 1")
    step = Fraction(next_chunk_len) / sigma
    if rounding == "floor":
        grow = math.floor(step)
    elif rounding == "ceil":
        grow = math.ceil(step)
    elif rounding == "nearest":
        grow = math.floor(step + Fraction(1, 2))
    else:
        raise ParameterError(f"unknown rounding {rounding!r}")
    r = grow + state.c
    if k is not None:
        if state.chunks_remaining == 1:
            r = k
        total = k * sigma
        if total.denominator == 1:
            # keep enough rows that the remaining chunks can still fill k
            r = max(r, k - (int(total) - state.consumed - next_chunk_len))
        r = min(r, k)
    return min(r, next_chunk_len + state.c)


def select_layer(scores: np.ndarray, m: int, n_que: int, c: int, r: int, norm_mode: str):
    """Score one layer's ``(H, M, N)`` attention and pick its top ``r`` columns.

    Returns ``(indices, aggregated_scores, prompt_submatrix)``.
    """
    a_cont = extract_prompt_submatrix(sum_heads(scores), m, n_que, c)
    agg = aggregate(normalize_scores(a_cont, attend_counts(m, n_que, c), norm_mode))
    return top_r_indices(agg, r), agg, a_cont


@dataclass
class TraceRecord:
    iteration: int
    layer: int
    c: int
    m: int
    selected: np.ndarray
    provenance: np.ndarray
    scores: np.ndarray  # aggregated score of every cache/chunk column
    a_cont: np.ndarray  # (n_que, m + c) summed-head prompt attention


def compress_step(
    weights: Weights,
    cache: KvCache,
    chunk,
    prompt,
    state: PrefillState,
    config: CompressionConfig,
    doc_offset: int = 0,
    trace: list | None = None,
) -> tuple[KvCache, PrefillState, SelectionResult]:
    """Process one chunk; returns the compressed cache, next state and the selection."""
    chunk = np.asarray(chunk, dtype=np.int64).ravel()
    prompt = np.asarray(prompt, dtype=np.int64).ravel()
    m, n_que, c = chunk.size, prompt.size, cache.length
    positions = np.arange(c, c + m + n_que)
    out = forward_chunk(weights, np.concatenate([chunk, prompt]), positions, cache)
    r = r_schedule(state, m, state.sigma, config.rounding, k=state.k)

    fresh = rows_from_forward(out, slice(0, m), cache, provenance=np.arange(doc_offset, doc_offset + m))
    picks, agg_all = [], []
    for li, layer_scores in enumerate(out.scores):
        idx, agg, a_cont = select_layer(layer_scores, m, n_que, c, r, config.norm_mode)
        picks.append(idx)
        agg_all.append(agg[idx])
        if trace is not None:
            prov = np.concatenate([cache.provenance[li], fresh.provenance[li]])[idx]
            trace.append(TraceRecord(state.it, li, c, m, idx, prov, agg, a_cont))
    selection = SelectionResult(picks, agg_all)
    new_cache = select_and_reposition(cache, fresh, selection, config.ordering_mode)
    new_state = replace(
        state,
        it=state.it + 1,
        c=new_cache.length,
        r=r,
        chunks_remaining=state.chunks_remaining - 1,
        consumed=state.consumed + m,
        attn_macs=state.attn_macs + out.attn_macs,
        history=state.history + [new_cache.length],
    )
    return new_cache, new_state, selection
