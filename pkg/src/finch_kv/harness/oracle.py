"""Brute-force re-derivation of the per-layer token selection.

Deliberately shares no code with ``finch_kv.compressor``: scores are pulled
into Python lists and every reduction is an explicit loop, so a bug in the
vectorised path cannot hide behind the same bug here.
"""

from __future__ import annotations

import numpy as np

from ..kv_cache import SelectionResult
from ..model import Weights, forward_chunk


def _visible_rows(j: int, M: int, c: int) -> int:
    # window row i sits at slot c + i and sees every slot <= its own
    return sum(1 for i in range(M) if j <= c + i)


def oracle_layer(scores, m: int, n_que: int, c: int, r: int, norm_mode: str) -> list[int]:
    """Selection for one layer from an ``(H, M, N)`` score array."""
    A = np.asarray(scores).tolist()
    H = len(A)
    M = m + n_que
    width = m + c
    block = [[sum(A[h][m + p][j] for h in range(H)) for j in range(width)] for p in range(n_que)]
    if norm_mode == "column-mean":
        agg = []
        for j in range(width):
            total = 0.0
            for p in range(n_que):
                total += block[p][j]
            agg.append(total / _visible_rows(j, M, c))
    elif norm_mode == "literal":
        nonzero = 0
        for row in block:
            for val in row:
                if val != 0.0:
                    nonzero += 1
        factor = nonzero / width
        agg = [sum(block[p][j] for p in range(n_que)) * factor for j in range(width)]
    elif norm_mode == "none":
        agg = [sum(block[p][j] for p in range(n_que)) for j in range(width)]
    else:
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    ranked = sorted(range(width), key=lambda j: (-agg[j], j))
    return ranked[:r]


def oracle_selection(weights: Weights, cache, chunk, prompt, config, r: int) -> SelectionResult:
    """Per-layer selection that ``compress_step`` should make with budget ``r``."""
    chunk = [int(t) for t in np.asarray(chunk).ravel()]
    prompt = [int(t) for t in np.asarray(prompt).ravel()]
    m, n_que, c = len(chunk), len(prompt), cache.length
    out = forward_chunk(weights, chunk + prompt, list(range(c, c + m + n_que)), cache)
    picks = [np.array(oracle_layer(s, m, n_que, c, r, config.norm_mode), dtype=np.int64) for s in out.scores]
    return SelectionResult(picks)
