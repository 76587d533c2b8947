"""Synthetic needle-in-a-haystack corpora and token-file I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..model import ModelConfig
from ..tensor_core import ParameterError, Rng

ZIPF_EXPONENT = 1.1


@dataclass(frozen=True)
class NeedleSpec:
    n_cont: int = 512
    offset: float = 0.5
    seed: int = 0
    needle_len: int = 4
    needle: tuple[int, ...] | None = None  # explicit pattern; drawn from the rare band when None

    def start(self) -> int:
        """Document index of the first needle token."""
        if not 0.0 <= self.offset <= 1.0:
            raise ParameterError("offset must lie in [0, 1]")
        return int(round(self.offset * (self.n_cont - self.length)))

    @property
    def length(self) -> int:
        return len(self.needle) if self.needle is not None else self.needle_len


@dataclass
class NeedleCorpus:
    doc: np.ndarray
    prompt: np.ndarray
    answer: np.ndarray
    needle_offsets: np.ndarray


def filler_probs(config: ModelConfig) -> np.ndarray:
    ranks = np.arange(1, len(config.filler_ids) + 1, dtype=np.float64)
    p = ranks**-ZIPF_EXPONENT
    return p / p.sum()


def make_needle_corpus(spec: NeedleSpec, config: ModelConfig) -> NeedleCorpus:
    """Zipf filler with a rare-token needle spliced in at ``spec.offset``.

    The needle's first half is its key, the second half the payload; the
    prompt is the key, the reference answer the payload.
    """
    n = spec.length
    if n < 2:
        raise ParameterError("needle needs at least two tokens")
    if n >= spec.n_cont:
        raise ParameterError(f"needle of {n} tokens does not fit a {spec.n_cont}-token document")
    rng = Rng(spec.seed)
    filler = np.asarray(config.filler_ids)
    doc = filler[rng.choice(len(filler), spec.n_cont, p=filler_probs(config))].astype(np.int64)
    if spec.needle is None:
        rare = np.asarray(config.rare_ids)
        needle = rare[rng.choice(len(rare), n, replace=False)].astype(np.int64)
    else:
        needle = np.asarray(spec.needle, dtype=np.int64)
    start = spec.start()
    doc[start:start + n] = needle
    half = n // 2
    return NeedleCorpus(
        doc=doc,
        prompt=needle[:half].copy(),
        answer=needle[half:].copy(),
        needle_offsets=np.arange(start, start + n),
    )


def read_token_file(path) -> list[np.ndarray]:
    """One sequence per non-blank line, whitespace-separated integer ids."""
    seqs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            seqs.append(np.array([int(t) for t in line.split()], dtype=np.int64))
        except ValueError as exc:
            raise ParameterError(f"{path}:{lineno}: non-integer token") from exc
    return seqs


def write_token_file(path, seqs) -> None:
    Path(path).write_text("".join(" ".join(str(int(t)) for t in s) + "\n" for s in seqs))
