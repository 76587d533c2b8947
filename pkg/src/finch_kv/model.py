"""Tiny pre-norm decoder-only transformer with rotary position embeddings.

The model is random but structured: a band of "rare" token ids carries a
shared salience direction that every head's query/key maps onto its
lowest-frequency rotary pair. Rare tokens therefore attend strongly to other
rare tokens at any distance, which gives the toy model a content-based
attention signal to compress against. Everything else is seeded noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ParameterError, Rng, ShapeError, softmax_rows

ROPE_BASE = 10000.0
EOS_ID = 0


class CapacityError(RuntimeError):
    """The context window (``n_max``) would be exceeded."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    vocab: int = 256
    n_max: int = 512

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ParameterError("need at least one layer and one head")
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ParameterError(f"d_head={self.d_head} must be even for rotary pairs")
        if self.n_max < 8:
            raise ParameterError("n_max must be at least 8")
        if self.vocab < 16:
            raise ParameterError("vocab must be at least 16")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def rare_ids(self) -> range:
        """Reserved salient ids at the top of the vocabulary (needles live here)."""
        return range(self.vocab - max(4, self.vocab // 8), self.vocab)

    @property
    def filler_ids(self) -> range:
        return range(1, self.rare_ids.start)


@dataclass
class LayerWeights:
    attn_gain: np.ndarray  # (d,)
    wq: np.ndarray  # (d, d)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_gain: np.ndarray
    w_in: np.ndarray  # (d, d_ff)
    w_out: np.ndarray  # (d_ff, d)


@dataclass
class Weights:
    config: ModelConfig
    embed: np.ndarray  # (vocab, d)
    layers: list[LayerWeights]
    unembed: np.ndarray  # (d, vocab)

    def tensors(self) -> list[np.ndarray]:
        """All parameters in the canonical on-disk order."""
        out = [self.embed]
        for lw in self.layers:
            out += [lw.attn_gain, lw.wq, lw.wk, lw.wv, lw.wo, lw.ffn_gain, lw.w_in, lw.w_out]
        out.append(self.unembed)
        return out


def tensor_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes: list[tuple[int, ...]] = [(config.vocab, d)]
    for _ in range(config.n_layers):
        shapes += [(d,), (d, d), (d, d), (d, d), (d, d), (d,), (d, f), (f, d)]
    shapes.append((d, config.vocab))
    return shapes


def _f32(a: np.ndarray) -> np.ndarray:
    # weights are float32-representable so the binary file round-trips exactly
    return a.astype(np.float32).astype(np.float64)


SALIENCE = 8.0


def build_model(config: ModelConfig, seed: int = 0) -> Weights:
    """Deterministic weights for ``config``; same (config, seed) -> same bits."""
    if not isinstance(config, ModelConfig):
        raise ParameterError("config must be a ModelConfig")
    rng = Rng(seed)
    d, dh, H = config.d_model, config.d_head, config.n_heads

    u = rng.normal(d)
    u /= np.linalg.norm(u)
    embed = rng.normal((config.vocab, d))
    embed[config.rare_ids.start:] += SALIENCE * u

    layers = []
    for li in range(config.n_layers):
        lr = rng.spawn(li + 1)
        wq = lr.normal((d, d)) / math.sqrt(d)
        wk = lr.normal((d, d)) / math.sqrt(d)
        for h in range(H):
            # map the salience direction onto the slowest rotary pair of each head
            slow = slice(h * dh + dh - 2, h * dh + dh)
            w = lr.normal(2)
            w /= np.linalg.norm(w)
            wq[:, slow] += np.outer(u, w)
            wk[:, slow] += np.outer(u, w)
        layers.append(
            LayerWeights(
                attn_gain=np.ones(d),
                wq=_f32(wq),
                wk=_f32(wk),
                wv=_f32(lr.normal((d, d)) / math.sqrt(d)),
                wo=_f32(lr.normal((d, d)) * (0.5 / math.sqrt(d))),
                ffn_gain=np.ones(d),
                w_in=_f32(lr.normal((d, config.d_ff)) / math.sqrt(d)),
                w_out=_f32(lr.normal((config.d_ff, d)) * (0.5 / math.sqrt(config.d_ff))),
            )
        )
    embed = _f32(embed)
    return Weights(config=config, embed=embed, layers=layers, unembed=_f32(embed.T / math.sqrt(d)))


def rope_angles(d_head: int, base: float = ROPE_BASE) -> np.ndarray:
    return base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)


def rope_rotate(vec, position, base: float = ROPE_BASE) -> np.ndarray:
    """Rotate dimension pairs (2i, 2i+1) by ``position * base**(-2i/d)``.

    ``vec`` may be batched (``(..., d)``); ``position`` broadcasts against
    ``vec.shape[:-1]``. Negative positions rotate backwards.
    """
    x = np.asarray(vec, dtype=np.float64)
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rotary width must be even, got {d}")
    pos = np.asarray(position, dtype=np.float64)
    ang = pos[..., None] * rope_angles(d, base)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, ang.shape[:-1] + (d,)), dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rms_norm(x: np.ndarray, gain: np.ndarray | None = None, eps: float = 1e-6) -> np.ndarray:
    y = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return y if gain is None else y * gain


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


@dataclass
class ForwardOutput:
    """Result of one window pass.

    ``scores[l]`` has shape ``(H, M, N)`` with columns ordered
    ``[cache, window]`` (``None`` when scores were not requested).
    ``keys`` are post-rotary, ``raw_keys`` pre-rotary, both ``(M, d)``.
    """

    logits: np.ndarray
    scores: list[np.ndarray] | None
    keys: list[np.ndarray]
    values: list[np.ndarray]
    raw_keys: list[np.ndarray]
    positions: np.ndarray
    attn_macs: int = 0


def _split_heads(x: np.ndarray, H: int) -> np.ndarray:
    return x.reshape(x.shape[0], H, -1)


def forward_chunk(
    weights: Weights,
    window_tokens,
    window_positions,
    cache=None,
    keep_scores: bool = True,
) -> ForwardOutput:
    """Run ``window_tokens`` against an (unmodified) cache.

    Window queries see every cached key plus window keys up to their own
    slot. The cache is read, never written.
    """
    cfg = weights.config
    H, dh = cfg.n_heads, cfg.d_head
    tokens = np.asarray(window_tokens, dtype=np.int64).ravel()
    pos = np.asarray(window_positions, dtype=np.int64).ravel()
    M = tokens.size
    c = 0 if cache is None else cache.length
    if M == 0:
        raise ShapeError("empty window")
    if pos.size != M:
        raise ShapeError("one position per window token required")
    if M + c > cfg.n_max:
        raise CapacityError(f"window {M} + cache {c} exceeds n_max={cfg.n_max}")
    if np.any(np.diff(pos) <= 0):
        raise ParameterError("window positions must be strictly increasing")
    if c and pos[0] <= cache.max_position():
        raise ParameterError("window positions must follow every cached position")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ParameterError("token id outside vocabulary")

    x = weights.embed[tokens]
    scale = 1.0 / math.sqrt(dh)
    scores, keys, values, raw = [], [], [], []
    macs = 0
    for li, lw in enumerate(weights.layers):
        h = rms_norm(x, lw.attn_gain)
        q = rope_rotate(_split_heads(h @ lw.wq, H), pos[:, None])
        k_raw = h @ lw.wk
        k = rope_rotate(_split_heads(k_raw, H), pos[:, None]).reshape(M, -1)
        v = h @ lw.wv
        keys.append(k)
        values.append(v)
        raw.append(k_raw)
        if c:
            k_all = np.concatenate([cache.k[li], k], axis=0)
            v_all = np.concatenate([cache.v[li], v], axis=0)
        else:
            k_all, v_all = k, v
        N = k_all.shape[0]
        kh = _split_heads(k_all, H).transpose(1, 2, 0)  # (H, dh, N)
        vh = _split_heads(v_all, H).transpose(1, 0, 2)  # (H, N, dh)
        logits = (q.transpose(1, 0, 2) @ kh) * scale  # (H, M, N)
        attn = softmax_rows(logits, causal=True, offset=c)
        macs += 2 * H * M * N * dh
        if keep_scores:
            scores.append(attn)
        mixed = (attn @ vh).transpose(1, 0, 2).reshape(M, -1)
        x = x + mixed @ lw.wo
        x = x + gelu(rms_norm(x, lw.ffn_gain) @ lw.w_in) @ lw.w_out
    logits_out = rms_norm(x) @ weights.unembed
    return ForwardOutput(
        logits=logits_out,
        scores=scores if keep_scores else None,
        keys=keys,
        values=values,
        raw_keys=raw,
        positions=pos,
        attn_macs=macs,
    )
