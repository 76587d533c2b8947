"""Binary weight files and KV-cache snapshots.

Both formats are little-endian. A header of 32-bit integers is followed by
row-major float32 payloads.

Weight file (``FNCW``)::

    magic[4] version L H d_model vocab n_max
    tensors in ``Weights.tensors()`` order:
      embed (vocab, d)
      per layer: attn_gain (d) wq wk wv wo (d, d) ffn_gain (d) w_in (d, 4d) w_out (4d, d)
      unembed (d, vocab)

Cache snapshot (``FNCK``)::

    magic[4] version L H d_model c n_max
    per layer: positions int32[c] provenance int32[c] K float32[c, d] V float32[c, d]

Snapshots store float32, so a reload is exact only up to float32 rounding.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .kv_cache import KvCache
from .model import LayerWeights, ModelConfig, Weights, tensor_shapes

WEIGHT_MAGIC = b"FNCW"
CACHE_MAGIC = b"FNCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s6i")


class FormatError(ValueError):
    """Malformed or mismatched binary file."""


def save_weights(weights: Weights, path) -> None:
    cfg = weights.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(WEIGHT_MAGIC, FORMAT_VERSION, cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.vocab, cfg.n_max))
        for t in weights.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_weights(path, expect: ModelConfig | None = None) -> Weights:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, L, H, d, vocab, n_max = _HEADER.unpack_from(raw)
    if magic != WEIGHT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    cfg = ModelConfig(n_layers=L, n_heads=H, d_model=d, vocab=vocab, n_max=n_max)
    if expect is not None and expect != cfg:
        raise FormatError(f"header {cfg} does not match expected {expect}")
    shapes = tensor_shapes(cfg)
    need = sum(int(np.prod(s)) for s in shapes) * 4
    body = raw[_HEADER.size:]
    if len(body) != need:
        raise FormatError(f"expected {need} payload bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    tensors, at = [], 0
    for s in shapes:
        n = int(np.prod(s))
        tensors.append(flat[at:at + n].reshape(s))
        at += n
    layers = [LayerWeights(*tensors[1 + 8 * i:9 + 8 * i]) for i in range(L)]
    return Weights(config=cfg, embed=tensors[0], layers=layers, unembed=tensors[-1])


def save_cache(cache: KvCache, path) -> Path:
    """Write the binary snapshot plus a ``.positions.txt`` listing; returns the listing path."""
    path = Path(path)
    c = cache.length
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, FORMAT_VERSION, cache.n_layers, cache.n_heads, cache.d_model, c, cache.n_max))
        for li in range(cache.n_layers):
            fh.write(cache.positions[li].astype("<i4").tobytes())
            fh.write(cache.provenance[li].astype("<i4").tobytes())
            fh.write(np.ascontiguousarray(cache.k[li], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(cache.v[li], dtype="<f4").tobytes())
    listing = path.with_name(path.name + ".positions.txt")
    lines = [f"# layer: position:document_offset (offset -1 = prompt/generated), c={c}"]
    for li in range(cache.n_layers):
        pairs = " ".join(f"{p}:{o}" for p, o in zip(cache.positions[li].tolist(), cache.provenance[li].tolist()))
        lines.append(f"{li}: {pairs}")
    listing.write_text("\n".join(lines) + "\n")
    return listing


def load_cache(path) -> KvCache:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, L, H, d, c, n_max = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    per_layer = 8 * c + 8 * c * d
    if len(raw) - _HEADER.size != L * per_layer:
        raise FormatError("payload size does not match header")
    cache = KvCache.empty(L, d, H, n_max)
    at = _HEADER.size
    for li in range(L):
        cache.positions[li] = np.frombuffer(raw, "<i4", c, at).astype(np.int64)
        cache.provenance[li] = np.frombuffer(raw, "<i4", c, at + 4 * c).astype(np.int64)
        at += 8 * c
        cache.k[li] = np.frombuffer(raw, "<f4", c * d, at).astype(np.float64).reshape(c, d)
        cache.v[li] = np.frombuffer(raw, "<f4", c * d, at + 4 * c * d).astype(np.float64).reshape(c, d)
        at += 8 * c * d
    return cache
