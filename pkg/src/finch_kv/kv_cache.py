"""Per-layer key/value store with append, selection and rotary repositioning.

Caches are treated as values: every operation returns a new ``KvCache`` and
leaves its inputs untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CapacityError, ForwardOutput, rope_rotate
from .tensor_core import ParameterError

ORDERING_MODES = ("ranking", "positional")
NO_PROVENANCE = -1


class SelectionError(ValueError):
    """A selection vector is malformed for the cache it targets."""


@dataclass
class SelectionResult:
    """Per-layer row indices into ``[cache ++ chunk]``, best first."""

    indices: list[np.ndarray]
    scores: list[np.ndarray] | None = None

    def __eq__(self, other):
        if not isinstance(other, SelectionResult) or len(self.indices) != len(other.indices):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.indices, other.indices))

    def __len__(self):
        return len(self.indices)


@dataclass
class KvCache:
    """Keys (post-rotary) and values, ``(c, d_model)`` per layer.

    ``provenance`` holds the document offset each row came from, or ``-1``
    for prompt/generated rows. ``shadow`` (optional) keeps pre-rotary keys
    so tests can check re-rotation against recomputation.
    """

    n_layers: int
    d_model: int
    n_heads: int
    n_max: int
    k: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    positions: list[np.ndarray] = field(default_factory=list)
    provenance: list[np.ndarray] = field(default_factory=list)
    shadow: list[np.ndarray] | None = None

    @classmethod
    def empty(cls, n_layers: int, d_model: int, n_heads: int, n_max: int, track_shadow: bool = False) -> "KvCache":
        z = lambda: np.zeros((0, d_model))  # noqa: E731
        zi = lambda: np.zeros(0, dtype=np.int64)  # noqa: E731
        return cls(
            n_layers,
            d_model,
            n_heads,
            n_max,
            k=[z() for _ in range(n_layers)],
            v=[z() for _ in range(n_layers)],
            positions=[zi() for _ in range(n_layers)],
            provenance=[zi() for _ in range(n_layers)],
            shadow=[z() for _ in range(n_layers)] if track_shadow else None,
        )

    @classmethod
    def for_model(cls, config, track_shadow: bool = False) -> "KvCache":
        return cls.empty(config.n_layers, config.d_model, config.n_heads, config.n_max, track_shadow)

    @property
    def length(self) -> int:
        return int(self.k[0].shape[0]) if self.k else 0

    def __len__(self) -> int:
        return self.length

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def max_position(self) -> int:
        return int(max(p[-1] for p in self.positions)) if self.length else -1

    def check(self) -> None:
        """Assert structural invariants (shared length, increasing positions)."""
        c = self.length
        for li in range(self.n_layers):
            assert self.k[li].shape == (c, self.d_model)
            assert self.v[li].shape == (c, self.d_model)
            assert self.positions[li].shape == (c,)
            assert self.provenance[li].shape == (c,)
            assert np.all(np.diff(self.positions[li]) > 0)
        assert c <= self.n_max

    def _replace(self, **kw) -> "KvCache":
        base = dict(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_max=self.n_max,
            k=self.k,
            v=self.v,
            positions=self.positions,
            provenance=self.provenance,
            shadow=self.shadow,
        )
        base.update(kw)
        return KvCache(**base)


def rows_from_forward(
    out: ForwardOutput,
    rows: slice,
    like: KvCache,
    provenance=None,
) -> KvCache:
    """Package window rows of a forward pass as a cache-shaped block."""
    pos = out.positions[rows]
    n = pos.size
    prov = np.full(n, NO_PROVENANCE, dtype=np.int64) if provenance is None else np.asarray(provenance, dtype=np.int64)
    if prov.shape != (n,):
        raise ParameterError("provenance must have one entry per row")
    return KvCache(
        like.n_layers,
        like.d_model,
        like.n_heads,
        like.n_max,
        k=[k[rows] for k in out.keys],
        v=[v[rows] for v in out.values],
        positions=[pos.copy() for _ in range(like.n_layers)],
        provenance=[prov.copy() for _ in range(like.n_layers)],
        shadow=[r[rows] for r in out.raw_keys] if like.shadow is not None else None,
    )


def _concat(a: KvCache, b: KvCache) -> KvCache:
    shadow = None
    if a.shadow is not None and b.shadow is not None:
        shadow = [np.concatenate([x, y]) for x, y in zip(a.shadow, b.shadow)]
    return a._replace(
        k=[np.concatenate([x, y]) for x, y in zip(a.k, b.k)],
        v=[np.concatenate([x, y]) for x, y in zip(a.v, b.v)],
        positions=[np.concatenate([x, y]) for x, y in zip(a.positions, b.positions)],
        provenance=[np.concatenate([x, y]) for x, y in zip(a.provenance, b.provenance)],
        shadow=shadow,
    )


def append(cache: KvCache, rows: KvCache) -> KvCache:
    """Concatenate fresh rows onto every layer."""
    if rows.n_layers != cache.n_layers or rows.d_model != cache.d_model:
        raise ParameterError("row block does not match cache geometry")
    if cache.length + rows.length > cache.n_max:
        raise CapacityError(f"append of {rows.length} rows overflows n_max={cache.n_max} (c={cache.length})")
    if rows.length and cache.length and rows.positions[0][0] <= cache.max_position():
        raise ParameterError("appended positions must follow cached positions")
    return _concat(cache, rows)


def select_and_reposition(
    cache: KvCache,
    chunk: KvCache,
    selection: SelectionResult,
    ordering_mode: str = "ranking",
) -> KvCache:
    """Keep the selected rows of ``[cache ++ chunk]`` at positions ``0..r-1``.

    Keys are rotated by ``new_pos - old_pos`` head by head; values are left
    alone. In ``ranking`` mode rows land in selection order, in
    ``positional`` mode in their original order.
    """
    if ordering_mode not in ORDERING_MODES:
        raise ParameterError(f"ordering_mode must be one of {ORDERING_MODES}")
    if len(selection.indices) != cache.n_layers:
        raise SelectionError("need one index vector per layer")
    staged = _concat(cache, chunk)
    total = staged.length
    H, dh = staged.n_heads, staged.d_head
    ks, vs, ps, provs, shadows = [], [], [], [], []
    for li, idx in enumerate(selection.indices):
        idx = np.asarray(idx, dtype=np.int64)
        if np.unique(idx).size != idx.size:
            raise SelectionError(f"duplicate indices in layer {li}")
        if idx.size and (idx.min() < 0 or idx.max() >= total):
            raise SelectionError(f"index out of range [0, {total}) in layer {li}")
        if ordering_mode == "positional":
            idx = np.sort(idx)
        r = idx.size
        new_pos = np.arange(r, dtype=np.int64)
        delta = new_pos - staged.positions[li][idx]
        k = staged.k[li][idx].reshape(r, H, dh)
        if np.any(delta):
            k = rope_rotate(k, delta[:, None])
        ks.append(k.reshape(r, staged.d_model))
        vs.append(staged.v[li][idx])
        ps.append(new_pos)
        provs.append(staged.provenance[li][idx])
        if staged.shadow is not None:
            shadows.append(staged.shadow[li][idx])
    return staged._replace(
        k=ks,
        v=vs,
        positions=ps,
        provenance=provs,
        shadow=shadows if staged.shadow is not None else None,
    )


def memory_bytes(cache: KvCache, bytes_per_element: int = 4) -> int:
    """Bytes needed to hold K and V: ``2 * L * c * d_model * bytes_per_element``.

    The default of 4 matches the float32 on-disk formats, not the float64
    arrays used for arithmetic.
    """
    return 2 * cache.n_layers * cache.length * cache.d_model * int(bytes_per_element)
