"""Toy decoder-only inference engine with prompt-guided KV-cache compression."""

from .compressor import CompressionConfig, PrefillState, compress_step
from .kv_cache import KvCache, SelectionResult, memory_bytes, select_and_reposition
from .model import CapacityError, ModelConfig, Weights, build_model, forward_chunk, rope_rotate
from .pipeline import RunConfig, answer_distance, generate, prefill_finch, prefill_truncate, prefill_vanilla, run

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "CompressionConfig",
    "KvCache",
    "ModelConfig",
    "PrefillState",
    "RunConfig",
    "SelectionResult",
    "Weights",
    "answer_distance",
    "build_model",
    "compress_step",
    "forward_chunk",
    "generate",
    "memory_bytes",
    "prefill_finch",
    "prefill_truncate",
    "prefill_vanilla",
    "rope_rotate",
    "run",
    "select_and_reposition",
]
