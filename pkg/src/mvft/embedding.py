"""Token embeddings: per-view projection plus position, time, and segment tables, with [CLS]."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import Linear, Module
from .views import VIEWS, ViewBatch


class EmbeddingError(ValueError):
    pass


def time_bucket(delta, quantum: int = 1, n_buckets: int = 16):
    """min(n_buckets - 1, floor(log2(1 + delta / quantum))) in exact integer arithmetic."""
    delta = np.asarray(delta, dtype=np.int64)
    if np.any(delta < 0):
        raise EmbeddingError("time delta must be non-negative")
    if quantum < 1:
        raise EmbeddingError(f"time quantum must be >= 1, got {quantum}")
    # floor(log2((q + d) / q)) == floor(log2(1 + d // q)); clamp before the float conversion
    ratio = np.minimum(1 + delta // int(quantum), 1 << n_buckets)
    _, exponent = np.frexp(ratio.astype(np.float64))
    bucket = np.minimum(exponent - 1, n_buckets - 1)
    return int(bucket) if bucket.ndim == 0 else bucket.astype(np.int64)


class EmbeddingTables(Module):
    def __init__(self, n_channels: int, d_model: int, max_len: int, n_buckets: int, rng):
        self.proj = {v: Linear(n_channels, d_model, rng) for v in VIEWS}
        bound = 1.0 / math.sqrt(d_model)
        self.position = Tensor(rng.uniform(max_len * d_model, -bound, bound).reshape(max_len, d_model),
                               requires_grad=True)
        self.time = Tensor(rng.uniform(n_buckets * d_model, -bound, bound).reshape(n_buckets, d_model),
                           requires_grad=True)
        self.segment = {v: Tensor(rng.uniform(d_model, -bound, bound), requires_grad=True) for v in VIEWS}
        self.cls = {v: Tensor(rng.uniform(d_model, -bound, bound), requires_grad=True) for v in VIEWS}

    @property
    def max_len(self) -> int:
        return self.position.shape[0]

    @property
    def n_buckets(self) -> int:
        return self.time.shape[0]

    @property
    def d_model(self) -> int:
        return self.position.shape[1]


def embed_view(tables: EmbeddingTables, tokens, view: str, timestamps=None, *,
               quantum: int = 1, use_segment: bool = True, use_time: bool = True) -> Tensor:
    """Embed ``(B, L, C)`` tokens (or unbatched ``(L, C)``) into ``(B, L + 1, d_model)``.

    Row 0 is ``cls[view] + position[0] + segment[view]``; row ``i >= 1`` is
    ``proj(token[i-1]) + position[i] + time[bucket(t_i - t_0)] + segment[view]``.
    Without timestamps every data token uses time bucket 0.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    unbatched = tokens.ndim == 2
    if unbatched:
        tokens = tokens[None]
        if timestamps is not None:
            timestamps = np.asarray(timestamps)[None]
    b, length, _ = tokens.shape
    if length + 1 > tables.max_len:
        raise EmbeddingError(f"{length} tokens + [CLS] exceed max_len {tables.max_len}")
    d = tables.d_model
    x = tables.proj[view](Tensor(tokens))
    x = x + tables.position[1:length + 1]
    if use_time:
        if timestamps is None:
            buckets = np.zeros((b, length), dtype=np.int64)
        else:
            ts = np.asarray(timestamps, dtype=np.int64)
            buckets = time_bucket(ts - ts[:, :1], quantum, tables.n_buckets)
        x = x + ag.take_rows(tables.time, buckets)
    cls = tables.cls[view] + tables.position[0]
    if use_segment:
        x = x + tables.segment[view]
        cls = cls + tables.segment[view]
    cls = ag.broadcast_to(ag.reshape(cls, (1, 1, d)), (b, 1, d))
    out = ag.concat([cls, x], axis=1)
    return ag.reshape(out, (length + 1, d)) if unbatched else out


def embed_bundle(batch: ViewBatch, tables: EmbeddingTables, views=VIEWS, *, quantum: int = 1,
                 use_segment: bool = True, use_time: bool = True) -> dict[str, Tensor]:
    """Embedded sequences keyed by view; positions restart at 0 in each view."""
    sources = {"t": (batch.temporal, batch.timestamps), "f": (batch.frequent, None),
               "s": (batch.statistic, None)}
    return {v: embed_view(tables, sources[v][0], v, sources[v][1], quantum=quantum,
                          use_segment=use_segment, use_time=use_time)
            for v in views}
