"""Multi-view fusion transformer and the single-stream baseline transformer.

Both models read a :class:`ViewBatch` and produce class logits. The MVFT keeps
one stream per view through the encoder; each encoder block runs per-view
self-attention, then fusion attention across views, then a per-view
feed-forward, every sublayer wrapped as ``LayerNorm(x + sublayer(x))``.
The decoder starts from a single all-ones token, cross-attends to each view
separately, and the per-view heads' logits are summed.

Fusion wiring (``fusion_mode``):

* ``cyclic``: stream t attends with K=f, V=s; stream f with K=s, V=t;
  stream s with K=t, V=f. When the V source is shorter or longer than the K
  source it is linearly resampled onto the K source's token grid
  (:func:`~mvft.layers.resample_matrix`).
* ``concat_kv``: each stream uses K=V=concatenation of the other streams.

With two views both modes reduce to mutual cross-attention.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .embedding import EmbeddingTables, embed_bundle
from .layers import AttentionParams, FeedForward, LayerNorm, Linear, Module, multi_head_attention, \
    resample_matrix
from .views import VIEWS, ViewBatch, ViewBundle

FUSION_MODES = ("cyclic", "concat_kv")
MODEL_KINDS = ("mvft", "baseline")


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_channels: int
    seq_len: int
    n_class: int
    kind: str = "mvft"
    views: tuple[str, ...] = VIEWS
    d_model: int = 64
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 1
    d_ff: int = 128
    n_buckets: int = 16
    time_quantum: int = 1
    fusion_mode: str = "cyclic"
    use_segment: bool = True
    use_time: bool = True
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.views = tuple(v for v in VIEWS if v in self.views)
        if self.kind not in MODEL_KINDS:
            raise ModelConfigError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ModelConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if not self.views:
            raise ModelConfigError("at least one view is required")
        if self.kind == "mvft" and len(self.views) < 2:
            raise ModelConfigError("MVFT fuses at least two views; use the baseline model for one view")
        if self.d_model % self.n_heads:
            raise ModelConfigError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.seq_len < 2 or self.n_class < 1 or self.n_channels < 1:
            raise ModelConfigError("seq_len >= 2, n_class >= 1, n_channels >= 1 required")
        if min(self.n_enc, self.n_dec) < 0 or self.d_ff < 1 or self.n_buckets < 1:
            raise ModelConfigError("layer counts must be >= 0, d_ff and n_buckets >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelConfigError("dropout must be in [0, 1)")

    @property
    def max_len(self) -> int:
        return max(self.seq_len + 1, len_of("f", self.seq_len) + 1, len_of("s", self.seq_len) + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["views"] = "".join(self.views)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ModelConfigError(f"unknown model config keys: {sorted(extra)}")
        d = dict(d)
        if isinstance(d.get("views"), str):
            d["views"] = tuple(d["views"])
        return cls(**d)


def len_of(view: str, seq_len: int) -> int:
    """Token count of a view (without [CLS]) for windows of ``seq_len`` samples."""
    return {"t": seq_len, "f": seq_len // 2 + 1, "s": 6}[view]


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.self_attn = {v: AttentionParams(d, cfg.n_heads, rng) for v in VIEWS}
        self.self_norm = {v: LayerNorm(d, cfg.ln_eps) for v in VIEWS}
        self.fusion = {v: AttentionParams(d, cfg.n_heads, rng) for v in VIEWS}
        self.fusion_norm = {v: LayerNorm(d, cfg.ln_eps) for v in VIEWS}
        self.ffn = {v: FeedForward(d, cfg.d_ff, rng) for v in VIEWS}
        self.ffn_norm = {v: LayerNorm(d, cfg.ln_eps) for v in VIEWS}


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, views=VIEWS):
        d = cfg.d_model
        self.self_attn = AttentionParams(d, cfg.n_heads, rng)
        self.self_norm = LayerNorm(d, cfg.ln_eps)
        self.cross = {v: AttentionParams(d, cfg.n_heads, rng) for v in views}
        self.cross_norm = {v: LayerNorm(d, cfg.ln_eps) for v in views}
        self.ffn = FeedForward(d, cfg.d_ff, rng)
        self.ffn_norm = LayerNorm(d, cfg.ln_eps)


class SingleEncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.self_attn = AttentionParams(d, cfg.n_heads, rng)
        self.self_norm = LayerNorm(d, cfg.ln_eps)
        self.ffn = FeedForward(d, cfg.d_ff, rng)
        self.ffn_norm = LayerNorm(d, cfg.ln_eps)


class MVFTModel(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.config = cfg
        self.embed = EmbeddingTables(cfg.n_channels, cfg.d_model, cfg.max_len, cfg.n_buckets, rng)
        self.encoder = [EncoderBlock(cfg, rng) for _ in range(cfg.n_enc)]
        self.dec_input = Linear(cfg.d_model, cfg.d_model, rng)
        self.decoder = [DecoderBlock(cfg, rng) for _ in range(cfg.n_dec)]
        self.heads = {v: Linear(cfg.d_model, cfg.n_class, rng) for v in VIEWS}

    def forward(self, batch: ViewBatch, views=None, *, trace=None, rng=None, fusion: bool = True) -> Tensor:
        views = self.config.views if views is None else views
        return mvft_logits(self, batch, views, trace=trace, rng=rng, fusion=fusion)


class BaselineTransformer(Module):
    """Selected views' embedded sequences concatenated into one self-attention stream."""

    def __init__(self, cfg: ModelConfig, rng):
        self.config = cfg
        self.embed = EmbeddingTables(cfg.n_channels, cfg.d_model, cfg.max_len, cfg.n_buckets, rng)
        self.encoder = [SingleEncoderBlock(cfg, rng) for _ in range(cfg.n_enc)]
        self.dec_input = Linear(cfg.d_model, cfg.d_model, rng)
        self.decoder = [DecoderBlock(cfg, rng, views=("x",)) for _ in range(cfg.n_dec)]
        self.head = Linear(cfg.d_model, cfg.n_class, rng)

    def forward(self, batch: ViewBatch, views=None, *, trace=None, rng=None, fusion: bool = True) -> Tensor:
        views = self.config.views if views is None else views
        return baseline_logits(self, batch, views, trace=trace, rng=rng)


def build_model(cfg: ModelConfig, rng) -> MVFTModel | BaselineTransformer:
    return MVFTModel(cfg, rng) if cfg.kind == "mvft" else BaselineTransformer(cfg, rng)


# ---------------------------------------------------------------- forward pieces


def _residual(x: Tensor, update: Tensor, norm: LayerNorm, p: float, rng) -> Tensor:
    return norm(x + ag.dropout(update, p, rng))


def fusion_attention(streams: dict[str, Tensor], block: EncoderBlock, mode: str = "cyclic", *,
                     trace=None, rng=None, p: float = 0.0, name: str = "fusion") -> dict[str, Tensor]:
    """Cross-view attention, one output per stream; output lengths equal query lengths."""
    order = [v for v in VIEWS if v in streams]
    widths = {streams[v].shape[-1] for v in order}
    if len(widths) != 1:
        raise ag.ShapeError(f"fusion streams disagree on d_model: {sorted(widths)}")
    out = {}
    for i, v in enumerate(order):
        others = order[i + 1:] + order[:i]
        if len(others) == 1:
            k = val = streams[others[0]]
        elif mode == "cyclic":
            k, val = streams[others[0]], streams[others[1]]
            if val.shape[1] != k.shape[1]:
                val = Tensor(resample_matrix(k.shape[1], val.shape[1])) @ val
        else:
            k = val = ag.concat([streams[o] for o in others], axis=1)
        update = multi_head_attention(streams[v], k, val, block.fusion[v], trace, f"{name}.{v}")
        out[v] = _residual(streams[v], update, block.fusion_norm[v], p, rng)
    return out


def encode(model: MVFTModel, embedded: dict[str, Tensor], *, trace=None, rng=None,
           fusion: bool = True) -> dict[str, Tensor]:
    cfg = model.config
    streams = dict(embedded)
    for i, block in enumerate(model.encoder):
        streams = {v: _residual(h, multi_head_attention(h, h, h, block.self_attn[v], trace, f"enc{i}.self.{v}"),
                                block.self_norm[v], cfg.dropout, rng)
                   for v, h in streams.items()}
        if fusion and len(streams) > 1:
            streams = fusion_attention(streams, block, cfg.fusion_mode, trace=trace, rng=rng,
                                       p=cfg.dropout, name=f"enc{i}.fusion")
        streams = {v: _residual(h, block.ffn[v](h), block.ffn_norm[v], cfg.dropout, rng)
                   for v, h in streams.items()}
    return streams


def decode(model, encoded: dict[str, Tensor], *, trace=None, rng=None) -> dict[str, Tensor]:
    """Per-stream decoder outputs, each ``(B, d_model)``."""
    cfg = model.config
    first = next(iter(encoded.values()))
    b, d = first.shape[0], cfg.d_model
    start = model.dec_input(Tensor(np.ones((b, 1, d))))
    streams = {v: start for v in encoded}
    for i, block in enumerate(model.decoder):
        nxt = {}
        for v, h in streams.items():
            h = _residual(h, multi_head_attention(h, h, h, block.self_attn, trace, f"dec{i}.self.{v}"),
                          block.self_norm, cfg.dropout, rng)
            cross = multi_head_attention(h, encoded[v], encoded[v], block.cross[v], trace, f"dec{i}.cross.{v}")
            h = _residual(h, cross, block.cross_norm[v], cfg.dropout, rng)
            nxt[v] = _residual(h, block.ffn(h), block.ffn_norm, cfg.dropout, rng)
        streams = nxt
    return {v: ag.reshape(h, (b, d)) for v, h in streams.items()}


def _embed(model, batch: ViewBatch, views) -> dict[str, Tensor]:
    cfg = model.config
    return embed_bundle(batch, model.embed, views, quantum=cfg.time_quantum,
                        use_segment=cfg.use_segment, use_time=cfg.use_time)


def mvft_logits(model: MVFTModel, batch: ViewBatch, views=VIEWS, *, trace=None, rng=None,
                fusion: bool = True) -> Tensor:
    views = tuple(v for v in VIEWS if v in views)
    encoded = encode(model, _embed(model, batch, views), trace=trace, rng=rng, fusion=fusion)
    decoded = decode(model, encoded, trace=trace, rng=rng)
    logits = None
    for v in views:
        term = model.heads[v](decoded[v])
        logits = term if logits is None else logits + term
    return logits


def baseline_logits(model: BaselineTransformer, batch: ViewBatch, views=VIEWS, *, trace=None,
                    rng=None) -> Tensor:
    views = tuple(v for v in VIEWS if v in views)
    if not views:
        raise ModelConfigError("baseline needs at least one view")
    cfg = model.config
    embedded = _embed(model, batch, views)
    h = ag.concat([embedded[v] for v in views], axis=1) if len(views) > 1 else embedded[views[0]]
    for i, block in enumerate(model.encoder):
        h = _residual(h, multi_head_attention(h, h, h, block.self_attn, trace, f"enc{i}.self"),
                      block.self_norm, cfg.dropout, rng)
        h = _residual(h, block.ffn(h), block.ffn_norm, cfg.dropout, rng)
    decoded = decode(model, {"x": h}, trace=trace, rng=rng)
    return model.head(decoded["x"])


# ---------------------------------------------------------------- public entry points


def _as_batch(bundle: ViewBundle | ViewBatch) -> ViewBatch:
    return bundle if isinstance(bundle, ViewBatch) else ViewBatch.stack([bundle])


def _probs(logits: Tensor, single: bool) -> np.ndarray:
    p = ag.softmax(logits, axis=-1).data
    return p[0] if single else p


def classify(bundle: ViewBundle | ViewBatch, model) -> np.ndarray:
    """Class probabilities: softmax of the summed per-view head logits."""
    with ag.no_grad():
        return _probs(model.forward(_as_batch(bundle)), isinstance(bundle, ViewBundle))


def mvft_forward_masked(bundle: ViewBundle | ViewBatch, view_mask, model: MVFTModel) -> np.ndarray:
    views = tuple(v for v in VIEWS if v in view_mask)
    if len(views) < 2:
        raise ModelConfigError("MVFT needs at least two views; use baseline_forward for a single view")
    with ag.no_grad():
        return _probs(mvft_logits(model, _as_batch(bundle), views), isinstance(bundle, ViewBundle))


def baseline_forward(bundle: ViewBundle | ViewBatch, view_mask, model: BaselineTransformer) -> np.ndarray:
    views = tuple(v for v in VIEWS if v in view_mask)
    if not views:
        raise ModelConfigError("view mask is empty")
    with ag.no_grad():
        return _probs(baseline_logits(model, _as_batch(bundle), views), isinstance(bundle, ViewBundle))
