"""Parameter containers and the attention / feed-forward sublayers."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor


class Module:
    """Anything whose attributes hold trainable tensors, nested modules, lists or dicts."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        self.weight = ag.parameter((d_in, d_out), rng, fan_in=d_in)
        self.bias = ag.parameter((d_out,), rng, fan_in=d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng):
        self.inner = Linear(d_model, d_ff, rng)
        self.outer = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ag.relu(self.inner(x)))


class AttentionParams(Module):
    """Per-head query/key/value projections stored side by side, plus the output projection.

    Columns ``h*d_k:(h+1)*d_k`` of ``wq`` are head ``h``'s query projection;
    likewise for ``wk`` and ``wv``. ``wo`` maps the concatenated heads back
    to ``d_model``.
    """

    def __init__(self, d_model: int, n_heads: int, rng):
        if d_model % n_heads:
            raise ShapeError(f"{n_heads} heads do not divide d_model={d_model}")
        self.n_heads = n_heads
        self.wq = ag.parameter((d_model, d_model), rng)
        self.wk = ag.parameter((d_model, d_model), rng)
        self.wv = ag.parameter((d_model, d_model), rng)
        self.wo = ag.parameter((d_model, d_model), rng)

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return ag.transpose(ag.reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_attention(q_seq: Tensor, k_seq: Tensor, v_seq: Tensor, params: AttentionParams,
                         trace: list | None = None, name: str = "attn") -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated then projected by W^O.

    Sequences are ``(B, L, d_model)`` or unbatched ``(L, d_model)``. When
    ``trace`` is a list, ``(name, weights)`` with weights of shape
    ``(B, H, Lq, Lk)`` is appended to it.
    """
    unbatched = q_seq.ndim == 2
    if unbatched:
        q_seq, k_seq, v_seq = (ag.reshape(t, (1,) + t.shape) for t in (q_seq, k_seq, v_seq))
    if k_seq.shape[1] != v_seq.shape[1]:
        raise ShapeError(f"key length {k_seq.shape[1]} != value length {v_seq.shape[1]}")
    d = params.d_model
    for label, t in (("query", q_seq), ("key", k_seq), ("value", v_seq)):
        if t.shape[-1] != d:
            raise ShapeError(f"{label} width {t.shape[-1]} != d_model {d}")
    h = params.n_heads
    b, lq, _ = q_seq.shape
    q = _split_heads(q_seq @ params.wq, h)
    k = _split_heads(k_seq @ params.wk, h)
    v = _split_heads(v_seq @ params.wv, h)
    scores = ag.mul(q @ ag.swap_last(k), 1.0 / math.sqrt(params.d_head))
    weights = ag.softmax(scores, axis=-1)
    if trace is not None:
        trace.append((name, weights.data))
    ctx = ag.reshape(ag.transpose(weights @ v, (0, 2, 1, 3)), (b, lq, d))
    out = ctx @ params.wo
    return ag.reshape(out, (lq, d)) if unbatched else out


def resample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Fixed linear-interpolation map from ``n_in`` tokens onto ``n_out`` tokens.

    Endpoints align (token 0 -> token 0, last -> last); every row sums to 1.
    """
    if n_out == n_in:
        return np.eye(n_out)
    out = np.zeros((n_out, n_in))
    if n_in == 1:
        out[:, 0] = 1.0
        return out
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    out[rows, lo] = 1.0 - frac
    out[rows, lo + 1] += frac
    return out
