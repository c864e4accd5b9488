"""Independent reference computations shared by the unit and acceptance suites."""

import cmath
import math

import numpy as np

from mvft import autograd as ag
from mvft.embedding import embed_bundle
from mvft.model import classify, encode, fusion_attention
from mvft.views import ViewBatch


def naive_dft_magnitude(x):
    T = len(x)
    return [abs(sum(x[n] * cmath.exp(-2j * math.pi * k * n / T) for n in range(T))) for k in range(T // 2 + 1)]


def scan_stats(x):
    """Straightforward per-statistic loops, independent of numpy reductions."""
    T = len(x)
    mean = sum(x) / T
    var = sum((v - mean) ** 2 for v in x) / T
    s = sorted(x)
    median = s[T // 2] if T % 2 else (s[T // 2 - 1] + s[T // 2]) / 2
    peaks = 0
    for i in range(1, T - 1):
        if x[i - 1] < x[i] and x[i] > x[i + 1]:
            peaks += 1
    return [mean, var, median, max(x), min(x), peaks]


def classify_jacobian_error(model, batch: ViewBatch, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences of every output
    probability with respect to every parameter."""
    params = model.parameters()
    n_out = len(batch) * model.config.n_class
    analytic = {k: np.zeros((n_out,) + p.shape) for k, p in params.items()}
    for j in range(n_out):
        model.zero_grad()
        probs = ag.softmax(model.forward(batch), axis=-1)
        sel = np.zeros(probs.shape)
        sel.reshape(-1)[j] = 1.0
        ag.backward(ag.tsum(probs * ag.Tensor(sel)))
        for k, p in params.items():
            if p.grad is not None:
                analytic[k][j] = p.grad
    worst = 0.0
    for k, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            plus = classify(batch, model).reshape(-1)
            flat[i] = keep - h
            minus = classify(batch, model).reshape(-1)
            flat[i] = keep
            num = (plus - minus) / (2 * h)
            ana = analytic[k].reshape(n_out, -1)[:, i]
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
            worst = max(worst, float((np.abs(ana - num) / denom).max()))
    return worst


_FIELD = {"t": "temporal", "f": "frequent", "s": "statistic"}


def permute_view(batch: ViewBatch, view: str, perm) -> ViewBatch:
    out = batch.subset(np.arange(len(batch)))
    arr = getattr(out, _FIELD[view])
    setattr(out, _FIELD[view], arr[:, perm])
    return out


def encoder_permutation_gap(model, batch: ViewBatch, view: str, perm, streams) -> float:
    """Max deviation from equivariance: the permuted view's data rows must move with
    ``perm``; every other listed stream must be unchanged. Position and time tables
    of ``model`` must already be zero."""
    def run(b):
        with ag.no_grad():
            emb = embed_bundle(b, model.embed, model.config.views, quantum=model.config.time_quantum,
                               use_segment=model.config.use_segment, use_time=model.config.use_time)
            return {v: x.data for v, x in encode(model, emb).items()}

    base, moved = run(batch), run(permute_view(batch, view, perm))
    gap = 0.0
    for v in streams:
        expect = base[v].copy()
        if v == view:
            expect[:, 1:] = base[v][:, 1:][:, perm]
        gap = max(gap, float(np.abs(moved[v] - expect).max()))
    return gap


def fusion_wiring_probe(block, streams: dict, query: str, v_source: str, mode: str = "cyclic"):
    """Zero ``v_source`` and report (max weight change, max output change) of stream ``query``."""
    def run(s):
        trace = []
        with ag.no_grad():
            out = fusion_attention(s, block, mode, trace=trace)
        weights = dict(trace)[f"fusion.{query}"]
        return weights, out[query].data

    w0, o0 = run(streams)
    zeroed = dict(streams)
    zeroed[v_source] = ag.Tensor(np.zeros(streams[v_source].shape))
    w1, o1 = run(zeroed)
    return float(np.abs(w1 - w0).max()), float(np.abs(o1 - o0).max())
