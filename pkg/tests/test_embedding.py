import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvft import autograd as ag
from mvft.embedding import EmbeddingError, EmbeddingTables, embed_bundle, embed_view, time_bucket
from mvft.rng import SeededRng
from mvft.views import SensorWindow, build_batch

from conftest import numeric_grad, random_batch, rel_err


def tables(seed=0, C=3, d=8, max_len=32, n_buckets=16):
    return EmbeddingTables(C, d, max_len, n_buckets, SeededRng(seed))


def zero_all(t):
    for p in t.parameters().values():
        p.data[...] = 0.0


class TestTimeBucket:
    def test_zero(self):
        assert time_bucket(0) == 0

    def test_one(self):
        assert time_bucket(1) == 1

    def test_powers(self):
        assert time_bucket([2, 3, 6, 7], quantum=1).tolist() == [1, 2, 2, 3]

    def test_clamp(self):
        assert time_bucket(10 ** 15, n_buckets=16) == 15

    def test_quantum(self):
        assert time_bucket([19, 20, 59, 60], quantum=20).tolist() == [0, 1, 1, 2]

    def test_negative(self):
        with pytest.raises(EmbeddingError):
            time_bucket(-1)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10 ** 12), st.integers(1, 1000), st.integers(1, 40))
    def test_matches_integer_log(self, delta, q, n):
        # bit_length - 1 is floor(log2) without floating point
        assert time_bucket(delta, q, n) == min(n - 1, (1 + delta // q).bit_length() - 1)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert time_bucket(lo) <= time_bucket(hi)


def term_by_term(t, tokens, view, ts):
    """Explicit per-row sum of the four embedding terms."""
    L = tokens.shape[0]
    rows = [t.cls[view].data + t.position.data[0] + t.segment[view].data]
    for i in range(1, L + 1):
        proj = tokens[i - 1] @ t.proj[view].weight.data + t.proj[view].bias.data
        bucket = 0 if ts is None else min(t.n_buckets - 1, int(math.floor(math.log2(1 + (ts[i - 1] - ts[0])))))
        rows.append(proj + t.position.data[i] + t.time.data[bucket] + t.segment[view].data)
    return np.array(rows)


class TestEmbedView:
    def test_all_zero(self):
        t = tables()
        zero_all(t)
        assert not embed_view(t, np.zeros((5, 3)), "t").data.any()

    def test_only_segment(self):
        t = tables()
        zero_all(t)
        t.segment["f"].data[:] = np.arange(8.0)
        out = embed_view(t, SeededRng(1).normal(15).reshape(5, 3), "f").data
        np.testing.assert_array_equal(out, np.tile(np.arange(8.0), (6, 1)))

    @pytest.mark.parametrize("view", ["t", "f", "s"])
    def test_term_by_term_oracle(self, view):
        t = tables(seed=3)
        rng = SeededRng(4)
        tokens = rng.normal(30).reshape(10, 3)
        ts = np.cumsum(rng.integers(10, 5)) if view == "t" else None
        out = embed_view(t, tokens, view, ts).data
        np.testing.assert_allclose(out, term_by_term(t, tokens, view, ts), rtol=0, atol=1e-12)

    def test_overflow(self):
        with pytest.raises(EmbeddingError):
            embed_view(tables(max_len=5), np.zeros((5, 3)), "t")

    def test_batched_matches_unbatched(self):
        t = tables(seed=2)
        tok = SeededRng(5).normal(2 * 4 * 3).reshape(2, 4, 3)
        ts = np.array([[0, 1, 3, 7], [5, 6, 7, 8]])
        out = embed_view(t, tok, "t", ts).data
        for i in range(2):
            np.testing.assert_array_equal(out[i], embed_view(t, tok[i], "t", ts[i]).data)

    def test_cls_row_ignores_tokens(self):
        t = tables(seed=6)
        a = embed_view(t, SeededRng(1).normal(12).reshape(4, 3), "s").data[0]
        b = embed_view(t, SeededRng(2).normal(12).reshape(4, 3) * 100, "s").data[0]
        np.testing.assert_array_equal(a, b)

    def test_toggles(self):
        t = tables(seed=7)
        tok = SeededRng(1).normal(12).reshape(4, 3)
        ts = np.array([0, 1, 2, 3])
        full = embed_view(t, tok, "t", ts).data
        no_seg = embed_view(t, tok, "t", ts, use_segment=False).data
        np.testing.assert_allclose(full - no_seg, np.tile(t.segment["t"].data, (5, 1)), atol=1e-12)
        no_time = embed_view(t, tok, "t", ts, use_time=False).data
        np.testing.assert_allclose(full[1:] - no_time[1:], t.time.data[[0, 1, 1, 2]], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32))
    def test_position_sensitivity(self, seed):
        rng = SeededRng(seed)
        t = tables(seed=seed % 97)
        tok = rng.normal(18).reshape(6, 3)
        perm = np.roll(np.arange(6), 1)
        moved = embed_view(t, tok[perm], "f").data
        assert not np.allclose(moved[1:], embed_view(t, tok, "f").data[1:][perm])
        t.position.data[...] = 0.0
        t.time.data[...] = 0.0
        np.testing.assert_allclose(embed_view(t, tok[perm], "f").data[1:], embed_view(t, tok, "f").data[1:][perm],
                                   atol=1e-12)

    def test_linear_in_each_table(self):
        t = tables(seed=8)
        tok = SeededRng(3).normal(12).reshape(4, 3)
        base = embed_view(t, tok, "t", [0, 2, 4, 9]).data
        t.position.data *= 3.0
        scaled = embed_view(t, tok, "t", [0, 2, 4, 9]).data
        t.position.data /= 3.0
        np.testing.assert_allclose(scaled - base, 2.0 * t.position.data[:5], atol=1e-12)


class TestEmbedBundle:
    def _batch(self):
        rng = SeededRng(9)
        return build_batch([SensorWindow(rng.normal(90).reshape(30, 3), np.arange(30), 0)])

    def test_shapes(self):
        out = embed_bundle(self._batch(), tables(d=32, max_len=31))
        assert {v: x.shape for v, x in out.items()} == {"t": (1, 31, 32), "f": (1, 17, 32), "s": (1, 7, 32)}

    def test_segment_swap(self):
        t = tables(d=8, max_len=31)
        batch = self._batch()
        a = embed_bundle(batch, t)
        t.segment["t"].data, t.segment["f"].data = t.segment["f"].data.copy(), t.segment["t"].data.copy()
        b = embed_bundle(batch, t)
        delta = t.segment["t"].data - t.segment["f"].data
        np.testing.assert_allclose(b["t"].data - a["t"].data, np.broadcast_to(delta, a["t"].shape), atol=1e-12)
        np.testing.assert_allclose(b["f"].data - a["f"].data, np.broadcast_to(-delta, a["f"].shape), atol=1e-12)

    def test_positions_restart_per_view(self):
        t = tables(d=8, max_len=31)
        zero_all(t)
        t.position.data[...] = SeededRng(1).normal(31 * 8).reshape(31, 8)
        out = embed_bundle(self._batch(), t)
        for v in "tfs":
            np.testing.assert_array_equal(out[v].data[0], t.position.data[:out[v].shape[1]])

    def test_gradient_per_table(self):
        t = EmbeddingTables(2, 4, 8, 4, SeededRng(10))
        batch = random_batch(11, 2, T=6, C=2)
        probe = {v: SeededRng(20 + i).normal(2 * n * 4).reshape(2, n, 4)
                 for i, (v, n) in enumerate((("t", 7), ("f", 5), ("s", 7)))}

        def loss():
            out = embed_bundle(batch, t, quantum=1)
            total = None
            for v, x in out.items():
                term = ag.tsum(ag.tanh(x) * ag.Tensor(probe[v]))
                total = term if total is None else total + term
            return total

        ag.backward(loss())
        for name, p in t.named_parameters():
            analytic = p.grad.copy()
            with ag.no_grad():
                numeric = numeric_grad(lambda: loss().data, p.data)
            assert rel_err(analytic, numeric) < 1e-4, name
            p.grad = None
