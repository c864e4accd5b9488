import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvft import autograd as ag
from mvft.autograd import ShapeError, Tensor
from mvft.embedding import embed_bundle
from mvft.layers import AttentionParams, multi_head_attention, resample_matrix
from mvft.model import (BaselineTransformer, ModelConfig, ModelConfigError, baseline_forward, build_model,
                        classify, decode, encode, fusion_attention, mvft_forward_masked, mvft_logits)
from mvft.rng import SeededRng
from mvft.views import SensorWindow, ViewBatch, build_batch

from conftest import TINY, numeric_grad, random_batch, rel_err, tiny_model
from oracles import encoder_permutation_gap, fusion_wiring_probe


def seq(seed, *shape):
    return Tensor(SeededRng(seed).normal(int(np.prod(shape))).reshape(shape))


def naive_mha(q, k, v, p: AttentionParams):
    """Each head computed on its own with explicit loops over query rows."""
    dk = p.d_head
    heads = []
    for h in range(p.n_heads):
        cols = slice(h * dk, (h + 1) * dk)
        qh, kh, vh = q @ p.wq.data[:, cols], k @ p.wk.data[:, cols], v @ p.wv.data[:, cols]
        rows = []
        for i in range(q.shape[0]):
            s = np.array([qh[i] @ kh[j] for j in range(k.shape[0])]) / math.sqrt(dk)
            w = np.exp(s - s.max())
            w /= w.sum()
            rows.append(sum(w[j] * vh[j] for j in range(k.shape[0])))
        heads.append(np.array(rows))
    return np.concatenate(heads, axis=1) @ p.wo.data


class TestMultiHeadAttention:
    def test_single_key_ignores_query(self):
        p = AttentionParams(4, 1, SeededRng(0))
        k, v = seq(1, 1, 4), seq(2, 1, 4)
        for qs in (3, 4):
            out = multi_head_attention(seq(qs, 3, 4), k, v, p).data
            np.testing.assert_allclose(out, np.tile(v.data @ p.wv.data @ p.wo.data, (3, 1)), atol=1e-12)

    def test_equal_scores_average_values(self):
        p = AttentionParams(4, 2, SeededRng(0))
        k = Tensor(np.tile(SeededRng(3).normal(4), (5, 1)))  # identical keys
        v = seq(4, 5, 4)
        out = multi_head_attention(seq(5, 2, 4), k, v, p).data
        expect = v.data.mean(axis=0) @ p.wv.data @ p.wo.data
        np.testing.assert_allclose(out, np.tile(expect, (2, 1)), atol=1e-12)

    def test_per_head_oracle(self):
        p = AttentionParams(6, 2, SeededRng(7))
        q, k, v = seq(8, 4, 6), seq(9, 4, 6), seq(10, 4, 6)
        np.testing.assert_allclose(multi_head_attention(q, k, v, p).data, naive_mha(q.data, k.data, v.data, p),
                                   rtol=0, atol=1e-12)

    def test_kv_length_mismatch(self):
        p = AttentionParams(4, 2, SeededRng(0))
        with pytest.raises(ShapeError):
            multi_head_attention(seq(1, 2, 4), seq(2, 3, 4), seq(3, 4, 4), p)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            multi_head_attention(seq(1, 2, 5), seq(2, 3, 5), seq(3, 3, 5), AttentionParams(4, 2, SeededRng(0)))

    def test_heads_must_divide(self):
        with pytest.raises(ShapeError):
            AttentionParams(6, 4, SeededRng(0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32), st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 50.0))
    def test_weights_row_stochastic(self, seed, lq, lk, scale):
        p = AttentionParams(8, 2, SeededRng(seed))
        trace = []
        multi_head_attention(Tensor(seq(seed, 2, lq, 8).data * scale), seq(seed + 1, 2, lk, 8),
                             seq(seed + 2, 2, lk, 8), p, trace)
        (_, w), = trace
        assert w.shape == (2, 2, lq, lk)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)


class TestResample:
    @pytest.mark.parametrize("n_out,n_in", [(17, 7), (7, 31), (5, 5), (4, 1), (1, 3)])
    def test_rows_sum_to_one(self, n_out, n_in):
        m = resample_matrix(n_out, n_in)
        assert m.shape == (n_out, n_in) and (m >= 0).all()
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)

    def test_linear_ramp_preserved(self):
        m = resample_matrix(9, 5)
        np.testing.assert_allclose(m @ np.arange(5.0), np.linspace(0, 4, 9), atol=1e-12)


def _cfg(**kw):
    return ModelConfig(**{**TINY, **kw})


def _streams(T=30, d=8, seed=0):
    return {"t": seq(seed, 2, T + 1, d), "f": seq(seed + 1, 2, T // 2 + 2, d), "s": seq(seed + 2, 2, 7, d)}


class TestFusion:
    @pytest.mark.parametrize("mode", ["cyclic", "concat_kv"])
    def test_shapes(self, mode):
        model = tiny_model()
        out = fusion_attention(_streams(), model.encoder[0], mode)
        assert {v: x.shape for v, x in out.items()} == {"t": (2, 31, 8), "f": (2, 17, 8), "s": (2, 7, 8)}

    def test_identical_streams_reduce_to_self_attention(self):
        block = tiny_model().encoder[0]
        h = seq(3, 2, 5, 8)
        out = fusion_attention({"t": h, "f": h, "s": h}, block)
        for v in "tfs":
            expect = block.fusion_norm[v](h + multi_head_attention(h, h, h, block.fusion[v])).data
            np.testing.assert_allclose(out[v].data, expect, atol=1e-12)

    @pytest.mark.parametrize("query,k_src,v_src", [("t", "f", "s"), ("f", "s", "t"), ("s", "t", "f")])
    def test_cyclic_wiring(self, query, k_src, v_src):
        block = tiny_model().encoder[0]
        dw, dout = fusion_wiring_probe(block, _streams(), query, v_src)
        assert dw < 1e-12 and dout > 1e-6
        dw, _ = fusion_wiring_probe(block, _streams(), query, k_src)
        assert dw > 1e-6

    def test_two_views_mutual_cross_attention(self):
        block = tiny_model().encoder[0]
        s = _streams()
        pair = {"t": s["t"], "s": s["s"]}
        for mode in ("cyclic", "concat_kv"):
            out = fusion_attention(pair, block, mode)
            expect = block.fusion_norm["t"](s["t"] + multi_head_attention(s["t"], s["s"], s["s"], block.fusion["t"]))
            np.testing.assert_allclose(out["t"].data, expect.data, atol=1e-12)

    def test_concat_kv_uses_both_other_views(self):
        block = tiny_model().encoder[0]
        trace = []
        fusion_attention(_streams(), block, "concat_kv", trace=trace)
        assert dict(trace)["fusion.t"].shape[-1] == 17 + 7

    def test_width_mismatch(self):
        s = _streams()
        s["s"] = seq(9, 2, 7, 4)
        with pytest.raises(ShapeError):
            fusion_attention(s, tiny_model().encoder[0])


def _embedded(model, batch):
    cfg = model.config
    return embed_bundle(batch, model.embed, cfg.views, quantum=cfg.time_quantum)


class TestEncoderDecoder:
    def test_zero_layers_is_identity(self):
        model = tiny_model(n_enc=0)
        emb = _embedded(model, random_batch(0, 3))
        out = encode(model, emb)
        for v in "tfs":
            assert out[v] is emb[v] or np.array_equal(out[v].data, emb[v].data)

    @pytest.mark.parametrize("n_enc", [1, 3])
    def test_shapes_preserved(self, n_enc):
        model = tiny_model(n_enc=n_enc)
        emb = _embedded(model, random_batch(0, 3))
        out = encode(model, emb)
        assert {v: x.shape for v, x in out.items()} == {v: x.shape for v, x in emb.items()}

    def test_zero_decoder_layers_copies_start_token(self):
        model = tiny_model(n_dec=0)
        enc = encode(model, _embedded(model, random_batch(0, 2)))
        out = decode(model, enc)
        start = model.dec_input(Tensor(np.ones((1, 8)))).data[0]
        for v in "tfs":
            np.testing.assert_allclose(out[v].data, np.tile(start, (2, 1)), atol=1e-12)

    def test_decoder_streams_are_independent(self):
        model = tiny_model(n_dec=2)
        enc = encode(model, _embedded(model, random_batch(1, 2)))
        base = decode(model, enc)
        enc["s"] = Tensor(np.zeros(enc["s"].shape))
        after = decode(model, enc)
        np.testing.assert_array_equal(after["t"].data, base["t"].data)
        np.testing.assert_array_equal(after["f"].data, base["f"].data)
        assert np.abs(after["s"].data - base["s"].data).max() > 1e-6

    def test_all_attention_rows_stochastic(self):
        model = tiny_model(n_enc=2, n_dec=2)
        trace = []
        model.forward(random_batch(2, 3), trace=trace)
        assert len(trace) == 2 * 6 + 2 * 6  # enc: self+fusion per view; dec: self+cross per view
        for name, w in trace:
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9, err_msg=name)

    def test_encoder_gradients_match_finite_differences(self):
        model = tiny_model(seed=5)
        batch = random_batch(6, 2)
        probe = SeededRng(7).normal(6).reshape(2, 3)

        def loss():
            return ag.tsum(model.forward(batch) * Tensor(probe))

        ag.backward(loss())
        for name, p in model.encoder[0].named_parameters("encoder.0."):
            with ag.no_grad():
                numeric = numeric_grad(lambda: loss().data, p.data)
            assert rel_err(p.grad, numeric) < 1e-4, name


class TestReadout:
    def test_probabilities_sum_to_one(self, tiny):
        p = classify(random_batch(3, 5), tiny)
        assert p.shape == (5, 3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_single_bundle(self, tiny):
        rng = SeededRng(1)
        from mvft.views import build_views
        bundle = build_views(SensorWindow(rng.normal(8).reshape(4, 2), np.arange(4), 0))
        p = classify(bundle, tiny)
        assert p.shape == (3,)
        np.testing.assert_allclose(p, classify(ViewBatch.stack([bundle]), tiny)[0], atol=0)

    def test_zero_heads_uniform(self, tiny):
        for head in tiny.heads.values():
            head.weight.data[...] = 0.0
            head.bias.data[...] = 0.0
        np.testing.assert_allclose(classify(random_batch(3, 4), tiny), 1 / 3, atol=1e-12)

    def test_constant_shift_invariance(self, tiny):
        batch = random_batch(4, 4)
        before = classify(batch, tiny)
        for head in tiny.heads.values():
            head.bias.data += 7.5
        np.testing.assert_allclose(classify(batch, tiny), before, atol=1e-9)

    def test_logits_are_sum_of_heads(self, tiny):
        batch = random_batch(4, 2)
        enc = encode(tiny, _embedded(tiny, batch))
        dec = decode(tiny, enc)
        expect = sum(tiny.heads[v](dec[v]).data for v in "tfs")
        np.testing.assert_allclose(tiny.forward(batch).data, expect, atol=1e-12)

    def test_deterministic(self):
        batch = random_batch(5, 3)
        assert np.array_equal(classify(batch, tiny_model(3)), classify(batch, tiny_model(3)))


class TestMasked:
    def test_full_mask_equals_classify(self, tiny):
        batch = random_batch(6, 3)
        assert np.array_equal(mvft_forward_masked(batch, "tfs", tiny), classify(batch, tiny))

    def test_single_view_rejected(self, tiny):
        with pytest.raises(ModelConfigError, match="baseline"):
            mvft_forward_masked(random_batch(6, 1), "t", tiny)

    def test_two_view_mask(self, tiny):
        trace = []
        mvft_logits(tiny, random_batch(6, 2), ("t", "f"), trace=trace)
        names = [n for n, _ in trace]
        assert "enc0.fusion.t" in names and not any(n.endswith(".s") for n in names)
        p = mvft_forward_masked(random_batch(6, 2), "tf", tiny)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def _baseline(**kw):
    return build_model(_cfg(kind="baseline", seq_len=30, views=("t",), **kw), SeededRng(0))


def _batch30(n=1):
    rng = SeededRng(12)
    return build_batch([SensorWindow(rng.normal(60).reshape(30, 2), np.arange(30), 0) for _ in range(n)])


class TestBaseline:
    @pytest.mark.parametrize("views,length", [("t", 31), ("tfs", 55)])
    def test_stream_length(self, views, length):
        model = _baseline()
        trace = []
        model.forward(_batch30(), views=tuple(views), trace=trace)
        assert dict(trace)["enc0.self"].shape[-1] == length

    def test_empty_mask(self):
        with pytest.raises(ModelConfigError):
            baseline_forward(_batch30(), "", _baseline())

    def test_probabilities(self):
        p = baseline_forward(_batch30(3), "fs", _baseline())
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("view", ["t", "f", "s"])
    def test_matches_mvft_without_fusion(self, view):
        mv = tiny_model(seed=2, n_enc=2, n_dec=2)
        base = build_model(_cfg(kind="baseline", views=(view,), n_enc=2, n_dec=2), SeededRng(9))
        assert isinstance(base, BaselineTransformer)
        base.embed = mv.embed
        base.dec_input = mv.dec_input
        base.head = mv.heads[view]
        for b, m in zip(base.encoder, mv.encoder):
            b.self_attn, b.self_norm = m.self_attn[view], m.self_norm[view]
            b.ffn, b.ffn_norm = m.ffn[view], m.ffn_norm[view]
        for b, m in zip(base.decoder, mv.decoder):
            b.self_attn, b.self_norm, b.ffn, b.ffn_norm = m.self_attn, m.self_norm, m.ffn, m.ffn_norm
            b.cross, b.cross_norm = {"x": m.cross[view]}, {"x": m.cross_norm[view]}
        batch = random_batch(8, 4)
        with ag.no_grad():
            expect = mvft_logits(mv, batch, (view,), fusion=False).data
            got = base.forward(batch).data
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)


def _zero_positions(model):
    model.embed.position.data[...] = 0.0
    model.embed.time.data[...] = 0.0


class TestPermutationEquivariance:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2 ** 32), st.sampled_from("tfs"))
    def test_concat_kv_all_streams_two_layers(self, seed, view):
        model = tiny_model(seed % 1000, n_enc=2, fusion_mode="concat_kv", seq_len=8)
        _zero_positions(model)
        batch = random_batch(seed % 997, 2, T=8)
        n = {"t": 8, "f": 5, "s": 6}[view]
        perm = SeededRng(seed).permutation(n)
        assert encoder_permutation_gap(model, batch, view, perm, "tfs") < 1e-9

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2 ** 32), st.sampled_from("tfs"))
    def test_cyclic_own_stream_one_layer(self, seed, view):
        model = tiny_model(seed % 1000, n_enc=1, seq_len=8)
        _zero_positions(model)
        perm = SeededRng(seed).permutation({"t": 8, "f": 5, "s": 6}[view])
        assert encoder_permutation_gap(model, random_batch(seed % 997, 2, T=8), view, perm, view) < 1e-9

    def test_positions_break_equivariance(self):
        model = tiny_model(1, seq_len=8)
        perm = np.roll(np.arange(8), 1)
        assert encoder_permutation_gap(model, random_batch(1, 2, T=8), "t", perm, "t") > 1e-6


class TestConfig:
    def test_round_trip(self):
        cfg = _cfg(views=("s", "t"), fusion_mode="concat_kv")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg and cfg.views == ("t", "s")

    @pytest.mark.parametrize("bad", [dict(n_heads=3), dict(kind="x"), dict(views=("t",)),
                                     dict(fusion_mode="mean"), dict(dropout=1.0)])
    def test_rejects(self, bad):
        with pytest.raises(ModelConfigError):
            _cfg(**bad)

    def test_parameter_names_unique_and_counted(self, tiny):
        names = [n for n, _ in tiny.named_parameters()]
        assert len(names) == len(set(names))
        assert tiny.num_parameters() == sum(p.data.size for _, p in tiny.named_parameters())
