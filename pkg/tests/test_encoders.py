import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nlivec import encoders as enc
from nlivec import numerics as nx
from nlivec.numerics import Tensor

SMALL_DIM = {"LSTM_LAST": 6, "GRU_LAST": 6, "BIGRU_LAST": 6, "BILSTM_MEAN": 6, "BILSTM_MAX": 6,
             "INNER_ATTENTION": 8, "HCONVNET": 8}


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_oracle(params, prefix, x):
    Wx, Wh, b = (params[f"{prefix}.{n}"].data for n in ("W_x", "W_h", "b"))
    H = Wh.shape[0]
    h, c = np.zeros(H), np.zeros(H)
    out = []
    for xt in x:
        z = xt @ Wx + h @ Wh + b
        i, f, o = sigmoid(z[:H]), sigmoid(z[H : 2 * H]), sigmoid(z[2 * H : 3 * H])
        g = np.tanh(z[3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def gru_oracle(params, prefix, x):
    Wx, Urz, Un, b = (params[f"{prefix}.{n}"].data for n in ("W_x", "U_rz", "U_n", "b"))
    H = Un.shape[0]
    h = np.zeros(H)
    out = []
    for xt in x:
        zx = xt @ Wx + b
        rz = sigmoid(zx[: 2 * H] + h @ Urz)
        r, u = rz[:H], rz[H:]
        n = np.tanh(zx[2 * H :] + (r * h) @ Un)
        h = u * h + (1 - u) * n
        out.append(h)
    return np.array(out)


def make(kind, dim=None, embed=4, seed=0):
    config = enc.EncoderConfig(kind, embed_dim=embed, output_dim=dim or SMALL_DIM[kind], seed=seed)
    return config, enc.init_params(config)


class TestConfig:
    def test_unknown_kind(self):
        with pytest.raises(enc.EncoderError):
            enc.EncoderConfig("TRANSFORMER", 4, 8)

    @pytest.mark.parametrize("kind, dim", [("BILSTM_MAX", 7), ("BIGRU_LAST", 5), ("HCONVNET", 6), ("INNER_ATTENTION", 12)])
    def test_divisibility(self, kind, dim):
        with pytest.raises(enc.EncoderError):
            enc.validate_dim(kind, dim)

    def test_hidden_sizes(self):
        assert enc.EncoderConfig("BILSTM_MAX", 4, 4096).hidden_size == 2048
        assert enc.EncoderConfig("LSTM_LAST", 4, 2048).hidden_size == 2048
        assert enc.EncoderConfig("HCONVNET", 4, 16).hidden_size == 4


class TestRecurrent:
    @pytest.mark.parametrize("cell, kind", [("lstm", "LSTM_LAST"), ("gru", "GRU_LAST")])
    def test_zero_parameters_give_zero_states(self, cell, kind, rng):
        _, params = make(kind)
        zero = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
        h = enc.rnn_forward(cell, zero, rng.normal(size=(5, 4)))
        assert np.all(h.data == 0.0)

    def test_empty_sentence(self):
        _, params = make("LSTM_LAST")
        with pytest.raises(enc.EncoderError):
            enc.rnn_forward("lstm", params, np.zeros((1, 0, 4)))
        with pytest.raises(enc.EncoderError):
            enc.pad_batch([np.zeros((0, 4))])

    @pytest.mark.parametrize("cell, kind, oracle", [("lstm", "LSTM_LAST", lstm_oracle), ("gru", "GRU_LAST", gru_oracle)])
    def test_forward_matches_step_oracle(self, cell, kind, oracle, rng):
        _, params = make(kind)
        x = rng.normal(size=(5, 4))
        h = enc.rnn_forward(cell, params, x).data
        np.testing.assert_allclose(h, oracle(params, "fwd", x), rtol=0, atol=1e-12)

    def test_backward_direction_is_realigned(self, rng):
        _, params = make("BILSTM_MAX")
        x = rng.normal(size=(4, 4))
        h = enc.rnn_forward("lstm", params, x, direction="backward").data
        expected = lstm_oracle(params, "bwd", x[::-1])[::-1]
        np.testing.assert_allclose(h, expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("cell, kind", [("lstm", "LSTM_LAST"), ("gru", "GRU_LAST")])
    def test_gradient_of_last_state(self, cell, kind, rng):
        _, params = make(kind)
        x = rng.normal(size=(4, 4))
        err = nx.grad_check(lambda: enc.rnn_forward(cell, params, x)[3].sum(), list(params.values()))
        assert err < 1e-3

    def test_encode_last_single_step(self, rng):
        states = rng.normal(size=(1, 6))
        assert np.array_equal(enc.encode_last(states).data, states[0])

    @pytest.mark.parametrize("kind, oracle", [("LSTM_LAST", lstm_oracle), ("GRU_LAST", gru_oracle)])
    def test_last_matches_oracle(self, kind, oracle, rng):
        config, params = make(kind)
        x = rng.normal(size=(5, 4))
        vec = enc.encode(config, params, x)
        np.testing.assert_allclose(vec.values, oracle(params, "fwd", x)[-1], rtol=0, atol=1e-12)

    def test_bigru_last_concatenates_directions(self, rng):
        config, params = make("BIGRU_LAST")
        x = rng.normal(size=(5, 4))
        vec = enc.encode(config, params, x).values
        H = config.hidden_size
        assert vec.shape == (2 * H,)
        np.testing.assert_allclose(vec[:H], gru_oracle(params, "fwd", x)[-1], atol=1e-12)
        np.testing.assert_allclose(vec[H:], gru_oracle(params, "bwd", x[::-1])[-1], atol=1e-12)


class TestPooling:
    def test_max(self):
        out = enc.pool(np.array([[1.0, 4.0], [3.0, 2.0]]), "MAX")
        assert out.data.tolist() == [3.0, 4.0]
        assert out.argmax.tolist() == [1, 0]

    def test_mean(self):
        out = enc.pool(np.array([[1.0, 4.0], [3.0, 2.0]]), "MEAN")
        assert out.data.tolist() == [2.0, 3.0]
        assert out.argmax is None

    def test_max_single_step(self, rng):
        s = rng.normal(size=(1, 5))
        out = enc.pool(s, "MAX")
        assert np.array_equal(out.data, s[0])
        assert out.argmax.tolist() == [0] * 5

    def test_max_brute_force(self, rng):
        s = rng.normal(size=(7, 9))
        out = enc.pool(s, "MAX").data
        for j in range(9):
            assert out[j] == max(s[i, j] for i in range(7))

    def test_mean_arithmetic(self, rng):
        s = rng.normal(size=(7, 9))
        out = enc.pool(s, "MEAN").data
        for j in range(9):
            assert abs(out[j] - sum(s[i, j] for i in range(7)) / 7) <= 1e-12

    def test_masked_pooling_ignores_padding(self, rng):
        s = rng.normal(size=(2, 4, 3))
        s[0, 2:] = 100.0
        lengths = np.array([2, 4])
        mx = enc.pool(s, "MAX", lengths).data
        mn = enc.pool(s, "MEAN", lengths).data
        np.testing.assert_array_equal(mx[0], s[0, :2].max(axis=0))
        np.testing.assert_allclose(mn[0], s[0, :2].mean(axis=0), atol=1e-12)

    @given(arrays(np.float64, (4, 5), elements=st.floats(-10, 10)), st.permutations(range(5)))
    def test_dimension_permutation_equivariance(self, s, perm):
        perm = list(perm)
        for mode in ("MAX", "MEAN"):
            a = enc.pool(s, mode).data[perm]
            b = enc.pool(s[:, perm], mode).data
            np.testing.assert_array_equal(a, b)

    @given(arrays(np.float64, (4, 5), elements=st.floats(-10, 10)), st.permutations(range(4)))
    def test_timestep_permutation_invariance(self, s, perm):
        perm = list(perm)
        np.testing.assert_array_equal(enc.pool(s, "MAX").data, enc.pool(s[perm], "MAX").data)
        np.testing.assert_allclose(enc.pool(s, "MEAN").data, enc.pool(s[perm], "MEAN").data, atol=1e-12)


class TestHistogram:
    def test_dominant_first_step(self):
        s = np.vstack([np.full(6, 5.0), np.zeros(6), np.ones(6)])
        assert enc.pool_selection_histogram(s).tolist() == [6, 0, 0]

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-5, 5)))
    def test_counts_sum_to_dim(self, s):
        assert enc.pool_selection_histogram(s).sum() == s.shape[1]

    def test_loop_oracle(self, rng):
        s = rng.normal(size=(5, 20))
        counts = [0] * 5
        for j in range(20):
            counts[int(np.argmax(s[:, j]))] += 1
        assert enc.pool_selection_histogram(s).tolist() == counts

    def test_from_argmax(self):
        assert enc.pool_selection_histogram(np.array([0, 2, 2]), 4).tolist() == [1, 0, 2, 0]


class TestInnerAttention:
    def states(self, rng, T=5, H=6):
        return rng.normal(size=(T, H))

    def attn_params(self, rng, H=6, context=None):
        ctx = rng.normal(size=(H, 4)) if context is None else context
        return {"attn.W": Tensor(rng.normal(size=(H, H))), "attn.b": Tensor(rng.normal(size=H)), "attn.context": Tensor(ctx)}

    def test_weights_sum_to_one(self, rng):
        s = self.states(rng)
        alpha = enc.attention_weights(Tensor(s[None]), self.attn_params(rng)).data
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_context_is_mean_pooling(self, rng):
        s = self.states(rng)
        out = enc.inner_attention(s, self.attn_params(rng, context=np.zeros((6, 4)))).data
        for v in range(4):
            np.testing.assert_allclose(out[v * 6 : (v + 1) * 6], s.mean(axis=0), atol=1e-9)

    def test_saturated_logit_selects_state(self, rng):
        s = self.states(rng)
        # keys are tanh(h_i); only step 2 points along the context direction
        s[:, 0] = -np.abs(s[:, 0])
        s[2, 0] = 10.0
        context = np.zeros((6, 4))
        context[0] = 60.0
        p = {"attn.W": Tensor(np.eye(6)), "attn.b": Tensor(np.zeros(6)), "attn.context": Tensor(context)}
        logits = np.tanh(s) @ context
        assert np.all(logits[2] - np.delete(logits, 2, axis=0) >= 50)
        out = enc.inner_attention(s, p).data
        for v in range(4):
            np.testing.assert_allclose(out[v * 6 : (v + 1) * 6], s[2], atol=1e-9)

    def test_equal_contexts_give_identical_views(self, rng):
        s = self.states(rng)
        col = rng.normal(size=(6, 1))
        out = enc.inner_attention(s, self.attn_params(rng, context=np.tile(col, (1, 4)))).data
        views = out.reshape(4, 6)
        for v in range(1, 4):
            assert np.array_equal(views[v], views[0])

    def test_output_is_four_views(self, rng):
        config, params = make("INNER_ATTENTION")
        vec = enc.encode(config, params, rng.normal(size=(3, 4)))
        assert vec.values.shape == (config.output_dim,)
        assert config.output_dim == 4 * 2 * config.hidden_size


class TestHConvNet:
    def test_output_shape_any_length(self, rng):
        config, params = make("HCONVNET")
        for T in (1, 2, 3, 7):
            vec = enc.encode(config, params, rng.normal(size=(T, 4)))
            assert vec.values.shape == (4 * (config.output_dim // 4),)
            assert np.all(vec.argmax < T)

    def test_first_layer_matches_naive_convolution(self, rng):
        config, params = make("HCONVNET")
        x = rng.normal(size=(5, 4))
        maps = enc.conv_layer_maps(x, params, 0).data
        W, b = params["conv0.W"].data, params["conv0.b"].data
        padded = np.vstack([np.zeros((1, 4)), x, np.zeros((1, 4))])
        expected = np.zeros((5, W.shape[1]))
        for t in range(5):
            for f in range(W.shape[1]):
                acc = b[f]
                for k in range(3):
                    for c in range(4):
                        acc += padded[t + k, c] * W[k * 4 + c, f]
                expected[t, f] = max(acc, 0.0)
        np.testing.assert_allclose(maps, expected, atol=1e-12)

    def test_levels_are_max_of_layer_maps(self, rng):
        config, params = make("HCONVNET")
        x = rng.normal(size=(5, 4))
        vec = enc.encode(config, params, x).values
        F = config.hidden_size
        for layer in range(4):
            maps = enc.conv_layer_maps(x, params, layer).data
            np.testing.assert_allclose(vec[layer * F : (layer + 1) * F], maps.max(axis=0), atol=1e-12)


class TestEncode:
    @pytest.mark.parametrize("kind", enc.KINDS)
    def test_all_kinds_finite_with_declared_dim(self, kind, rng):
        config, params = make(kind)
        vec = enc.encode(config, params, rng.normal(size=(3, 4)))
        assert vec.values.shape == (config.output_dim,)
        assert np.all(np.isfinite(vec.values))
        assert (vec.argmax is not None) == (kind in enc.MAX_POOL_KINDS)

    @pytest.mark.parametrize("kind, dim", [("BILSTM_MAX", 4096), ("LSTM_LAST", 2048)])
    def test_table_dims(self, kind, dim, rng):
        config = enc.EncoderConfig(kind, embed_dim=3, output_dim=dim)
        vec = enc.encode(config, enc.init_params(config), rng.normal(size=(2, 3)))
        assert vec.values.shape == (dim,)

    @pytest.mark.parametrize("kind", enc.KINDS)
    def test_gradients_match_finite_differences(self, kind, rng):
        config, params = make(kind)
        x, lens = enc.pad_batch([rng.normal(size=(t, 4)) for t in (5, 3)])
        w = rng.normal(size=(2, config.output_dim))
        err = nx.grad_check(lambda: (enc.encode_batch(config, params, x, lens) * w).sum(), list(params.values()))
        assert err < 1e-3

    @pytest.mark.parametrize("kind", enc.KINDS)
    def test_batch_equals_single(self, kind, rng):
        config, params = make(kind)
        sents = [rng.normal(size=(t, 4)) for t in (1, 4, 2, 5)]
        batch = enc.SentenceEncoder(config, params).encode_many(sents)
        for i, s in enumerate(sents):
            single = enc.encode(config, params, s)
            np.testing.assert_allclose(batch[i], single.values, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kind", enc.MAX_POOL_KINDS)
    def test_batch_argmax_ignores_padding(self, kind, rng):
        config, params = make(kind)
        sents = [rng.normal(size=(2, 4)), rng.normal(size=(5, 4))]
        x, lens = enc.pad_batch(sents)
        with nx.no_grad():
            out = enc.encode_batch(config, params, x, lens)
        assert np.all(out.argmax[0] < 2)
        np.testing.assert_array_equal(out.argmax[0], enc.encode(config, params, sents[0]).argmax)

    def test_deterministic(self, rng):
        x = rng.normal(size=(4, 4))
        a = enc.encode(*make("BILSTM_MAX", seed=7), x).values
        b = enc.encode(*make("BILSTM_MAX", seed=7), x).values
        assert np.array_equal(a, b)

    def test_seed_changes_parameters(self):
        _, p0 = make("BILSTM_MAX", seed=0)
        _, p1 = make("BILSTM_MAX", seed=1)
        assert not np.array_equal(p0["fwd.W_x"].data, p1["fwd.W_x"].data)

    def test_init_bounds(self):
        _, params = make("LSTM_LAST", embed=9)
        assert np.all(np.abs(params["fwd.W_x"].data) <= 1 / 3)

    def test_freeze_and_copy(self, rng):
        config, params = make("BILSTM_MAX")
        model = enc.SentenceEncoder(config, params)
        twin = model.copy()
        model.freeze()
        assert all(not p.requires_grad for p in model.parameters())
        twin.params["fwd.b"].data[:] = 0.0
        assert not np.array_equal(model.params["fwd.b"].data, twin.params["fwd.b"].data)

    def test_wrong_embed_dim(self, rng):
        config, params = make("BILSTM_MAX")
        with pytest.raises(nx.ShapeError):
            enc.encode(config, params, rng.normal(size=(3, 5)))
