"""Layer-by-layer oracles for the attention-LSTM labeller and its unroll."""

import math

import numpy as np
import pytest

from orderfree import autodiff as ad
from orderfree.autodiff import ContractError, ShapeError, Tape, Tensor, backward, bce_loss
from orderfree.model import (
    AttentionParams,
    FeatureHead,
    FeatureMaps,
    LSTMParams,
    ModelDims,
    ModelParams,
    PredictionHead,
    attention_scores,
    attention_weights,
    context_vector,
    decoder_step,
    feature_map_forward,
    init_params,
    lstm_step,
    predict_step,
    unroll,
)


def tiny_dims(**overrides):
    base = dict(c=4, k=5, H=6, a=3, H_p=7, m=3)
    base.update(overrides)
    return ModelDims(**base)


def random_fm(rng, m, k):
    return FeatureMaps(rng.normal(size=(m, k)))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


class TestFeatureHead:
    def test_zero_params_give_half(self):
        dims = tiny_dims()
        head = FeatureHead(Tensor(np.zeros((dims.c, dims.k))), Tensor(np.zeros(dims.c)))
        fm = random_fm(np.random.default_rng(0), dims.m, dims.k)
        np.testing.assert_array_equal(feature_map_forward(fm, head).data, np.full(dims.c, 0.5))

    def test_single_region_pooling_is_identity(self):
        rng = np.random.default_rng(1)
        fm = FeatureMaps(rng.normal(size=(1, 5)))
        head = FeatureHead(Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=4)))
        got = feature_map_forward(fm, head).data
        want = sigmoid(head.W.data @ fm.values[0] + head.b.data)
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_random_vs_composed_oracle(self):
        rng = np.random.default_rng(2)
        fm = random_fm(rng, 6, 5)
        head = FeatureHead(Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=4)))
        got = feature_map_forward(fm, head).data
        pooled = fm.values.mean(axis=0)
        want = sigmoid(head.W.data @ pooled + head.b.data)
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


class TestAttention:
    def make_params(self, rng, a, k, H):
        return AttentionParams(
            Tensor(rng.normal(size=(a, k))),
            Tensor(rng.normal(size=(a, H))),
            Tensor(rng.normal(size=a)),
            Tensor(rng.normal(size=a)),
        )

    def test_zero_params_give_zero_scores(self):
        theta = AttentionParams(
            Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 6))), Tensor(np.zeros(3)), Tensor(np.zeros(3))
        )
        V = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
        np.testing.assert_array_equal(attention_scores(V, Tensor(np.zeros(6)), theta).data, np.zeros(4))

    def test_zero_hidden_weights_decouple_state(self):
        rng = np.random.default_rng(3)
        theta = self.make_params(rng, 3, 5, 6)
        theta.W_h.data[:] = 0.0
        V = Tensor(rng.normal(size=(4, 5)))
        e1 = attention_scores(V, Tensor(rng.normal(size=6)), theta).data
        e2 = attention_scores(V, Tensor(rng.normal(size=6)), theta).data
        np.testing.assert_array_equal(e1, e2)

    def test_random_vs_per_region_scalar_oracle(self):
        rng = np.random.default_rng(4)
        theta = self.make_params(rng, 3, 5, 6)
        V = Tensor(rng.normal(size=(4, 5)))
        h = Tensor(rng.normal(size=6))
        got = attention_scores(V, h, theta).data
        want = np.array(
            [
                float(theta.w_a.data @ np.tanh(theta.W_v.data @ V.data[i] + theta.W_h.data @ h.data + theta.b_a.data))
                for i in range(4)
            ]
        )
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_weights_uniform_and_analytic(self):
        np.testing.assert_allclose(attention_weights(Tensor([1.5] * 4)).data, [0.25] * 4, atol=1e-15)
        np.testing.assert_allclose(
            attention_weights(Tensor([math.log(3.0), 0.0])).data, [0.75, 0.25], atol=1e-15
        )


class TestContextVector:
    def test_one_hot_selects_region(self):
        rng = np.random.default_rng(5)
        V = Tensor(rng.normal(size=(4, 5)))
        alpha = np.zeros(4)
        alpha[2] = 1.0
        np.testing.assert_array_equal(context_vector(V, Tensor(alpha)).data, V.data[2])

    def test_uniform_is_mean(self):
        rng = np.random.default_rng(6)
        V = Tensor(rng.normal(size=(4, 5)))
        got = context_vector(V, Tensor(np.full(4, 0.25))).data
        np.testing.assert_allclose(got, V.data.mean(axis=0), atol=1e-15)

    def test_random_vs_accumulation_oracle(self):
        rng = np.random.default_rng(7)
        V = Tensor(rng.normal(size=(6, 5)))
        alpha = rng.dirichlet(np.ones(6))
        got = context_vector(V, Tensor(alpha)).data
        want = np.zeros(5)
        for i in range(6):
            want += alpha[i] * V.data[i]
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_mismatched_weights_rejected(self):
        with pytest.raises(ShapeError):
            context_vector(Tensor(np.zeros((4, 5))), Tensor(np.zeros(3)))


def scalar_lstm_oracle(x, h_prev, c_prev, W_x, W_h, b, H):
    """Gate-by-gate scalar reference; rows packed i, f, g, o."""
    gates = [sum(W_x[r][j] * x[j] for j in range(len(x))) + sum(W_h[r][j] * h_prev[j] for j in range(H)) + b[r]
             for r in range(4 * H)]
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    cell, h = [], []
    for j in range(H):
        i = sig(gates[j])
        f = sig(gates[H + j])
        g = math.tanh(gates[2 * H + j])
        o = sig(gates[3 * H + j])
        cj = f * c_prev[j] + i * g
        cell.append(cj)
        h.append(o * math.tanh(cj))
    return np.array(h), np.array(cell)


class TestLstmStep:
    def test_all_zero_inputs_give_zero_state(self):
        H, c, k = 6, 4, 5
        theta = LSTMParams(
            Tensor(np.zeros((4 * H, 2 * c + k))), Tensor(np.zeros((4 * H, H))), Tensor(np.zeros(4 * H))
        )
        h, cell = lstm_step(
            Tensor(np.zeros(c)), Tensor(np.zeros(k)), Tensor(np.zeros(c)),
            Tensor(np.zeros(H)), Tensor(np.zeros(H)), theta,
        )
        np.testing.assert_array_equal(h.data, np.zeros(H))
        np.testing.assert_array_equal(cell.data, np.zeros(H))

    def test_output_dims(self):
        rng = np.random.default_rng(8)
        H, c, k = 6, 4, 5
        theta = LSTMParams(
            Tensor(rng.normal(size=(4 * H, 2 * c + k))),
            Tensor(rng.normal(size=(4 * H, H))),
            Tensor(rng.normal(size=4 * H)),
        )
        h, cell = lstm_step(
            Tensor(rng.normal(size=c)), Tensor(rng.normal(size=k)), Tensor(np.zeros(c)),
            Tensor(rng.normal(size=H)), Tensor(rng.normal(size=H)), theta,
        )
        assert h.data.shape == (H,) and cell.data.shape == (H,)

    def test_random_vs_scalar_gate_oracle(self):
        rng = np.random.default_rng(9)
        H, c, k = 5, 3, 4
        theta = LSTMParams(
            Tensor(rng.normal(size=(4 * H, 2 * c + k))),
            Tensor(rng.normal(size=(4 * H, H))),
            Tensor(rng.normal(size=4 * H)),
        )
        v_pred = rng.uniform(0, 1, size=c)
        z = rng.normal(size=k)
        y_prev = np.array([1.0, 0.0, 1.0])
        h_prev = rng.normal(size=H)
        c_prev = rng.normal(size=H)
        h, cell = lstm_step(
            Tensor(v_pred), Tensor(z), Tensor(y_prev), Tensor(h_prev), Tensor(c_prev), theta
        )
        x = np.concatenate([v_pred, z, y_prev])
        h_want, c_want = scalar_lstm_oracle(
            x.tolist(), h_prev.tolist(), c_prev.tolist(),
            theta.W_x.data.tolist(), theta.W_h.data.tolist(), theta.b.data.tolist(), H,
        )
        np.testing.assert_allclose(h.data, h_want, atol=1e-12, rtol=0)
        np.testing.assert_allclose(cell.data, c_want, atol=1e-12, rtol=0)


class TestPredictStep:
    def test_zero_params_give_zero_logits(self):
        c, k, H, H_p = 4, 5, 6, 7
        theta = PredictionHead(
            Tensor(np.zeros((H_p, 2 * c + k + H))), Tensor(np.zeros(H_p)),
            Tensor(np.zeros((c, H_p))), Tensor(np.zeros(c)),
        )
        p = predict_step(
            Tensor(np.ones(c)), Tensor(np.ones(k)), Tensor(np.zeros(c)), Tensor(np.ones(H)), theta
        )
        np.testing.assert_array_equal(p.data, np.zeros(c))

    def test_output_length_is_label_count(self):
        rng = np.random.default_rng(10)
        c, k, H, H_p = 4, 5, 6, 7
        theta = PredictionHead(
            Tensor(rng.normal(size=(H_p, 2 * c + k + H))), Tensor(rng.normal(size=H_p)),
            Tensor(rng.normal(size=(c, H_p))), Tensor(rng.normal(size=c)),
        )
        p = predict_step(
            Tensor(rng.normal(size=c)), Tensor(rng.normal(size=k)), Tensor(np.zeros(c)),
            Tensor(rng.normal(size=H)), theta,
        )
        assert p.data.shape == (c,)

    def test_random_vs_two_layer_oracle(self):
        rng = np.random.default_rng(11)
        c, k, H, H_p = 3, 4, 5, 6
        theta = PredictionHead(
            Tensor(rng.normal(size=(H_p, 2 * c + k + H))), Tensor(rng.normal(size=H_p)),
            Tensor(rng.normal(size=(c, H_p))), Tensor(rng.normal(size=c)),
        )
        v_pred = rng.uniform(0, 1, size=c)
        z = rng.normal(size=k)
        y_prev = np.array([0.0, 1.0, 0.0])
        h = rng.normal(size=H)
        got = predict_step(Tensor(v_pred), Tensor(z), Tensor(y_prev), Tensor(h), theta).data
        q = np.concatenate([v_pred, z, y_prev, h])
        want = theta.W2.data @ np.maximum(theta.W1.data @ q + theta.b1.data, 0.0) + theta.b2.data
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


class TestUnroll:
    def test_selections_pairwise_distinct(self):
        rng = np.random.default_rng(12)
        for trial in range(20):
            dims = tiny_dims()
            params = init_params(dims, seed=trial)
            fm = random_fm(rng, dims.m, dims.k)
            states = unroll(fm, params, dims.c)
            labels = [s.label for s in states]
            assert len(set(labels)) == dims.c

    def test_single_region_attention_is_trivial(self):
        dims = tiny_dims(m=1)
        params = init_params(dims, seed=0)
        fm = random_fm(np.random.default_rng(13), 1, dims.k)
        for state in unroll(fm, params, 3):
            np.testing.assert_array_equal(state.alpha.data, [1.0])
            np.testing.assert_allclose(state.z.data, fm.values[0], atol=1e-15)

    def test_two_step_unroll_vs_manual_composition(self):
        dims = tiny_dims()
        params = init_params(dims, seed=3)
        fm = random_fm(np.random.default_rng(14), dims.m, dims.k)
        states = unroll(fm, params, 2)

        # compose the five sub-operations by hand
        from orderfree.decode import CandidatePool, pool_select, pool_update

        V = Tensor(fm.values)
        v_prob = feature_map_forward(fm, params.theta_R)
        h, cell = Tensor(np.zeros(dims.H)), Tensor(np.zeros(dims.H))
        y_hard = np.zeros(dims.c)
        pool = CandidatePool.full(dims.c)
        v_pred = v_prob
        for state in states:
            eps = attention_scores(V, h, params.theta_a)
            alpha = attention_weights(eps)
            z = context_vector(V, alpha)
            h, cell = lstm_step(v_pred, z, Tensor(y_hard), h, cell, params.theta_L)
            p = predict_step(v_pred, z, Tensor(y_hard), h, params.theta_p)
            label = pool_select(p, pool)
            pool = pool_update(pool, label)
            y_hard = y_hard.copy()
            y_hard[label] = 1.0
            assert label == state.label
            for got, want in ((state.alpha, alpha), (state.z, z), (state.h, h), (state.cell, cell), (state.p, p)):
                np.testing.assert_allclose(got.data, want.data, atol=1e-12, rtol=0)
            v_pred = ad.sigmoid(p)

    def test_v_pred_chains_through_sigmoid(self):
        dims = tiny_dims()
        params = init_params(dims, seed=4)
        fm = random_fm(np.random.default_rng(15), dims.m, dims.k)
        states = unroll(fm, params, 3)
        v_prob = feature_map_forward(fm, params.theta_R)
        np.testing.assert_array_equal(states[0].v_pred.data, v_prob.data)
        for prev, cur in zip(states, states[1:]):
            np.testing.assert_allclose(cur.v_pred.data, sigmoid(prev.p.data), atol=1e-15)

    def test_step_state_invariants(self):
        dims = tiny_dims()
        params = init_params(dims, seed=5)
        fm = random_fm(np.random.default_rng(16), dims.m, dims.k)
        for state in unroll(fm, params, dims.c):
            assert abs(state.alpha.data.sum() - 1.0) < 1e-9
            assert int(state.y_hard.sum()) == state.t
            assert len(state.pool) == dims.c - state.t
            probs = sigmoid(state.p.data)
            assert np.all((probs > 0.0) & (probs < 1.0))

    def test_forced_order_validation(self):
        dims = tiny_dims()
        params = init_params(dims, seed=6)
        fm = random_fm(np.random.default_rng(17), dims.m, dims.k)
        with pytest.raises(ContractError):
            unroll(fm, params, 2, forced_order=[1, 1])
        with pytest.raises(ContractError):
            unroll(fm, params, 2, forced_order=[0, dims.c])
        with pytest.raises(ContractError):
            unroll(fm, params, 2, forced_order=[0])

    def test_region_permutation_permutes_alpha(self):
        # with zeroed hidden projection, scores depend only on region content
        dims = tiny_dims()
        params = init_params(dims, seed=7)
        rng = np.random.default_rng(18)
        values = rng.normal(size=(dims.m, dims.k))
        perm = rng.permutation(dims.m)
        V1, V2 = Tensor(values), Tensor(values[perm])
        h = Tensor(rng.normal(size=dims.H))
        a1 = attention_weights(attention_scores(V1, h, params.theta_a)).data
        a2 = attention_weights(attention_scores(V2, h, params.theta_a)).data
        np.testing.assert_allclose(a2, a1[perm], atol=1e-12)
        # uniform weights leave the context invariant under permutation
        uni = Tensor(np.full(dims.m, 1.0 / dims.m))
        np.testing.assert_allclose(
            context_vector(V1, uni).data, context_vector(V2, uni).data, atol=1e-12
        )


class TestGradients:
    def loss_fn(self, fm, params, y, **kwargs):
        def f():
            states = unroll(fm, params, 3, **kwargs)
            total = bce_loss(states[0].p, y)
            for s in states[1:]:
                total = ad.add(total, bce_loss(s.p, y))
            return total

        return f

    def test_three_step_unroll_all_groups_vs_fd(self):
        dims = tiny_dims()
        params = init_params(dims, seed=8)
        fm = random_fm(np.random.default_rng(19), dims.m, dims.k)
        y = np.array([1.0, 0.0, 1.0, 1.0])
        f = self.loss_fn(fm, params, y, keep_prob=0.8, dropout_seed=99)
        assert ad.grad_check(f, params.all_tensors(), eps=1e-5) < 1e-4

    def test_attention_off_gives_zero_attention_grads(self):
        dims = tiny_dims()
        params = init_params(dims, seed=9)
        fm = random_fm(np.random.default_rng(20), dims.m, dims.k)
        y = np.array([1.0, 0.0, 0.0, 1.0])
        f = self.loss_fn(fm, params, y, attention_on=False)
        with Tape() as tape:
            loss = f()
        grads = backward(tape, loss, params.group_tensors("theta_a"))
        for g in grads:
            assert np.all(g == 0.0)
        # perturbing the attention parameters changes nothing
        before = loss.item()
        params.theta_a.W_v.data += 10.0
        assert f().item() == before

    def test_frozen_feature_head_gets_exact_zero(self):
        dims = tiny_dims()
        params = init_params(dims, seed=10)
        fm = random_fm(np.random.default_rng(21), dims.m, dims.k)
        y = np.array([0.0, 1.0, 1.0, 0.0])
        f = self.loss_fn(fm, params, y, freeze_feature_head=True)
        with Tape() as tape:
            loss = f()
        grads = backward(tape, loss, params.group_tensors("theta_R"))
        for g in grads:
            assert np.all(g == 0.0)


class TestDecoderStepSharing:
    def test_unroll_routes_through_decoder_step(self, monkeypatch):
        from orderfree import model as model_mod

        calls = []
        original = model_mod.decoder_step

        def spy(*args, **kwargs):
            calls.append(1)
            return original(*args, **kwargs)

        monkeypatch.setattr(model_mod, "decoder_step", spy)
        dims = tiny_dims()
        params = init_params(dims, seed=11)
        fm = random_fm(np.random.default_rng(22), dims.m, dims.k)
        unroll(fm, params, 3)
        assert len(calls) == 3
