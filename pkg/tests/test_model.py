import numpy as np
import pytest

from grounded_mmt import autodiff as ad
from grounded_mmt import model as mq
from grounded_mmt.autodiff import Tensor
from grounded_mmt.vocab import EOS, PAD

from gradcheck import check_param_grads


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gru_np(x, h, P, pre):
    gx = x @ P[f"{pre}.Wx"] + P[f"{pre}.bx"]
    gh = h @ P[f"{pre}.Wh"] + P[f"{pre}.bh"]
    n = h.shape[-1]
    r = _sigmoid(gx[:n] + gh[:n])
    z = _sigmoid(gx[n:2 * n] + gh[n:2 * n])
    cand = np.tanh(gx[2 * n:] + r * gh[2 * n:])
    return (1 - z) * cand + z * h


def _attend_np(P, h_prime, v, S):
    scores = np.array([float(np.tanh(h_prime @ P["att.W_h"] + s @ P["att.W_s"]) @ P["att.W_a"][:, 0]) for s in S])
    a = np.exp(scores - scores.max())
    a /= a.sum()
    ctx = (a[:, None] * S).sum(axis=0)
    gate = np.tanh(v @ P["att.W_feat"])
    return (ctx * gate) @ P["att.W_c"], a


def _randomize_biases(p, rng, scale=0.1):
    for k, t in p.tensors.items():
        if t.ndim == 1:
            t.data = rng.normal(0, scale, size=t.shape)


@pytest.fixture
def small():
    dims = mq.ModelDims(src_vocab=9, tgt_vocab=8, emb=4, enc_hidden=3, dec_hidden=5, bottleneck=4, feat_dim=6)
    rng = np.random.default_rng(5)
    p = mq.ModelQParams.init(dims, rng)
    _randomize_biases(p, rng)
    return p


def _np_params(p):
    return {k: t.data for k, t in p.tensors.items()}


class TestShapes:
    def test_large_preset_annotation(self):
        dims = mq.ModelDims.preset("paper", 10, 10)
        assert dims.annotation == 1024 and dims.feat_dim == 2048
        p = mq.ModelQParams.init(dims, np.random.default_rng(0))
        assert p["att.W_feat"].shape == (2048, 1024)
        assert p["att.W_c"].shape == (1024, 512)
        S = mq.encode(p, np.array([4, 5, 6]))
        assert S.shape == (3, 1024)

    def test_desk_preset(self):
        dims = mq.ModelDims.preset("desk", 10, 12)
        assert (dims.emb, dims.enc_hidden, dims.dec_hidden, dims.feat_dim) == (32, 64, 64, 64)
        with pytest.raises(mq.ModelError):
            mq.ModelDims.preset("huge", 1, 1)

    def test_glorot_range(self):
        w = mq.glorot(np.random.default_rng(0), 30, 70)
        assert np.abs(w).max() <= np.sqrt(6 / 100)

    def test_out_of_range_ids(self, small):
        with pytest.raises(mq.ModelError):
            mq.encode(small, np.array([4, 99]))


class TestEncoder:
    def test_zero_weights_give_zero_annotations(self, small):
        for t in small.tensors.values():
            t.data = np.zeros_like(t.data)
        S = mq.encode(small, np.array([4, 5, 6, 7]))
        assert not S.data.any()

    def test_matches_dense_transcription(self, small):
        P = _np_params(small)
        x = [4, 7, 5]
        E = P["src_emb"][x]
        H = 3
        fwd, h = [], np.zeros(H)
        for e in E:
            h = _gru_np(e, h, P, "enc_fwd")
            fwd.append(h)
        bwd, h = [None] * 3, np.zeros(H)
        for t in (2, 1, 0):
            h = _gru_np(E[t], h, P, "enc_bwd")
            bwd[t] = h
        expected = np.hstack([np.array(fwd), np.array(bwd)])
        np.testing.assert_allclose(mq.encode(small, np.array(x)).data, expected, atol=1e-12)

    def test_reversal_swaps_directions(self, small):
        for suffix in ("Wx", "Wh", "bx", "bh"):
            small[f"enc_bwd.{suffix}"].data = small[f"enc_fwd.{suffix}"].data.copy()
        x = np.array([4, 7, 5])
        S = mq.encode(small, x).data
        R = mq.encode(small, x[::-1].copy()).data
        H = 3
        np.testing.assert_allclose(R[:, :H], S[::-1, H:], atol=1e-12)
        np.testing.assert_allclose(R[:, H:], S[::-1, :H], atol=1e-12)

    def test_padding_does_not_leak(self, small):
        x = np.array([[4, 5, PAD, PAD], [6, 7, 8, 4]])
        mask = (x != PAD).astype(float)
        S = mq.encode(small, x, mask).data
        alone = mq.encode(small, np.array([4, 5])).data
        np.testing.assert_allclose(S[0, :2], alone, atol=1e-12)


class TestAttention:
    def test_single_row(self, small, rng):
        S = rng.normal(size=(1, 6))
        v = rng.random(6)
        c, a = mq.attend_single(small, rng.normal(size=5), v, S)
        assert a.data[0] == 1.0
        expected = (S[0] * np.tanh(v @ small["att.W_feat"].data)) @ small["att.W_c"].data
        np.testing.assert_allclose(c.data, expected, atol=1e-12)

    def test_zero_features_annihilate_context(self, small, rng):
        c, _ = mq.attend_single(small, rng.normal(size=5), np.zeros(6), rng.normal(size=(4, 6)))
        assert not c.data.any()

    def test_matches_dense_oracle(self, small, rng):
        S = rng.normal(size=(4, 6))
        v = rng.random(6)
        hp = rng.normal(size=5)
        c, a = mq.attend_single(small, hp, v, S)
        c_ref, a_ref = _attend_np(_np_params(small), hp, v, S)
        np.testing.assert_allclose(c.data, c_ref, atol=1e-12)
        np.testing.assert_allclose(a.data, a_ref, atol=1e-12)

    def test_masked_rows(self, small, rng):
        S = rng.normal(size=(5, 6))
        mask = np.array([1, 1, 0, 1, 0])
        _, a = mq.attend_single(small, rng.normal(size=5), rng.random(6), S, mask)
        assert a.data[2] == 0.0 and a.data[4] == 0.0
        assert abs(a.data.sum() - 1.0) < 1e-12
        with pytest.raises(mq.ModelError):
            mq.attend_single(small, rng.normal(size=5), rng.random(6), S, np.zeros(5))

    def test_gate_range(self, small, rng):
        gate = mq.visual_gate(small, rng.normal(size=(3, 6)))
        assert (np.abs(gate.data) <= 1).all() and gate.data.shape == (3, 6)

    def test_feature_dimension_checked(self, small):
        with pytest.raises(mq.ModelError, match="expected 6, got 4"):
            mq.visual_gate(small, np.ones(4))


def _state(p, x, v):
    S = mq.encode(p, np.asarray(x)[None, :])
    return mq.init_state(p, mq.prepare_attention(p, S, np.asarray(v)[None, :]))


class TestDecodeStep:
    def test_distribution(self, small, rng):
        probs, _ = mq.decode_step(small, [1], _state(small, [4, 5], rng.random(6)))
        assert abs(probs.data.sum() - 1.0) < 1e-12
        assert (probs.data >= 0).all()

    def test_zero_projection_is_uniform(self, small, rng):
        small["W_proj"].data[:] = 0
        small["b_proj"].data[:] = 0
        probs, _ = mq.decode_step(small, [1], _state(small, [4, 5], rng.random(6)))
        np.testing.assert_allclose(probs.data, 1 / 8)

    def test_state_evolves(self, small, rng):
        st0 = _state(small, [4, 5], rng.random(6))
        _, st1 = mq.decode_step(small, [5], st0)
        _, st2 = mq.decode_step(small, [5], st1)
        assert not np.allclose(st1.h.data, st2.h.data)

    def test_deterministic_without_dropout(self, small, rng):
        st = _state(small, [4, 5], rng.random(6))
        a, _ = mq.decode_step(small, [5], st)
        b, _ = mq.decode_step(small, [5], st)
        np.testing.assert_array_equal(a.data, b.data)

    def test_matches_dense_cgru(self, small, rng):
        P = _np_params(small)
        v = rng.random(6)
        st = _state(small, [4, 5, 6], v)
        S = st.cache.S.data[0]
        probs, new = mq.decode_step(small, [3], st)
        h1 = _gru_np(P["tgt_emb"][3], np.zeros(5), P, "dec_gru1")
        c, _ = _attend_np(P, h1, v, S)
        h2 = _gru_np(c, h1, P, "dec_gru2")
        b = np.tanh(h2 @ P["W_bot"] + P["b_bot"])
        logits = b @ P["W_proj"] + P["b_proj"]
        ref = np.exp(logits - logits.max())
        np.testing.assert_allclose(probs.data[0], ref / ref.sum(), atol=1e-12)
        np.testing.assert_allclose(new.h.data[0], h2, atol=1e-12)


class TestLoss:
    def test_uniform(self):
        V, n = 7, 5
        dists = [Tensor(np.full(V, 1 / V)) for _ in range(n)]
        loss = mq.translation_loss(np.array([4, 5, 6, 4, 2]), dists)
        assert loss.data == pytest.approx(n * np.log(V), rel=1e-12)

    def test_one_hot(self):
        y = np.array([4, 2])
        dists = [Tensor(np.eye(6)[t]) for t in y]
        assert float(mq.translation_loss(y, dists).data) == 0.0

    def test_padding_excluded_and_additive(self, rng):
        def dist():
            p = rng.random(6)
            return p / p.sum()

        d = [np.stack([dist(), dist()]) for _ in range(3)]
        y = np.array([[4, 5, 2], [3, 2, PAD]])
        both = mq.translation_loss(y, [Tensor(x) for x in d])
        one = mq.translation_loss(y[0], [Tensor(x[0]) for x in d])
        two = mq.translation_loss(y[1, :2], [Tensor(x[1]) for x in d[:2]])
        assert float(both.data) == pytest.approx(float(one.data + two.data), rel=1e-12)

    def test_floor_counter(self):
        counter = []
        loss = mq.translation_loss(np.array([1]), [Tensor(np.array([1.0, 0.0]))], counter)
        assert counter == [1]
        assert float(loss.data) == pytest.approx(-np.log(1e-12))

    def test_forward_batch_matches_stepwise(self, small, rng):
        src = np.array([[4, 5, 6], [7, 8, PAD]])
        tgt = np.array([[4, 5, EOS], [6, EOS, PAD]])
        feats = rng.random((2, 6))
        res = mq.forward_batch(small, src, (src != PAD).astype(float), tgt, (tgt != PAD).astype(float), feats)
        total = 0.0
        for i, (x, y) in enumerate((([4, 5, 6], [4, 5, EOS]), ([7, 8], [6, EOS]))):
            st = _state(small, x, feats[i])
            prev, dists = 1, []
            for tok in y:
                pr, st = mq.decode_step(small, [prev], st)
                dists.append(ad.getitem(pr, 0))
                prev = tok
            total += float(mq.translation_loss(np.array(y), dists).data)
            h = mq.final_state(small, x, feats[i], y).data
            np.testing.assert_allclose(res.h_T.data[i], h, atol=1e-12)
        assert float(res.loss.data) == pytest.approx(total, rel=1e-12)
        assert res.n_tokens == 5

    def test_gradient_matches_finite_differences(self, small, rng):
        src = np.array([[4, 5, 6], [7, 8, PAD]])
        tgt = np.array([[4, 5, EOS], [6, EOS, PAD]])
        feats = rng.random((2, 6))

        def loss():
            return mq.forward_batch(small, src, (src != PAD).astype(float), tgt,
                                    (tgt != PAD).astype(float), feats).loss

        errs = check_param_grads(loss, small.tensors, max_entries=12)
        assert set(errs) == set(small.tensors)
        bad = {k: e for k, e in errs.items() if e >= 1e-4}
        assert not bad, bad


class TestVisualSwitch:
    def test_zero_features_make_output_feature_independent(self, small, rng):
        x = np.array([4, 5, 6])
        out_a, _ = mq.translate(x, np.zeros(6), small, max_len=6)
        small_b = small.copy()
        out_b, _ = mq.translate(x, np.zeros(6), small_b, max_len=6)
        assert out_a == out_b
        probs, _ = mq.decode_step(small, [1], _state(small, x, np.zeros(6)))
        small["att.W_feat"].data = rng.normal(size=small["att.W_feat"].shape)
        probs2, _ = mq.decode_step(small, [1], _state(small, x, np.zeros(6)))
        np.testing.assert_array_equal(probs.data, probs2.data)

    def test_no_v_ignores_features(self, small, rng):
        x = np.array([4, 5, 6])
        a, _ = mq.translate(x, rng.random(6), small, use_visual=False, max_len=6)
        b, _ = mq.translate(x, rng.random(6), small, use_visual=False, max_len=6)
        assert a == b


class TestTranslate:
    def test_beam_one_is_greedy(self, small, rng):
        for _ in range(5):
            x = rng.integers(4, 9, size=4)
            v = rng.random(6)
            g, hg = mq.translate(x, v, small, "greedy", max_len=8)
            b, hb = mq.translate(x, v, small, "beam", beam=1, max_len=8)
            assert g == b
            np.testing.assert_allclose(hg, hb)

    def test_identical_ensemble(self, small, rng):
        x = rng.integers(4, 9, size=4)
        v = rng.random(6)
        single, h1 = mq.translate(x, v, small, max_len=8)
        ens, h3 = mq.translate(x, v, [small, small.copy(), small.copy()], max_len=8)
        assert single == ens
        np.testing.assert_allclose(h1, h3, atol=1e-12)

    def test_beam_runs(self, small, rng):
        out, h = mq.translate(rng.integers(4, 9, size=4), rng.random(6), small, "beam", beam=3, max_len=8)
        assert len(out) <= 8 and h.shape == (5,)
        assert EOS not in out

    def test_mixed_ensemble_rejected(self, small):
        other = mq.ModelQParams.init(mq.ModelDims(9, 10, 4, 3, 5, 4, 6), np.random.default_rng(0))
        with pytest.raises(mq.ModelError):
            mq.translate([4, 5], np.ones(6), [small, other])

    def test_greedy_batch_matches_single(self, small, rng):
        src = np.array([[4, 5, 6], [7, 8, PAD]])
        feats = rng.random((2, 6))
        out = mq.greedy_batch(small, src, (src != PAD).astype(float), feats, max_len=7)
        for i, x in enumerate(([4, 5, 6], [7, 8])):
            assert out[i] == mq.translate(np.array(x), feats[i], small, max_len=7)[0]

    def test_greedy_h_T_is_final_state(self, small, rng):
        x = np.array([4, 5])
        v = rng.random(6)
        y, h = mq.translate(x, v, small, max_len=5)
        if len(y) < 5:
            np.testing.assert_allclose(h, mq.final_state(small, x, v, y + [EOS]).data, atol=1e-12)
