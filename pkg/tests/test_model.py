import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storyseq import data, model
from storyseq.errors import ConfigError, DataContractError, EmptySequenceError, TokenIndexError
from storyseq.numerics import Tape, Tensor, mul, softmax, sum_all
from storyseq.recurrent import embed, gru_run, gru_step


def ids_batch(rng, cfg, b, lengths=None):
    words = np.arange(4, cfg.vocab_size)
    lengths = lengths or [int(rng.integers(0, cfg.max_sentence_len + 1)) for _ in range(b)]
    return np.stack([data.encode_ids(rng.choice(words, size=k), cfg.max_sentence_len) for k in lengths])


def scaled(params, rng, scale=0.7):
    """Same config, every tensor redrawn so biases and gates are all exercised."""
    return params.replace({k: Tensor(rng.uniform(-scale, scale, v.shape)) for k, v in params.tensors.items()})


class TestConfig:
    def test_default_sizes(self):
        cfg = model.ModelConfig(vocab_size=100)
        assert (cfg.img_hidden, cfg.sent_hidden, cfg.dec_hidden) == (1024, 512, 1536)
        assert cfg.feature_dim == 4096 and cfg.seq_len == 22

    def test_rejects_bad_concat_width(self):
        with pytest.raises(ConfigError):
            model.ModelConfig(vocab_size=10, img_hidden=1024, sent_hidden=512, dec_hidden=1500)

    @pytest.mark.parametrize("field,value", [("window", 0), ("max_sentence_len", 0), ("dropout_in", 1.0),
                                             ("img_layers", 3), ("vocab_size", 4)])
    def test_rejects_invalid(self, field, value):
        with pytest.raises(ConfigError):
            model.ModelConfig(**{"vocab_size": 10, field: value})

    def test_dict_round_trip(self):
        cfg = model.ModelConfig.toy(20, window=2)
        assert model.ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_parameter_names_stable(self, tiny_config):
        names = model.parameter_names(tiny_config)
        assert len(names) == 1 + 5 * 9 + 2
        assert names == model.init_params(tiny_config).names()
        assert list(model.parameter_shapes(tiny_config)) == names

    def test_params_shape_validated(self, tiny_params):
        with pytest.raises(ConfigError):
            tiny_params.replace({"out.b": Tensor(np.zeros(3))})


class TestEncodeImages:
    def test_zero_params_zero_states(self, tiny_config, rng):
        states = model.encode_images(model.zero_params(tiny_config), rng.standard_normal((2, 3, 5)))
        assert len(states) == 2
        for s in states:
            npt.assert_array_equal(s.data, np.zeros((2, 3)))

    def test_single_image_is_one_stacked_step(self, tiny_params, rng):
        x = rng.standard_normal((2, 1, 5))
        h0 = Tensor(np.zeros((2, 3)))
        s0 = gru_step(tiny_params.gru("img_enc.0"), Tensor(x[:, 0]), h0)
        s1 = gru_step(tiny_params.gru("img_enc.1"), s0, h0)
        states = model.encode_images(tiny_params, x)
        npt.assert_array_equal(states[0].data, s0.data)
        npt.assert_array_equal(states[1].data, s1.data)

    def test_three_images_composition(self, tiny_params, rng):
        x = rng.standard_normal((2, 3, 5))
        mid, f0 = gru_run(tiny_params.gru("img_enc.0"), Tensor(x), Tensor(np.zeros((2, 3))))
        _, f1 = gru_run(tiny_params.gru("img_enc.1"), mid, Tensor(np.zeros((2, 3))))
        states = model.encode_images(tiny_params, x)
        npt.assert_array_equal(states[0].data, f0.data)
        npt.assert_array_equal(states[1].data, f1.data)

    def test_empty_window(self, tiny_params):
        with pytest.raises(EmptySequenceError):
            model.encode_images(tiny_params, np.zeros((1, 0, 5)))

    def test_window_too_long(self, tiny_params):
        with pytest.raises(DataContractError):
            model.encode_images(tiny_params, np.zeros((1, 4, 5)))


class TestEncodePrevSentence:
    def test_all_null_zero_params(self, tiny_config):
        out = model.encode_prev_sentence(model.zero_params(tiny_config), np.zeros((2, 6), dtype=int))
        npt.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_identical_rows(self, tiny_params, tiny_config, rng):
        ids = ids_batch(rng, tiny_config, 1)
        out = model.encode_prev_sentence(tiny_params, np.vstack([ids, ids]))
        npt.assert_array_equal(out.data[0], out.data[1])

    def test_embed_fold_oracle(self, tiny_params, tiny_config, rng):
        ids = ids_batch(rng, tiny_config, 3)
        x = embed(tiny_params.embedding, ids)
        cell = tiny_params.gru("sent_enc")
        h = Tensor(np.zeros((3, 2)))
        for t in range(ids.shape[1]):
            h = gru_step(cell, Tensor(x.data[:, t]), h)
        npt.assert_array_equal(model.encode_prev_sentence(tiny_params, ids).data, h.data)

    def test_bad_token(self, tiny_params):
        with pytest.raises(TokenIndexError):
            model.encode_prev_sentence(tiny_params, [[1, 9, 2]])


class TestInitDecoderState:
    def test_default_widths(self):
        img = [Tensor(np.zeros((1, 1024)))] * 2
        states = model.init_decoder_state(img, Tensor(np.zeros((1, 512))), 1536)
        assert [s.shape for s in states] == [(1, 1536), (1, 1536)]

    def test_zero_inputs(self):
        states = model.init_decoder_state([Tensor(np.zeros((2, 3)))] * 2, Tensor(np.zeros((2, 2))))
        for s in states:
            npt.assert_array_equal(s.data, 0.0)

    def test_layout(self, rng):
        a, b, s = (rng.standard_normal((2, k)) for k in (3, 3, 2))
        states = model.init_decoder_state([Tensor(a), Tensor(b)], Tensor(s))
        npt.assert_array_equal(states[0].data, np.hstack([a, s]))
        npt.assert_array_equal(states[1].data, np.hstack([b, s]))

    def test_width_mismatch(self):
        with pytest.raises(ConfigError):
            model.init_decoder_state([Tensor(np.zeros((1, 1024)))] * 2, Tensor(np.zeros((1, 500))), 1536)

    def test_batch_mismatch(self):
        with pytest.raises(ConfigError):
            model.init_decoder_state([Tensor(np.zeros((2, 3)))] * 2, Tensor(np.zeros((1, 2))))

    def test_gradient_split(self, rng):
        img = [Tensor(rng.standard_normal((1, 3)), requires_grad=True) for _ in range(2)]
        sent = Tensor(rng.standard_normal((1, 2)), requires_grad=True)
        w = rng.standard_normal((1, 5))
        with Tape() as tape:
            states = model.init_decoder_state(img, sent)
            loss = sum_all(mul(states[0], Tensor(w)))
        g_img0, g_img1, g_sent = tape.gradient(loss, [img[0], img[1], sent])
        npt.assert_array_equal(g_img0, w[:, :3])
        npt.assert_array_equal(g_img1, 0.0)
        npt.assert_array_equal(g_sent, w[:, 3:])


def decoder_inputs(params, rng, b=2):
    cfg = params.config
    img = model.encode_images(params, rng.standard_normal((b, 2, cfg.feature_dim)))
    sent = model.encode_prev_sentence(params, ids_batch(rng, cfg, b))
    return model.init_decoder_state(img, sent, cfg.dec_hidden)


class TestDecoder:
    def test_logits_shape(self, tiny_params, tiny_config, rng):
        logits = model.decode_teacher_forced(tiny_params, decoder_inputs(tiny_params, rng, 3),
                                             ids_batch(rng, tiny_config, 3))
        assert logits.shape == (3, 5, 9)

    def test_full_size_shape(self, rng):
        cfg = model.ModelConfig.toy(11, max_sentence_len=20)
        params = model.init_params(cfg)
        logits = model.decode_teacher_forced(params, decoder_inputs(params, rng), ids_batch(rng, cfg, 2))
        assert logits.shape == (2, 21, 11)

    def test_zero_params_loss_is_log_v(self, tiny_config, rng):
        params = model.zero_params(tiny_config)
        insts = [data.TrainingInstance(rng.standard_normal((2, 5)), ids_batch(rng, tiny_config, 1)[0],
                                       ids_batch(rng, tiny_config, 1)[0]) for _ in range(3)]
        loss = model.batch_loss(params, model.Batch.of(insts))
        assert abs(loss.item() - math.log(9)) < 1e-12

    def test_missing_start(self, tiny_params, tiny_config, rng):
        ids = ids_batch(rng, tiny_config, 2)
        ids[1, 0] = 4
        with pytest.raises(DataContractError):
            model.decode_teacher_forced(tiny_params, decoder_inputs(tiny_params, rng), ids)

    def test_step_matches_teacher_forced(self, tiny_params, tiny_config, rng):
        params = scaled(tiny_params, rng)
        states = decoder_inputs(params, rng)
        ids = ids_batch(rng, tiny_config, 2, lengths=[4, 4])
        logits = model.decode_teacher_forced(params, states, ids)
        for t in range(ids.shape[1] - 1):
            states, probs = model.decode_step(params, states, ids[:, t])
            want = softmax(Tensor(logits.data[:, t])).data
            npt.assert_allclose(probs.data, want, rtol=0, atol=1e-12)
            npt.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-9)

    def test_constructed_projection_forces_b_after_a(self):
        cfg = model.ModelConfig(vocab_size=7, feature_dim=2, embed_dim=3, img_hidden=2, sent_hidden=1,
                                dec_hidden=3, max_sentence_len=4, dropout_in=0.0, dropout_pre_softmax=0.0)
        params = model.zero_params(cfg)
        a, b = 4, 5
        emb = np.zeros((7, 3))
        emb[a, 0] = 3.0
        wh0 = np.zeros((3, 3))
        wh0[0, 0] = 3.0
        wh1 = np.zeros((3, 3))
        wh1[0, 0] = 3.0
        out = np.zeros((3, 7))
        out[0, b] = 10.0
        params = params.replace({"embedding": Tensor(emb), "dec.0.Wh": Tensor(wh0), "dec.1.Wh": Tensor(wh1),
                                 "out.W": Tensor(out)})
        states = [Tensor(np.zeros((1, 3)))] * 2
        _, probs = model.decode_step(params, states, a)
        assert int(np.argmax(probs.data[0])) == b

    def test_step_bad_token(self, tiny_params):
        with pytest.raises(TokenIndexError):
            model.decode_step(tiny_params, [Tensor(np.zeros((1, 5)))] * 2, 99)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 4.0))
    def test_decoder_states_in_unit_box(self, seed, scale):
        rng = np.random.default_rng(seed)
        cfg = model.ModelConfig(vocab_size=9, feature_dim=5, embed_dim=4, img_hidden=3, sent_hidden=2,
                                dec_hidden=5, max_sentence_len=4, dropout_in=0.0, dropout_pre_softmax=0.0)
        params = scaled(model.zero_params(cfg), rng, scale)
        states = decoder_inputs(params, rng)
        for s in states:
            assert np.all(np.abs(s.data) <= 1.0)
        for tok in rng.integers(0, 9, size=6):
            states, _ = model.decode_step(params, states, [tok, tok])
            for s in states:
                assert np.all(np.abs(s.data) <= 1.0)


class TestDropout:
    def test_training_mode_changes_loss_inference_does_not(self, tiny_config, rng):
        cfg = model.ModelConfig.from_dict({**tiny_config.to_dict(), "dropout_in": 0.3,
                                           "dropout_pre_softmax": 0.5})
        params = model.init_params(cfg, 1)
        insts = [data.TrainingInstance(rng.standard_normal((3, 5)), ids_batch(rng, cfg, 1)[0],
                                       ids_batch(rng, cfg, 1, [3])[0]) for _ in range(2)]
        batch = model.Batch.of(insts)
        a = model.batch_loss(params, batch).item()
        assert a == model.batch_loss(params, batch).item()
        b = model.batch_loss(params, batch, training=True, rng=np.random.default_rng(0)).item()
        assert a != b

    def test_batch_rejects_mixed_windows(self, tiny_config, rng):
        ids = ids_batch(rng, tiny_config, 1)[0]
        insts = [data.TrainingInstance(np.zeros((k, 5)), ids, ids) for k in (1, 2)]
        with pytest.raises(DataContractError):
            model.Batch.of(insts)


class TestGradcheck:
    def test_absolute_agreement(self):
        """Analytic and numerical gradients agree to 1e-9 absolute on the full model."""
        cfg = model.gradcheck_config(6)
        params = model.init_params(cfg, 0)
        rng = np.random.default_rng(5)
        insts = [data.TrainingInstance(rng.standard_normal((2, 6)), ids_batch(rng, cfg, 1)[0],
                                       ids_batch(rng, cfg, 1, [2])[0]) for _ in range(2)]
        batch = model.Batch.of(insts)
        with Tape() as tape:
            loss = model.batch_loss(params, batch)
        grads = tape.gradient(loss, params.tensors)
        eps = 1e-5
        worst_abs, worst_rel_large = 0.0, 0.0
        for name in ("out.W", "dec.1.Uh", "img_enc.0.Wz", "sent_enc.bh", "embedding"):
            base = params[name].data
            for idx in np.ndindex(base.shape):
                bumped = []
                for sign in (1, -1):
                    arr = base.copy()
                    arr[idx] += sign * eps
                    bumped.append(model.batch_loss(params.replace({name: Tensor(arr)}), batch).item())
                num = (bumped[0] - bumped[1]) / (2 * eps)
                ana = grads[name][idx]
                worst_abs = max(worst_abs, abs(num - ana))
                if abs(ana) >= 1e-6:
                    worst_rel_large = max(worst_rel_large, abs(num - ana) / max(abs(num), abs(ana)))
        assert worst_abs < 1e-9
        assert worst_rel_large < 1e-4

    def test_gradcheck_config_dims(self):
        cfg = model.gradcheck_config(8)
        assert max(cfg.feature_dim, cfg.embed_dim, cfg.dec_hidden, cfg.img_hidden, cfg.sent_hidden) <= 8
