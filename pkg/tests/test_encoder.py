import math

import numpy as np
import pytest

from maskvar import autodiff as ad
from maskvar.autodiff import Tape
from maskvar.corpus import TokenSequence, Vocabulary
from maskvar.encoder import (
    EncoderConfig,
    EncoderParams,
    PositionLoss,
    batch_position_logits,
    forward_mlm,
    mask_only,
    position_loss_and_norm_table,
    preset,
    sentence_gradient,
    sentence_loss,
    sentence_losses,
)

from conftest import toy_config
from oracles import encoder_logits_reference


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValueError):
            EncoderConfig(vocab_size=64, hidden_size=64, num_heads=5)

    def test_presets(self):
        assert preset("toy", 64).hidden_size == 64
        base = preset("paper-base", 30522)
        assert (base.hidden_size, base.num_heads, base.num_layers) == (768, 12, 12)

    def test_canonical_order(self, toy_params):
        names = list(toy_params.tensors)
        assert names[:2] == ["token_embedding", "position_embedding"]
        assert names[2].startswith("layer0.attn")
        assert names[-3:] == ["final_ln.beta", "head.weight", "head.bias"]
        layer1 = names.index("layer1.attn.wq")
        assert all(n.startswith("layer0.") for n in names[2:layer1])


class TestForward:
    def test_matches_reference_forward(self, toy_params, sentence):
        raw = {k: v.data for k, v in toy_params.tensors.items()}
        masked = mask_only(sentence, [1, 4])
        ref = encoder_logits_reference(raw, 2, 4, masked.tokens)[[1, 4]]
        got = batch_position_logits(toy_params, masked.tokens[None, :], np.array([len(sentence)]), [np.array([1, 4])]).data
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    def test_padding_does_not_change_logits(self, toy_params, sentence):
        masked = mask_only(sentence, [2])
        n = len(sentence)
        padded = np.concatenate([masked.tokens, np.zeros(5, dtype=np.int64)])[None, :]
        a = batch_position_logits(toy_params, masked.tokens[None, :], np.array([n]), [np.array([2])]).data
        b = batch_position_logits(toy_params, padded, np.array([n]), [np.array([2])]).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_untrained_loss_near_uniform(self):
        params = EncoderParams.init(toy_config(32 + Vocabulary.num_reserved), np.random.default_rng(3))
        x = TokenSequence(np.arange(3, 13))
        loss = forward_mlm(params, mask_only(x, [4]), [4], x)[0].loss
        assert abs(loss - math.log(35)) < 0.5

    def test_zero_positions(self, toy_params, sentence):
        assert forward_mlm(toy_params, sentence, [], sentence) == []
        assert sentence_loss([]) == 0.0
        g, norm = sentence_gradient(toy_params, sentence, [], sentence)
        assert norm == 0.0 and not g.any()

    def test_sentence_loss_is_mean(self):
        pls = [PositionLoss(0, 2.0, 0.0), PositionLoss(3, 1.0, 0.0)]
        assert sentence_loss(pls) == 1.5
        assert sentence_loss(pls, "sum") == 3.0

    def test_position_out_of_range(self, toy_params, sentence):
        with pytest.raises(IndexError):
            forward_mlm(toy_params, sentence, [len(sentence)], sentence)

    def test_deterministic(self, toy_params, sentence):
        m = mask_only(sentence, [0, 5])
        assert forward_mlm(toy_params, m, [0, 5], sentence) == forward_mlm(toy_params, m, [0, 5], sentence)

    def test_losses_nonnegative_and_entropy_bounded(self, toy_params, sentence):
        pls = forward_mlm(toy_params, mask_only(sentence, [0, 3, 7]), [0, 3, 7], sentence)
        V = toy_params.config.vocab_size
        assert all(pl.loss >= 0 and 0 <= pl.entropy <= math.log(V) + 1e-12 for pl in pls)


class TestGradient:
    def test_weight_scaling(self, toy_params, sentence):
        m = mask_only(sentence, [1, 6])
        g1, n1 = sentence_gradient(toy_params, m, [1, 6], sentence, 1.0)
        g2, n2 = sentence_gradient(toy_params, m, [1, 6], sentence, 2.0)
        np.testing.assert_allclose(g2, 2.0 * g1, rtol=0, atol=1e-12)
        assert n2 == pytest.approx(2.0 * n1, rel=1e-12)
        g0, n0 = sentence_gradient(toy_params, m, [1, 6], sentence, 0.0)
        assert n0 == 0.0 and not g0.any()

    def test_gradient_length_and_order(self, toy_params, sentence):
        g, _ = sentence_gradient(toy_params, mask_only(sentence, [2]), [2], sentence)
        assert g.size == toy_params.num_parameters()
        # head bias gradient is the last block: softmax minus one-hot
        V = toy_params.config.vocab_size
        hb = g[-V:]
        assert hb.sum() == pytest.approx(0.0, abs=1e-12)
        assert hb[sentence.tokens[2]] < 0

    @pytest.mark.parametrize("seed", range(2))
    def test_grad_check_tiny_model(self, seed):
        cfg = EncoderConfig(vocab_size=12, max_seq_len=8, num_layers=1, hidden_size=8, num_heads=2, dropout=0.0, init_std=0.3)
        params = EncoderParams.init(cfg, np.random.default_rng(seed))
        x = TokenSequence(np.array([3, 7, 4, 11, 5]))
        m = mask_only(x, [1, 3])

        def f(_):
            s = sentence_losses(params, m.tokens[None, :], np.array([5]), [np.array([1, 3])], x.tokens[[1, 3]])
            return ad.tsum(s)

        assert ad.grad_check(f, params.parameters()) <= 1e-4

    def test_norm_is_euclidean(self, toy_params, sentence):
        g, n = sentence_gradient(toy_params, mask_only(sentence, [3]), [3], sentence)
        assert n == pytest.approx(float(np.linalg.norm(g)), rel=1e-14)


class TestLossNormTable:
    def test_single_token(self, toy_params):
        x = TokenSequence(np.array([9]))
        assert position_loss_and_norm_table(toy_params, x).shape == (1, 2)

    def test_deterministic(self, toy_params, sentence):
        a = position_loss_and_norm_table(toy_params, sentence)
        b = position_loss_and_norm_table(toy_params, sentence)
        np.testing.assert_array_equal(a, b)

    def test_rows_match_direct_computation(self, toy_params, sentence):
        table = position_loss_and_norm_table(toy_params, sentence)
        m = mask_only(sentence, [4])
        assert table[4, 0] == forward_mlm(toy_params, m, [4], sentence)[0].loss
        assert table[4, 1] == sentence_gradient(toy_params, m, [4], sentence)[1]


class TestDropout:
    def test_dropout_only_with_rng(self, vocab_size, sentence):
        params = EncoderParams.init(EncoderConfig(vocab_size=vocab_size, dropout=0.1), np.random.default_rng(0))
        m = mask_only(sentence, [2])
        args = (params, m.tokens[None, :], np.array([len(sentence)]), [np.array([2])])
        a = batch_position_logits(*args).data
        b = batch_position_logits(*args).data
        c = batch_position_logits(*args, dropout_rng=np.random.default_rng(1)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
