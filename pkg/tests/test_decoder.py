"""Decoder: causality, losses, greedy decoding, position encodings."""

import numpy as np
import pytest

from cxrgen.decoder import (DecoderConfig, ReportDecoder, masked_mean,
                            sinusoidal_positions, sparse_ce_loss, token_accuracy)
from cxrgen.errors import ConfigurationError, ContractError, DimensionError
from cxrgen.params import ParameterStore
from cxrgen.tensor import GradientTape, Tensor, reduce_sum, mul
from cxrgen.vocab import END_ID, PAD_ID, START_ID

from helpers import check_gradients


def tiny_decoder(seed=0, **overrides):
    base = dict(vocab_size=12, model_dim=8, num_heads=2, ffn_dim=8,
                max_len=9, num_layers=1)
    base.update(overrides)
    store = ParameterStore(seed)
    return ReportDecoder(store, DecoderConfig(**base)), store


def encoder_rows(seed=1, n=3, d=8):
    return Tensor(np.random.default_rng(seed).standard_normal((n, d)))


class TestSinusoidalPositions:
    def test_shape_and_range(self):
        table = sinusoidal_positions(43, 512)
        assert table.shape == (43, 512)
        assert np.abs(table).max() <= 1.0

    def test_first_row_alternates_zero_one(self):
        table = sinusoidal_positions(4, 6)
        np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1], atol=1e-12)

    def test_known_entry(self):
        table = sinusoidal_positions(3, 4)
        assert table[1, 0] == pytest.approx(np.sin(1.0))
        assert table[1, 1] == pytest.approx(np.cos(1.0))
        assert table[1, 2] == pytest.approx(np.sin(1.0 / 100.0))

    def test_distinct_positions(self):
        table = sinusoidal_positions(43, 16)
        for i in range(42):
            assert np.abs(table[i] - table[i + 1]).max() > 1e-6


class TestTeacherForcedForward:
    def test_logit_shape(self):
        dec, _ = tiny_decoder()
        logits = dec.teacher_forced_forward(encoder_rows(), [START_ID, 5, 6])
        assert logits.shape == (3, 12)

    def test_causality_future_tokens_do_not_leak(self):
        dec, _ = tiny_decoder()
        enc = encoder_rows()
        a = dec.teacher_forced_forward(enc, [START_ID, 5, 6, 7]).data
        b = dec.teacher_forced_forward(enc, [START_ID, 5, 6, 9]).data
        # positions 0..2 see identical prefixes; only position 3 may differ
        np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)
        assert np.abs(a[3] - b[3]).max() > 1e-9

    def test_prefix_consistency_with_generation(self):
        dec, _ = tiny_decoder()
        enc = encoder_rows()
        full = dec.teacher_forced_forward(enc, [START_ID, 4, 5]).data
        prefix = dec.teacher_forced_forward(enc, [START_ID, 4]).data
        np.testing.assert_allclose(full[:2], prefix, atol=1e-12)

    def test_must_start_with_start_token(self):
        dec, _ = tiny_decoder()
        with pytest.raises(ContractError):
            dec.teacher_forced_forward(encoder_rows(), [5, 6])

    def test_overlong_target_rejected(self):
        dec, _ = tiny_decoder(max_len=4)
        with pytest.raises(ContractError):
            dec.teacher_forced_forward(encoder_rows(), [START_ID, 4, 5, 6, 7])

    def test_encoder_width_mismatch_rejected(self):
        dec, _ = tiny_decoder()
        with pytest.raises(DimensionError):
            dec.teacher_forced_forward(Tensor(np.zeros((3, 7))), [START_ID, 4])

    def test_encoder_content_changes_logits(self):
        dec, _ = tiny_decoder()
        a = dec.teacher_forced_forward(encoder_rows(seed=2), [START_ID, 4]).data
        b = dec.teacher_forced_forward(encoder_rows(seed=3), [START_ID, 4]).data
        assert np.abs(a - b).max() > 1e-9


class TestSparseCeLoss:
    def test_perfect_prediction_near_zero_loss(self):
        logits = Tensor(np.full((2, 5), -30.0) + np.eye(5)[[2, 3]] * 60.0)
        losses = sparse_ce_loss(logits, [2, 3], [True, True])
        np.testing.assert_allclose(losses.data, [0.0, 0.0], atol=1e-10)

    def test_uniform_logits_give_log_vocab(self):
        logits = Tensor(np.zeros((3, 8)))
        losses = sparse_ce_loss(logits, [0, 1, 2], [True, True, True])
        np.testing.assert_allclose(losses.data, np.full(3, np.log(8.0)), atol=1e-12)

    def test_pad_positions_are_exactly_zero(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal((4, 6)))
        losses = sparse_ce_loss(logits, [1, 2, PAD_ID, PAD_ID],
                                [True, True, False, False])
        assert losses.data[2] == 0.0 and losses.data[3] == 0.0
        assert (losses.data[:2] > 0).all()

    def test_unreduced_shape(self):
        logits = Tensor(np.zeros((5, 4)))
        assert sparse_ce_loss(logits, [0] * 5, [True] * 5).shape == (5,)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            sparse_ce_loss(Tensor(np.zeros((2, 4))), [0, 4], [True, True])

    def test_masked_mean(self):
        losses = Tensor(np.array([2.0, 4.0, 0.0, 0.0]))
        mean = masked_mean(losses, [True, True, False, False])
        assert mean.item() == pytest.approx(3.0)
        with pytest.raises(ContractError):
            masked_mean(losses, [False] * 4)

    def test_loss_gradients(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        labels = [1, 5, 0, 3]
        mask = [True, True, False, True]
        check_gradients(lambda: masked_mean(sparse_ce_loss(logits, labels, mask), mask),
                        [logits])

    def test_token_accuracy(self):
        logits = Tensor(np.eye(4)[[1, 2, 0, 3]] * 10.0)
        correct, total = token_accuracy(logits, [1, 2, 3, 3], [True, True, True, False])
        assert (correct, total) == (2, 3)


class TestGreedyGeneration:
    def test_starts_with_start_and_caps_length(self):
        dec, _ = tiny_decoder()
        ids = dec.generate_greedy(encoder_rows())
        assert ids[0] == START_ID
        assert len(ids) <= dec.config.max_len

    def test_deterministic(self):
        dec, _ = tiny_decoder()
        enc = encoder_rows()
        assert dec.generate_greedy(enc) == dec.generate_greedy(enc)

    def test_stops_at_end_token(self):
        dec, store = tiny_decoder()
        # bias the output projection so END always wins
        bias = store["decoder.output.b"]
        boosted = bias.data.copy()
        boosted[END_ID] = 50.0
        bias.data = boosted
        ids = dec.generate_greedy(encoder_rows())
        assert ids == [START_ID, END_ID]

    def test_max_len_override_validated(self):
        dec, _ = tiny_decoder(max_len=6)
        with pytest.raises(ContractError):
            dec.generate_greedy(encoder_rows(), max_len=7)
        assert len(dec.generate_greedy(encoder_rows(), max_len=3)) <= 3

    def test_matches_stepwise_argmax(self):
        dec, _ = tiny_decoder(seed=5)
        enc = encoder_rows(seed=6)
        ids = [START_ID]
        for _ in range(dec.config.max_len - 1):
            logits = dec.teacher_forced_forward(enc, ids)
            nxt = int(np.argmax(logits.data[-1]))
            ids.append(nxt)
            if nxt == END_ID:
                break
        assert dec.generate_greedy(enc) == ids


class TestDecoderGradients:
    def test_full_decoder_gradcheck(self):
        dec, store = tiny_decoder(seed=7)
        enc = Tensor(np.random.default_rng(8).standard_normal((3, 8)),
                     requires_grad=True)
        target = [START_ID, 4, 5, 6]
        labels = [4, 5, 6, END_ID]
        mask = [True, True, True, True]

        def loss():
            logits = dec.teacher_forced_forward(enc, target)
            return masked_mean(sparse_ce_loss(logits, labels, mask), mask)

        params = list(store.parameters.values()) + [enc]
        worst = check_gradients(loss, params, max_entries=4)
        assert worst < 1e-5

    def test_no_gradient_flows_from_masked_positions(self):
        dec, store = tiny_decoder(seed=9)
        enc = encoder_rows(seed=10)
        target = [START_ID, 4, 5]
        labels_a, labels_b = [4, 5, 6], [4, 5, 7]  # differ only at a PAD-masked slot
        mask = [True, True, False]
        grads = []
        for labels in (labels_a, labels_b):
            with GradientTape() as tape:
                loss = masked_mean(sparse_ce_loss(
                    dec.teacher_forced_forward(enc, target), labels, mask), mask)
            tape.backward(loss)
            grads.append(tape.gradients(store.parameters))
        for path in grads[0]:
            np.testing.assert_allclose(grads[0][path], grads[1][path], atol=0,
                                       err_msg=path)
