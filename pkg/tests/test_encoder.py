"""
Test entity marking, the labeled-instance schema and the relational encoder.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from src import tensorcore as tc
from src.encoder import (E1_MARKER_ID, E2_MARKER_ID, SUMMARY_ID, EncoderParams, FeatureMode, LabeledInstance,
                         Mode, encode, encode_backward, encode_batch, init_encoder,
                         mark_entities, mark_instance)
from src.errors import SpanError, VocabularyError

from tests.helpers import random_corpus


class TestMarkEntities:
    """Test summary-token and marker insertion."""

    def test_short_sequence(self):
        tokens, span_e1, span_e2 = mark_entities([10, 11, 12, 13, 14], (1, 1), (3, 3))
        assert len(tokens) == 10
        assert span_e1 == (3, 3)
        assert span_e2 == (7, 7)
        assert tokens[0] == SUMMARY_ID
        assert tokens[2] == E1_MARKER_ID and tokens[4] == E1_MARKER_ID
        assert tokens[6] == E2_MARKER_ID and tokens[8] == E2_MARKER_ID
        assert tokens[span_e1[0]] == 11 and tokens[span_e2[0]] == 13

    def test_remarking_is_rejected(self):
        tokens, span_e1, span_e2 = mark_entities([10, 11, 12, 13, 14], (1, 1), (3, 3))
        with pytest.raises(VocabularyError):
            mark_entities(tokens, span_e1, span_e2)

    def test_tail_spans_clamped_on_truncation(self):
        tokens, span_e1, span_e2 = mark_entities(list(range(10, 20)), (0, 1), (8, 9), max_len=8)
        assert len(tokens) == 8
        assert span_e2 == (7, 7)
        assert span_e1 == (2, 3)

    def test_invalid_span(self):
        with pytest.raises(SpanError):
            mark_entities([10, 11, 12], (2, 1), (0, 0))

    def test_multi_token_spans(self):
        tokens, span_e1, span_e2 = mark_entities([10, 11, 12, 13, 14, 15], (0, 1), (3, 5))
        assert [tokens[i] for i in range(span_e1[0], span_e1[1] + 1)] == [10, 11]
        assert [tokens[i] for i in range(span_e2[0], span_e2[1] + 1)] == [13, 14, 15]


class TestLabeledInstance:
    """Test the instance schema."""

    def test_aliases(self):
        instance = LabeledInstance.model_validate(
            {"tokens": [5, 6, 7], "e1": [0, 0], "e2": [2, 2], "noisy_label": 1, "true_label": None, "bag_id": "b"})
        assert instance.span_e1 == (0, 0)
        assert instance.true_label is None

    def test_span_outside_tokens(self):
        with pytest.raises(ValidationError):
            LabeledInstance(tokens=(5, 6), span_e1=(0, 2), span_e2=(1, 1), noisy_label=0, bag_id="b")

    def test_label_checked_against_class_count(self):
        record = {"tokens": [5, 6], "e1": [0, 0], "e2": [1, 1], "noisy_label": 3, "bag_id": "b"}
        with pytest.raises(ValidationError):
            LabeledInstance.model_validate(record, context={"num_classes": 3})
        assert LabeledInstance.model_validate(record).noisy_label == 3


class TestEncoder:
    """Test the relational encoder forward and reverse passes."""

    @pytest.fixture
    def marked(self):
        instance = LabeledInstance(tokens=(5, 6, 7, 8, 9, 10), span_e1=(0, 1), span_e2=(4, 4),
                                   noisy_label=0, bag_id="b")
        return mark_instance(instance)

    def test_zero_weights_give_tanh_bias(self, marked):
        params = init_encoder(12, 4, 3, np.random.default_rng(0))
        for array in params.named_arrays().values():
            array[...] = 0.0
        params.summary_bias[...] = [0.1, 0.2, 0.3]
        params.entity_bias[...] = [-0.5, 0.0, 0.5]
        x = encode(marked, params, Mode.EVAL)
        np.testing.assert_allclose(x, np.tanh([0.1, 0.2, 0.3, -0.5, 0.0, 0.5, -0.5, 0.0, 0.5]))

    def test_eval_mode_deterministic(self, marked):
        params = init_encoder(12, 4, 3, np.random.default_rng(1))
        np.testing.assert_array_equal(encode(marked, params), encode(marked, params))

    def test_output_in_tanh_range(self, marked):
        params = init_encoder(12, 4, 3, np.random.default_rng(2))
        x = encode(marked, params)
        assert x.shape == (9,)
        assert np.all(np.abs(x) < 1.0)

    def test_swapping_spans_swaps_blocks(self, marked):
        params = init_encoder(12, 4, 3, np.random.default_rng(3))
        swapped = marked.model_copy(update={"span_e1": marked.span_e2, "span_e2": marked.span_e1})
        x, y = encode(marked, params), encode(swapped, params)
        np.testing.assert_array_equal(x[:3], y[:3])
        np.testing.assert_array_equal(x[3:6], y[6:9])
        np.testing.assert_array_equal(x[6:9], y[3:6])

    def test_token_beyond_vocabulary(self, marked):
        params = init_encoder(8, 4, 3, np.random.default_rng(0))
        with pytest.raises(VocabularyError):
            encode(marked, params)

    def test_summary_only_mode(self, marked):
        params = init_encoder(12, 4, 3, np.random.default_rng(4))
        full = encode(marked, params, feature_mode=FeatureMode.RELATIONAL)
        summary = encode(marked, params, feature_mode=FeatureMode.SUMMARY_ONLY)
        np.testing.assert_array_equal(summary, full[:3])

    def test_train_mode_applies_dropout(self, marked):
        params = init_encoder(12, 4, 3, np.random.default_rng(5))
        x_eval = encode(marked, params, Mode.EVAL)
        x_train = encode(marked, params, Mode.TRAIN, np.random.default_rng(0), dropout_rate=0.5)
        assert not np.array_equal(x_eval, x_train)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        _, corpus = random_corpus(seed, size=4)
        params = init_encoder(30, 5, 4, np.random.default_rng(seed))
        indices = np.arange(4)
        weights = np.random.default_rng(100 + seed).normal(size=(4, 12))

        def objective(arrays):
            current = EncoderParams(**arrays)
            x, cache = encode_batch(corpus, indices, current, Mode.EVAL)
            return float(np.sum(x * weights)), encode_backward(cache, current, weights)

        error = tc.finite_diff_check(objective, params.named_arrays(), coords_per_param=15, seed=seed)
        assert error < 1e-4

    def test_corpus_padding(self):
        instances, corpus = random_corpus(0, size=5)
        assert len(corpus) == 5
        assert corpus.has_true_labels
        assert corpus.tokens.shape[1] == 15
