"""
Test the explicit transition path: T, E-step, M-step, Q-function and the
upper-bound explicit loss.
"""

import math
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src import tensorcore as tc
from src.errors import DegeneratePosteriorError, DegenerateRowError, ShapeError, TargetIndexError
from src.noisemodel import (PosteriorRecord, SufficientStats, TransitionMatrix, accumulate_stats,
                            accumulate_stats_batch, e_step, e_step_batch, em_iterate, explicit_loss,
                            explicit_loss_batch, explicit_loss_mixed, init_transition, m_step,
                            marginal_noisy_prob, q_value, read_transition_csv, validate_transition,
                            write_transition_csv)

from tests.helpers import random_transition_values

EXAMPLE_T = TransitionMatrix(np.array([
    [0.0, 0.5, 0.25],
    [0.5, 0.0, 0.75],
    [0.5, 0.5, 0.0],
]))
EXAMPLE_PROBS = np.array([0.5, 0.3, 0.2])


def random_draw(seed):
    rng = np.random.default_rng(seed)
    num_classes = int(rng.integers(2, 11))
    h = rng.normal(0.0, 3.0, num_classes)
    z_logit = float(rng.normal(0.0, 3.0))
    transition = TransitionMatrix(random_transition_values(rng, num_classes))
    noisy = int(rng.integers(num_classes))
    return h, z_logit, transition, noisy


class TestTransitionMatrix:
    """Test construction and validation of T."""

    def test_two_classes(self):
        np.testing.assert_array_equal(init_transition(2).values, [[0, 1], [1, 0]])

    def test_three_classes(self):
        values = init_transition(3).values
        assert np.all(values[~np.eye(3, dtype=bool)] == 0.5)

    def test_many_classes(self):
        transition = init_transition(53)
        assert transition.values[1, 0] == pytest.approx(1 / 52)
        np.testing.assert_allclose(transition.values.sum(axis=0), 1.0, atol=1e-12)
        transition.validate()

    def test_too_few_classes(self):
        with pytest.raises(ValueError):
            init_transition(1)

    def test_rejects_nonzero_diagonal(self):
        values = init_transition(3).values
        values[0, 0] = 0.1
        with pytest.raises(ValueError):
            validate_transition(values)

    def test_csv_round_trip(self):
        temp_dir = tempfile.mkdtemp()
        try:
            path = Path(temp_dir) / "t.csv"
            transition = TransitionMatrix(random_transition_values(np.random.default_rng(0), 4))
            write_transition_csv(transition, path)
            restored = read_transition_csv(path)
            assert np.max(np.abs(restored.values - transition.values)) < 1e-12
            assert len(path.read_text().strip().splitlines()) == 4
        finally:
            shutil.rmtree(temp_dir)


class TestEStep:
    """Test the posterior over (y, z)."""

    def test_worked_example(self):
        record = e_step(EXAMPLE_PROBS, 0.6, EXAMPLE_T, 0)
        assert record.normalizer == pytest.approx(0.38, abs=1e-12)
        assert record.p_correct == pytest.approx(0.30 / 0.38, abs=1e-12)
        np.testing.assert_allclose(record.p_wrong, [0.0, 0.06 / 0.38, 0.02 / 0.38], atol=1e-12)

    def test_forced_correct(self):
        record = e_step(EXAMPLE_PROBS, 1.0, EXAMPLE_T, 1)
        assert record.p_correct == 1.0
        assert np.all(record.p_wrong == 0.0)
        assert record.normalizer == pytest.approx(0.3)

    def test_normalizer_is_marginal(self):
        record = e_step(EXAMPLE_PROBS, 0.6, EXAMPLE_T, 0)
        assert record.normalizer == marginal_noisy_prob(EXAMPLE_PROBS, 0.6, EXAMPLE_T, 0)

    def test_degenerate_posterior(self):
        probs = np.array([0.0, 1.0, 0.0])
        transition = TransitionMatrix(np.array([[0.0, 0.0, 0.5], [0.0, 0.0, 0.5], [1.0, 1.0, 0.0]]))
        with pytest.raises(DegeneratePosteriorError):
            e_step(probs, 0.0, transition, 0)

    def test_label_out_of_range(self):
        with pytest.raises(TargetIndexError):
            e_step(EXAMPLE_PROBS, 0.5, EXAMPLE_T, 3)

    @pytest.mark.parametrize("seed", range(50))
    def test_identities_on_random_draws(self, seed):
        h, z_logit, transition, noisy = random_draw(seed)
        probs = tc.softmax(h)
        keep = float(tc.sigmoid(z_logit))
        record = e_step(probs, keep, transition, noisy)
        assert abs(record.normalizer - marginal_noisy_prob(probs, keep, transition, noisy)) < 1e-12
        assert abs(record.p_correct + record.p_wrong.sum() - 1.0) < 1e-12
        assert record.p_wrong[noisy] == 0.0


class TestMarginal:
    """Test p(observed label | x)."""

    def test_worked_example(self):
        expected = 0.6 * 0.5 + 0.4 * (0.5 * 0.3 + 0.25 * 0.2)
        assert marginal_noisy_prob(EXAMPLE_PROBS, 0.6, EXAMPLE_T, 0) == pytest.approx(expected, abs=1e-15)

    def test_uniform_probs(self):
        probs = np.full(3, 1 / 3)
        value = marginal_noisy_prob(probs, 0.4, EXAMPLE_T, 1)
        assert value == pytest.approx(0.4 / 3 + 0.6 * EXAMPLE_T.values[1].sum() / 3, abs=1e-15)


class TestStatsAndMStep:
    """Test accumulation of sufficient statistics and the closed-form update."""

    def test_empty_stream(self):
        stats = accumulate_stats([], num_classes=3)
        assert np.all(stats.counts == 0)
        with pytest.raises(ShapeError):
            accumulate_stats([])

    def test_single_record(self):
        record = PosteriorRecord(0.5, np.array([0.0, 0.3, 0.2]), 1.0)
        stats = accumulate_stats([(0, record)])
        np.testing.assert_array_equal(stats.counts[0], record.p_wrong)
        assert stats.num_instances == 1

    def test_mixed_class_counts(self):
        with pytest.raises(ShapeError):
            accumulate_stats([(0, PosteriorRecord(1.0, np.zeros(3), 1.0)),
                              (0, PosteriorRecord(1.0, np.zeros(4), 1.0))])

    def test_merge_matches_single_pass(self):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(4), size=40)
        keep = rng.random(40)
        noisy = rng.integers(0, 4, size=40)
        transition = TransitionMatrix(random_transition_values(rng, 4))
        whole = accumulate_stats_batch(e_step_batch(probs, keep, transition, noisy))
        first = accumulate_stats_batch(e_step_batch(probs[:15], keep[:15], transition, noisy[:15]))
        second = accumulate_stats_batch(e_step_batch(probs[15:], keep[15:], transition, noisy[15:]))
        merged = second.merge(first)
        assert np.max(np.abs(merged.counts - whole.counts)) < 1e-12
        assert merged.num_instances == 40

    def test_worked_m_step(self):
        counts = np.array([[0.0, 0.6, 0.2], [0.5, 0.0, 0.3], [0.0, 0.0, 0.0]])
        updated = m_step(SufficientStats(counts, 2), init_transition(3))
        expected = np.array([[0.0, 1.0, 0.4], [1.0, 0.0, 0.6], [0.0, 0.0, 0.0]])
        np.testing.assert_allclose(updated.values, expected, atol=1e-15)

    def test_empty_stats_keep_previous(self):
        previous = TransitionMatrix(random_transition_values(np.random.default_rng(1), 4))
        updated = m_step(SufficientStats.empty(4), previous)
        np.testing.assert_array_equal(updated.values, previous.values)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_stats_give_valid_columns(self, seed):
        counts = np.random.default_rng(seed).random((5, 5))
        np.fill_diagonal(counts, 0.0)
        updated = m_step(SufficientStats(counts, 10), init_transition(5))
        assert np.max(np.abs(updated.values.sum(axis=0) - 1.0)) < 1e-12
        updated.validate()


class TestQValue:
    """Test the T-dependent part of the expected complete-data log likelihood."""

    def test_zero_weights(self):
        assert q_value(SufficientStats.empty(3), EXAMPLE_T) == 0.0

    def test_concentrated_candidate_is_best(self):
        counts = np.zeros((3, 3))
        counts[1, 0] = 1.0
        stats = SufficientStats(counts, 1)
        best = TransitionMatrix(np.array([[0.0, 0.5, 0.5], [1.0, 0.0, 0.5], [0.0, 0.5, 0.0]]))
        assert q_value(stats, best) == 0.0
        assert q_value(stats, init_transition(3)) < q_value(stats, best)

    def test_zero_entry_with_weight(self):
        counts = np.zeros((3, 3))
        counts[2, 0] = 1.0
        transition = TransitionMatrix(np.array([[0.0, 0.5, 0.5], [1.0, 0.0, 0.5], [0.0, 0.5, 0.0]]))
        assert q_value(SufficientStats(counts, 1), transition) == float("-inf")
        assert q_value(SufficientStats(counts, 1), transition, floor=1e-8) == pytest.approx(math.log(1e-8))

    @pytest.mark.parametrize("seed", range(20))
    def test_em_monotone(self, seed):
        rng = np.random.default_rng(seed)
        num_classes, size = 5, 500
        probs = rng.dirichlet(np.ones(num_classes), size=size)
        keep = rng.random(size)
        noisy = rng.integers(0, num_classes, size=size)
        trace = em_iterate(probs, keep, noisy, init_transition(num_classes), iterations=20)
        for before, after in zip(trace.q_before, trace.q_after):
            assert after >= before - 1e-10
        for snapshot in trace.transitions:
            assert np.max(np.abs(snapshot.values.sum(axis=0) - 1.0)) < 1e-9
            assert np.all(np.diag(snapshot.values) == 0.0)
            assert np.all(snapshot.values >= 0.0)


class TestExplicitLoss:
    """Test the upper-bound loss and its gradients."""

    def test_worked_example(self):
        h = np.log(EXAMPLE_PROBS)
        z_logit = math.log(0.6 / 0.4)
        loss, _, _ = explicit_loss(h, z_logit, 0, EXAMPLE_T)
        assert loss == pytest.approx(1.066613, abs=1e-6)
        assert loss >= -math.log(0.38)

    def test_certain_label_is_tight(self):
        h = np.array([0.2, -0.4, 1.1])
        loss, _, _ = explicit_loss(h, 40.0, 2, EXAMPLE_T)
        xe, _ = tc.softmax_cross_entropy(h, 2)
        assert loss == pytest.approx(xe, abs=1e-12)
        marginal = marginal_noisy_prob(tc.softmax(h), float(tc.sigmoid(40.0)), EXAMPLE_T, 2)
        assert abs(loss + math.log(marginal)) < 1e-9

    def test_single_entry_row_is_tight_for_certain_wrong_label(self):
        transition = TransitionMatrix(np.array([[0.0, 1.0, 0.0], [0.5, 0.0, 1.0], [0.5, 0.0, 0.0]]))
        h = np.array([0.3, 0.9, -0.2])
        loss, _, _ = explicit_loss(h, -40.0, 0, transition)
        marginal = marginal_noisy_prob(tc.softmax(h), float(tc.sigmoid(-40.0)), transition, 0)
        assert abs(loss + math.log(marginal)) < 1e-9

    def test_degenerate_row(self):
        transition = TransitionMatrix(np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 1.0], [0.5, 1.0, 0.0]]))
        with pytest.raises(DegenerateRowError):
            explicit_loss(np.zeros(3), 0.0, 0, transition)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_upper_bound(self, seed):
        h, z_logit, transition, noisy = random_draw(seed)
        loss, _, _ = explicit_loss(h, z_logit, noisy, transition)
        marginal = marginal_noisy_prob(tc.softmax(h), float(tc.sigmoid(z_logit)), transition, noisy)
        assert loss >= -math.log(marginal) - 1e-12

        certain, _, _ = explicit_loss(h, 40.0, noisy, transition)
        keep = float(tc.sigmoid(40.0))
        assert keep >= 1.0 - 1e-10
        assert abs(certain + math.log(marginal_noisy_prob(tc.softmax(h), keep, transition, noisy))) < 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        h, z_logit, transition, noisy = random_draw(seed)

        def objective(params):
            loss, grad_h, grad_z = explicit_loss(params["h"], float(params["z"][0]), noisy, transition)
            return loss, {"h": grad_h, "z": np.array([grad_z])}

        assert tc.finite_diff_check(objective, {"h": h, "z": np.array([z_logit])}) < 1e-4


class TestMixedExplicitLoss:
    """Test the upper-bound loss driven by explicit correctness weights."""

    def test_matches_sigmoid_weights(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(0.0, 2.0, (6, 3))
        z_logits = rng.normal(0.0, 2.0, 6)
        noisy = rng.integers(0, 3, 6)
        losses, grad_logits, grad_z, valid = explicit_loss_batch(logits, z_logits, noisy, EXAMPLE_T)
        keep = tc.sigmoid(z_logits)
        mixed, mixed_grad, grad_keep, mixed_valid = explicit_loss_mixed(logits, keep, noisy, EXAMPLE_T)
        np.testing.assert_array_equal(losses, mixed)
        np.testing.assert_array_equal(grad_logits, mixed_grad)
        np.testing.assert_array_equal(valid, mixed_valid)
        np.testing.assert_allclose(grad_z, keep * (1.0 - keep) * grad_keep, rtol=0, atol=1e-15)

    def test_linear_in_weight(self):
        logits = np.log(EXAMPLE_PROBS)[None, :]
        noisy = np.array([0])
        observed, _, _, _ = explicit_loss_mixed(logits, np.array([1.0]), noisy, EXAMPLE_T)
        mixed, _, _, _ = explicit_loss_mixed(logits, np.array([0.0]), noisy, EXAMPLE_T)
        half, _, grad_keep, _ = explicit_loss_mixed(logits, np.array([0.5]), noisy, EXAMPLE_T)
        assert observed[0] == pytest.approx(-math.log(0.5), abs=1e-12)
        assert half[0] == pytest.approx(0.5 * (observed[0] + mixed[0]), abs=1e-12)
        assert grad_keep[0] == pytest.approx(observed[0] - mixed[0], abs=1e-12)

    def test_zero_row_is_invalid(self):
        transition = TransitionMatrix(np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 1.0], [0.5, 1.0, 0.0]]))
        losses, grad_logits, grad_keep, valid = explicit_loss_mixed(
            np.zeros((2, 3)), np.array([0.3, 0.3]), np.array([0, 1]), transition)
        np.testing.assert_array_equal(valid, [False, True])
        assert losses[0] == 0.0 and grad_keep[0] == 0.0
        assert not np.any(grad_logits[0])

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_in_logits(self, seed):
        h, _, transition, noisy = random_draw(seed)
        keep = np.array([np.random.default_rng(seed).uniform()])

        def objective(params):
            losses, grad_h, _, _ = explicit_loss_mixed(params["h"][None, :], keep, np.array([noisy]), transition)
            return float(losses[0]), {"h": grad_h[0]}

        assert tc.finite_diff_check(objective, {"h": h}) < 1e-4
