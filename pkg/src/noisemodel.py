"""
Explicit label transition.

Latent-variable view of a noisy label: the true class y and a correctness flag z.
With z=1 the observed label equals y; with z=0 it is drawn from column y of a
column-stochastic, zero-diagonal transition matrix T. This module holds T, the
E-step posterior over (y, z), the closed-form M-step, the Q-function and the
upper-bound explicit loss.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

from . import tensorcore as tc
from .errors import DegeneratePosteriorError, DegenerateRowError, ShapeError, TargetIndexError

logger = logging.getLogger(__name__)

COLUMN_TOLERANCE = 1e-9


@dataclass
class TransitionMatrix:
    """T[i][k]: probability that true class k is annotated as class i when z=0."""
    values: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def copy(self) -> "TransitionMatrix":
        return TransitionMatrix(self.values.copy())

    def validate(self, tolerance: float = COLUMN_TOLERANCE) -> "TransitionMatrix":
        validate_transition(self.values, tolerance)
        return self


def validate_transition(values: np.ndarray, tolerance: float = COLUMN_TOLERANCE):
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] < 2:
        raise ShapeError(f"transition matrix must be K×K with K >= 2, got {values.shape}")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ValueError("transition entries must be finite and non-negative")
    if np.any(np.diag(values) != 0):
        raise ValueError("transition diagonal must be exactly zero")
    column_error = np.max(np.abs(values.sum(axis=0) - 1.0))
    if column_error > tolerance:
        raise ValueError(f"transition columns must sum to 1 (worst deviation {column_error:.3e})")


def init_transition(num_classes: int) -> TransitionMatrix:
    """Zero diagonal, every off-diagonal entry 1/(K-1)."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    values = np.full((num_classes, num_classes), 1.0 / (num_classes - 1))
    np.fill_diagonal(values, 0.0)
    return TransitionMatrix(values)


@dataclass
class PosteriorRecord:
    """Joint posterior over (y, z) for one instance; only the allowed cells are stored."""
    p_correct: float
    p_wrong: np.ndarray
    normalizer: float


@dataclass
class PosteriorBatch:
    p_correct: np.ndarray
    p_wrong: np.ndarray
    normalizer: np.ndarray
    noisy: np.ndarray
    valid: np.ndarray


@dataclass
class SufficientStats:
    """S[i][k]: summed p(y=e_k, z=0 | observed e_i) over instances observed as class i."""
    counts: np.ndarray
    num_instances: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "SufficientStats":
        return cls(np.zeros((num_classes, num_classes)), 0)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "SufficientStats") -> "SufficientStats":
        if other.counts.shape != self.counts.shape:
            raise ShapeError(f"cannot merge stats of shapes {self.counts.shape} and {other.counts.shape}")
        return SufficientStats(self.counts + other.counts, self.num_instances + other.num_instances)


def _check_inputs(probs_y: np.ndarray, p_z1, noisy: np.ndarray, transition: TransitionMatrix):
    num_classes = transition.num_classes
    if probs_y.shape[-1] != num_classes:
        raise ShapeError(f"probabilities over {probs_y.shape[-1]} classes, transition over {num_classes}")
    if np.any(noisy < 0) or np.any(noisy >= num_classes):
        raise TargetIndexError(f"observed label outside [0, {num_classes})")
    if np.any(np.asarray(p_z1) < 0) or np.any(np.asarray(p_z1) > 1):
        raise ValueError("p(z=1|x) must lie in [0, 1]")


def _joint_terms(probs_y: np.ndarray, p_z1: np.ndarray, noisy: np.ndarray,
                 transition: TransitionMatrix) -> Tuple[np.ndarray, np.ndarray]:
    """Unnormalized p(y=ŷ, z=1) and p(y=e_k, z=0) for B instances."""
    rows = np.arange(probs_y.shape[0])
    correct = probs_y[rows, noisy] * p_z1
    wrong = probs_y * (1.0 - p_z1)[:, None] * transition.values[noisy]
    wrong[rows, noisy] = 0.0
    return correct, wrong


def e_step_batch(probs_y: np.ndarray, p_z1: np.ndarray, transition: TransitionMatrix,
                 noisy: np.ndarray) -> PosteriorBatch:
    """Vectorized E-step; instances with a zero normalizer are flagged invalid."""
    probs_y = np.atleast_2d(np.asarray(probs_y, dtype=np.float64))
    p_z1 = np.atleast_1d(np.asarray(p_z1, dtype=np.float64))
    noisy = np.atleast_1d(np.asarray(noisy, dtype=np.int64))
    _check_inputs(probs_y, p_z1, noisy, transition)
    correct, wrong = _joint_terms(probs_y, p_z1, noisy, transition)
    normalizer = correct + wrong.sum(axis=1)
    valid = normalizer > 0
    safe = np.where(valid, normalizer, 1.0)
    return PosteriorBatch(
        p_correct=np.where(valid, correct / safe, 0.0),
        p_wrong=np.where(valid[:, None], wrong / safe[:, None], 0.0),
        normalizer=normalizer,
        noisy=noisy,
        valid=valid,
    )


def e_step(probs_y: np.ndarray, p_z1: float, transition: TransitionMatrix, noisy: int) -> PosteriorRecord:
    batch = e_step_batch(probs_y, p_z1, transition, noisy)
    if not batch.valid[0]:
        raise DegeneratePosteriorError(f"posterior normalizer is zero for observed label {noisy}")
    return PosteriorRecord(float(batch.p_correct[0]), batch.p_wrong[0], float(batch.normalizer[0]))


def marginal_noisy_prob_batch(probs_y: np.ndarray, p_z1: np.ndarray, transition: TransitionMatrix,
                              noisy: np.ndarray) -> np.ndarray:
    probs_y = np.atleast_2d(np.asarray(probs_y, dtype=np.float64))
    p_z1 = np.atleast_1d(np.asarray(p_z1, dtype=np.float64))
    noisy = np.atleast_1d(np.asarray(noisy, dtype=np.int64))
    _check_inputs(probs_y, p_z1, noisy, transition)
    correct, wrong = _joint_terms(probs_y, p_z1, noisy, transition)
    return correct + wrong.sum(axis=1)


def marginal_noisy_prob(probs_y: np.ndarray, p_z1: float, transition: TransitionMatrix, noisy: int) -> float:
    """p(ŷ|x) = p(z=1|x) p(y=ŷ|x) + p(z=0|x) Σ_{k≠î} T[î][k] p(y=e_k|x)."""
    return float(marginal_noisy_prob_batch(probs_y, p_z1, transition, noisy)[0])


def accumulate_stats(posteriors: Iterable[Tuple[int, PosteriorRecord]],
                     num_classes: Optional[int] = None) -> SufficientStats:
    stats = SufficientStats.empty(num_classes) if num_classes is not None else None
    for noisy, record in posteriors:
        if stats is None:
            stats = SufficientStats.empty(record.p_wrong.shape[0])
        if record.p_wrong.shape[0] != stats.num_classes:
            raise ShapeError(f"posterior over {record.p_wrong.shape[0]} classes in a {stats.num_classes}-class stream")
        stats.counts[noisy] += record.p_wrong
        stats.num_instances += 1
    if stats is None:
        raise ShapeError("class count unknown for an empty posterior stream")
    return stats


def accumulate_stats_batch(batch: PosteriorBatch, stats: Optional[SufficientStats] = None) -> SufficientStats:
    num_classes = batch.p_wrong.shape[1]
    stats = stats if stats is not None else SufficientStats.empty(num_classes)
    if stats.num_classes != num_classes:
        raise ShapeError(f"posterior over {num_classes} classes into {stats.num_classes}-class stats")
    counts = stats.counts.copy()
    np.add.at(counts, batch.noisy[batch.valid], batch.p_wrong[batch.valid])
    return SufficientStats(counts, stats.num_instances + int(batch.valid.sum()))


def m_step(stats: SufficientStats, previous: TransitionMatrix) -> TransitionMatrix:
    """Closed-form maximizer of Q: each column of S normalized to sum 1.

    Columns without any posterior mass keep their previous values.
    """
    if stats.counts.shape != previous.values.shape:
        raise ShapeError(f"stats {stats.counts.shape} vs transition {previous.values.shape}")
    counts = stats.counts.copy()
    np.fill_diagonal(counts, 0.0)
    denominators = counts.sum(axis=0)
    updated = previous.values.copy()
    informative = denominators > 0
    updated[:, informative] = counts[:, informative] / denominators[informative]
    stale = int((~informative).sum())
    if stale:
        logger.debug(f"m_step: {stale} column(s) without evidence kept from previous T")
    return TransitionMatrix(updated)


def q_value(stats: SufficientStats, transition: TransitionMatrix, floor: Optional[float] = None) -> float:
    """T-dependent part of Q(T|T_t): Σ_i Σ_k S[i][k] log T[i][k].

    Without `floor`, a zero entry carrying positive weight gives -inf.
    """
    weights = stats.counts
    mask = weights > 0
    values = transition.values[mask]
    if floor is not None:
        values = np.maximum(values, floor)
    elif np.any(values <= 0):
        logger.warning("q_value: zero transition entry carries posterior weight; returning -inf")
        return float("-inf")
    return float(np.sum(weights[mask] * np.log(values)))


@dataclass
class EMTrace:
    transitions: List[TransitionMatrix] = field(default_factory=list)
    q_before: List[float] = field(default_factory=list)
    q_after: List[float] = field(default_factory=list)


def em_iterate(probs_y: np.ndarray, p_z1: np.ndarray, noisy: np.ndarray, initial: TransitionMatrix,
               iterations: int) -> EMTrace:
    """Run EM on T alone with the classifier outputs held fixed."""
    trace = EMTrace(transitions=[initial])
    current = initial
    for _ in range(iterations):
        stats = accumulate_stats_batch(e_step_batch(probs_y, p_z1, current, noisy))
        updated = m_step(stats, current)
        trace.q_before.append(q_value(stats, current))
        trace.q_after.append(q_value(stats, updated))
        trace.transitions.append(updated)
        current = updated
    return trace


def explicit_loss_mixed(logits: np.ndarray, keep: np.ndarray, noisy: np.ndarray,
                        transition: TransitionMatrix):
    """Upper-bound loss per instance for given correctness weights `keep` in [0, 1].

    Returns (losses[B], grad_logits[B×K], grad_keep[B], valid[B]); rows whose
    transition row sums to zero are invalid and carry zero loss and gradient.
    T is a constant here.
    """
    noisy = np.asarray(noisy, dtype=np.int64)
    keep = np.asarray(keep, dtype=np.float64)
    rows = np.arange(logits.shape[0])
    log_probs = tc.log_softmax(logits, axis=-1)
    probs = np.exp(log_probs)

    row = transition.values[noisy].copy()
    row[rows, noisy] = 0.0
    row_sum = row.sum(axis=1)
    valid = row_sum > 0
    safe_sum = np.where(valid, row_sum, 1.0)
    weights = row / safe_sum[:, None]

    xe_observed = -log_probs[rows, noisy]
    xe_mixed = np.sum(weights * -log_probs, axis=1) - np.log(safe_sum)
    losses = np.where(valid, keep * xe_observed + (1.0 - keep) * xe_mixed, 0.0)

    onehot = np.zeros_like(probs)
    onehot[rows, noisy] = 1.0
    grad_logits = probs - keep[:, None] * onehot - (1.0 - keep)[:, None] * weights
    grad_logits[~valid] = 0.0
    grad_keep = np.where(valid, xe_observed - xe_mixed, 0.0)
    return losses, grad_logits, grad_keep, valid


def explicit_loss_batch(logits: np.ndarray, z_logits: np.ndarray, noisy: np.ndarray,
                        transition: TransitionMatrix):
    """L_e with p(z=1|x) = sigmoid(z_logits); returns (losses, grad_logits, grad_z, valid)."""
    keep = tc.sigmoid(z_logits)
    losses, grad_logits, grad_keep, valid = explicit_loss_mixed(logits, keep, noisy, transition)
    return losses, grad_logits, keep * (1.0 - keep) * grad_keep, valid


def explicit_loss(h: np.ndarray, z_logit: float, noisy: int,
                  transition: TransitionMatrix) -> Tuple[float, np.ndarray, float]:
    """L_e for one instance; returns (loss, dL/dh, dL/dz_logit)."""
    if not 0 <= int(noisy) < transition.num_classes:
        raise TargetIndexError(f"observed label {noisy} outside [0, {transition.num_classes})")
    losses, grad_h, grad_z, valid = explicit_loss_batch(
        np.atleast_2d(np.asarray(h, dtype=np.float64)), np.atleast_1d(float(z_logit)),
        np.atleast_1d(int(noisy)), transition)
    if not valid[0]:
        raise DegenerateRowError(f"transition row {noisy} sums to zero")
    return float(losses[0]), grad_h[0], float(grad_z[0])


def write_transition_csv(transition: Union[TransitionMatrix, np.ndarray], path: Union[str, Path]):
    """K header-less rows; row = observed class i, column = true class k."""
    values = transition.values if isinstance(transition, TransitionMatrix) else np.asarray(transition)
    np.savetxt(path, values, delimiter=",", fmt="%.17g")


def read_transition_csv(path: Union[str, Path]) -> TransitionMatrix:
    values = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    return TransitionMatrix(values).validate()
