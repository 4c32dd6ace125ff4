"""
Evaluation metrics: bag-level ranking (P@N, average precision, PR curve),
instance-level accuracy and macro-F1, and transition recovery error.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from sklearn.metrics import accuracy_score, f1_score

from .errors import MetricError, ShapeError
from .noisemodel import TransitionMatrix, init_transition

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedPrediction:
    bag_id: str
    label: int
    score: float
    correct: bool


@dataclass(frozen=True)
class PRPoint:
    rank: int
    score: float
    precision: float
    recall: float


class EvalReport(BaseModel):
    """Everything `eval` reports; serialized with sorted keys."""
    against: str = "true"
    na_class: int = 0
    num_bags: int = 0
    num_ranked: int = 0
    total_positives: int = 0
    p_at_n: Dict[str, float] = Field(default_factory=dict)
    average_precision: Optional[float] = None
    pr_curve: List[Tuple[float, float]] = Field(default_factory=list, description="(recall, precision) per rank")
    accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    transition_max_abs: Optional[float] = None
    transition_mean_abs: Optional[float] = None


def rank_predictions(predictions: Sequence[RankedPrediction]) -> List[RankedPrediction]:
    """Descending score; ties by bag_id then label."""
    return sorted(predictions, key=lambda p: (-p.score, p.bag_id, p.label))


def bag_truths(labels: Sequence[int], bag_ids: Sequence[str]) -> Dict[str, int]:
    """Bag label = most frequent instance label (smallest class on ties)."""
    grouped: Dict[str, Counter] = {}
    for label, bag_id in zip(labels, bag_ids):
        grouped.setdefault(bag_id, Counter())[int(label)] += 1
    return {bag_id: min(counts, key=lambda label: (-counts[label], label)) for bag_id, counts in grouped.items()}


def rank_bag_predictions(predictions: Dict[str, Tuple[int, float]], truths: Dict[str, int],
                         na_class: int = 0) -> Tuple[List[RankedPrediction], int]:
    """Ranked positive (non-NA) bag predictions and the number of positive bags."""
    missing = set(predictions) - set(truths)
    if missing:
        raise ShapeError(f"{len(missing)} predicted bag(s) without a ground-truth label")
    ranked = [RankedPrediction(bag_id, int(label), float(score), int(label) == truths[bag_id])
              for bag_id, (label, score) in predictions.items() if label != na_class]
    total_positives = sum(1 for label in truths.values() if label != na_class)
    return rank_predictions(ranked), total_positives


def _check_ranked(ranked: Sequence[RankedPrediction]):
    if not ranked:
        raise MetricError("metric undefined for an empty ranking")
    if not all(np.isfinite(p.score) for p in ranked):
        raise MetricError("ranking contains a non-finite score")


def p_at_n(ranked: Sequence[RankedPrediction], n: int) -> float:
    """Fraction correct among the top min(n, len) predictions of an already ranked list."""
    _check_ranked(ranked)
    if n < 1:
        raise MetricError(f"P@N needs N >= 1, got {n}")
    top = ranked[:min(n, len(ranked))]
    return sum(p.correct for p in top) / len(top)


def average_precision(ranked: Sequence[RankedPrediction], total_positives: int) -> float:
    """Sum of precision@r over correct hits at rank r, divided by total_positives."""
    if total_positives < 1:
        raise MetricError("average precision needs at least one positive")
    total = Fraction(0)
    hits = 0
    for rank, prediction in enumerate(ranked, start=1):
        if prediction.correct:
            hits += 1
            total += Fraction(hits, rank)
    # exact rational sum, rounded once
    return float(total / total_positives)


def pr_curve(ranked: Sequence[RankedPrediction], total_positives: int) -> List[PRPoint]:
    _check_ranked(ranked)
    if total_positives < 1:
        raise MetricError("PR curve needs at least one positive")
    points = []
    hits = 0
    for rank, prediction in enumerate(ranked, start=1):
        hits += int(prediction.correct)
        points.append(PRPoint(rank, prediction.score, hits / rank, hits / total_positives))
    return points


def _values(matrix: Union[TransitionMatrix, np.ndarray]) -> np.ndarray:
    return matrix.values if isinstance(matrix, TransitionMatrix) else np.asarray(matrix, dtype=np.float64)


def transition_error(estimate: Union[TransitionMatrix, np.ndarray],
                     truth: Union[TransitionMatrix, np.ndarray]) -> Tuple[float, float]:
    """(max, mean) absolute difference over off-diagonal entries."""
    estimate, truth = _values(estimate), _values(truth)
    if estimate.shape != truth.shape:
        raise ShapeError(f"cannot compare transitions of shapes {estimate.shape} and {truth.shape}")
    off_diagonal = ~np.eye(estimate.shape[0], dtype=bool)
    differences = np.abs(estimate - truth)[off_diagonal]
    return float(differences.max()), float(differences.mean())


def empirical_transition(true_labels: Sequence[int], noisy_labels: Sequence[int],
                         num_classes: int) -> TransitionMatrix:
    """T estimated from labelled pairs: flip counts per true class, column-normalized.

    Classes never flipped keep the uniform off-diagonal column.
    """
    true_labels = np.asarray(true_labels, dtype=np.int64)
    noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
    counts = np.zeros((num_classes, num_classes))
    flipped = true_labels != noisy_labels
    np.add.at(counts, (noisy_labels[flipped], true_labels[flipped]), 1.0)
    values = init_transition(num_classes).values
    totals = counts.sum(axis=0)
    seen = totals > 0
    values[:, seen] = counts[:, seen] / totals[seen]
    return TransitionMatrix(values)


def accuracy(true_labels: Sequence[int], predicted: Sequence[int]) -> float:
    return float(accuracy_score(true_labels, predicted))


def macro_f1(true_labels: Sequence[int], predicted: Sequence[int], num_classes: int,
             exclude: Optional[int] = None) -> float:
    """Macro-averaged F1 over the classes, optionally leaving one (e.g. NA) out of the average."""
    labels = [label for label in range(num_classes) if label != exclude]
    return float(f1_score(true_labels, predicted, labels=labels, average="macro", zero_division=0))


def build_report(bag_predictions: Dict[str, Tuple[int, float]], truths: Dict[str, int], na_class: int,
                 p_at_ns: Sequence[int], against: str = "true",
                 instance_truth: Optional[Sequence[int]] = None, instance_pred: Optional[Sequence[int]] = None,
                 num_classes: Optional[int] = None,
                 transition_estimate: Optional[TransitionMatrix] = None,
                 transition_truth: Optional[TransitionMatrix] = None) -> Tuple[EvalReport, List[PRPoint]]:
    ranked, total_positives = rank_bag_predictions(bag_predictions, truths, na_class)
    report = EvalReport(against=against, na_class=na_class, num_bags=len(bag_predictions),
                        num_ranked=len(ranked), total_positives=total_positives)
    points: List[PRPoint] = []
    if ranked:
        report.p_at_n = {str(n): p_at_n(ranked, n) for n in p_at_ns}
    if total_positives:
        report.average_precision = average_precision(ranked, total_positives)
        if ranked:
            points = pr_curve(ranked, total_positives)
            report.pr_curve = [(p.recall, p.precision) for p in points]
    else:
        logger.warning("no positive bags in the evaluation data; AP and PR curve omitted")
    if instance_truth is not None and instance_pred is not None and len(instance_truth):
        report.accuracy = accuracy(instance_truth, instance_pred)
        if num_classes is not None:
            report.macro_f1 = macro_f1(instance_truth, instance_pred, num_classes, exclude=na_class)
    if transition_estimate is not None and transition_truth is not None:
        report.transition_max_abs, report.transition_mean_abs = transition_error(transition_estimate,
                                                                                 transition_truth)
    return report, points


def write_report(report: EvalReport, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")


def write_pr_table(points: Sequence[PRPoint], path: Union[str, Path]):
    """Tab-separated rank, score, precision, recall."""
    table = pd.DataFrame([(p.rank, p.score, p.precision, p.recall) for p in points],
                         columns=["rank", "score", "precision", "recall"])
    table.to_csv(path, sep="\t", index=False, float_format="%.12g")
