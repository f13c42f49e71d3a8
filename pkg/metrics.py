import logging
import unittest
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix, roc_auc_score

logger = logging.getLogger(__name__)


class UndefinedAucError(ValueError):
    """
    Raised when the labels hold a single class. The report with every other metric filled in is attached.
    """

    def __init__(self, message: str, report: 'MetricsReport'):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    precision: float
    recall: float
    f: float
    accuracy: float
    auc: Optional[float]

    def as_dict(self) -> Dict:
        return asdict(self)

    def summary(self) -> str:
        auc = 'undefined' if self.auc is None else f'{self.auc:.4f}'
        return (f'precision={self.precision:.4f} recall={self.recall:.4f} f={self.f:.4f} '
                f'accuracy={self.accuracy:.4f} auc={auc}')


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


def compute_metrics(probabilities: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> MetricsReport:
    """
    Confusion counts at a cut, precision, recall, F, accuracy and the rank AUC (ties count one half).
    A score at or above the threshold is predicted fraud.
    :param probabilities: predicted fraud probabilities
    :param labels: true 0/1 labels
    :param threshold: classification cut
    :return: a MetricsReport instance
    :raises ValueError: if the sequences are empty or differ in length
    :raises UndefinedAucError: if the labels hold a single class
    """
    scores = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if scores.size != labels.size:
        raise ValueError(f'{scores.size} scores for {labels.size} labels')
    if scores.size == 0:
        raise ValueError('metrics of an empty set')

    predictions = (scores >= threshold).astype(np.int64)
    tn, fp, fn, tp = (int(count) for count in confusion_matrix(labels, predictions, labels=[0, 1]).ravel())
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = (tp + tn) / scores.size

    if np.unique(labels).size < 2:
        report = MetricsReport(tp, tn, fp, fn, precision, recall, f, accuracy, None)
        raise UndefinedAucError(f'AUC is undefined for labels of a single class ({labels[0]})', report)
    auc = float(roc_auc_score(labels, scores))
    return MetricsReport(tp, tn, fp, fn, precision, recall, f, accuracy, auc)


class TestComputeMetrics(unittest.TestCase):

    def test_hand_counts(self):
        # TP=2, FN=1, FP=1, TN=6
        labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]
        scores = [0.9, 0.8, 0.2, 0.7, 0.1, 0.1, 0.3, 0.4, 0.2, 0.0]
        report = compute_metrics(scores, labels)
        self.assertEqual((report.tp, report.fn, report.fp, report.tn), (2, 1, 1, 6))
        self.assertAlmostEqual(report.precision, 2 / 3)
        self.assertAlmostEqual(report.recall, 2 / 3)
        self.assertAlmostEqual(report.f, 2 / 3)
        self.assertAlmostEqual(report.accuracy, 0.8)

    def test_perfect(self):
        report = compute_metrics([0.9, 0.6, 0.1, 0.4], [1, 1, 0, 0])
        for value in (report.precision, report.recall, report.f, report.accuracy, report.auc):
            self.assertEqual(value, 1.0)

    def test_ties(self):
        self.assertEqual(compute_metrics([0.5] * 6, [1, 0, 1, 0, 0, 0]).auc, 0.5)

    def test_zero_denominators(self):
        report = compute_metrics([0.1, 0.2, 0.3], [1, 0, 0])
        self.assertEqual((report.precision, report.recall, report.f), (0.0, 0.0, 0.0))

    def test_single_class(self):
        with self.assertRaises(UndefinedAucError) as context:
            compute_metrics([0.7, 0.2], [0, 0])
        report = context.exception.report
        self.assertIsNone(report.auc)
        self.assertEqual((report.tn, report.fp), (1, 1))
        self.assertEqual(report.accuracy, 0.5)

    def test_invalid_input(self):
        with self.assertRaises(ValueError):
            compute_metrics([0.5], [1, 0])
        with self.assertRaises(ValueError):
            compute_metrics([], [])

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = rng.integers(0, 10, n) / 9.0  # coarse grid to produce ties
            report = compute_metrics(scores, labels)
            predicted = [s >= 0.5 for s in scores]
            counts = {'tp': 0, 'tn': 0, 'fp': 0, 'fn': 0}
            for p, y in zip(predicted, labels):
                counts[('t' if p == bool(y) else 'f') + ('p' if p else 'n')] += 1
            self.assertEqual((report.tp, report.tn, report.fp, report.fn),
                             (counts['tp'], counts['tn'], counts['fp'], counts['fn']))
            self.assertEqual(report.tp + report.tn + report.fp + report.fn, n)
            fraud, benign = scores[labels == 1], scores[labels == 0]
            pairs = [1.0 if a > b else 0.5 if a == b else 0.0 for a in fraud for b in benign]
            self.assertAlmostEqual(report.auc, sum(pairs) / len(pairs), delta=1e-9)
            if report.precision + report.recall:
                self.assertAlmostEqual(report.f, 2 / (1 / report.precision + 1 / report.recall))


if __name__ == '__main__':
    unittest.main(exit=False)

    report = compute_metrics([0.9, 0.3, 0.6, 0.2, 0.8], [1, 0, 1, 0, 0])
    print(report.summary())
