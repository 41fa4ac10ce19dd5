import csv
import dataclasses
import typing

import numpy as np
import scipy.optimize

from . import errors
from . import losses
from . import numerics

DEFAULT_BINS = 10

TEMPERATURE_BOUNDS = (0.05, 20.0)
TEMPERATURE_TOLERANCE = 1e-4

RELIABILITY_HEADER = [
    'label',
    'bin_lo',
    'bin_hi',
    'count',
    'accuracy',
    'avg_confidence',
    'gap',
]

# confidences within this distance above a bin edge still belong to the lower bin
BIN_EDGE_TOLERANCE = 1e-9


def bin_index(confidences, m):
    """
    0-based bin of each confidence: ceil(conf * m) with right-inclusive edges, 0 -> first bin
    """
    raw = np.ceil(np.asarray(confidences) * m - BIN_EDGE_TOLERANCE).astype(np.int64)
    return np.clip(raw, 1, m) - 1


class ReliabilityBins(object):
    """
    Cell (i, j) holds the samples grouped under label i whose confidence falls in bin j
    """

    def __init__(self, counts, accuracy, confidence):
        self.counts = np.asarray(counts, dtype=np.int64)
        self.accuracy = np.asarray(accuracy, dtype=np.float64)
        self.confidence = np.asarray(confidence, dtype=np.float64)

    @property
    def k(self):
        return self.counts.shape[0]

    @property
    def m(self):
        return self.counts.shape[1]

    @property
    def n(self):
        return int(self.counts.sum())

    def __eq__(self, other):
        return (
            isinstance(other, ReliabilityBins)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.accuracy, other.accuracy)
            and np.array_equal(self.confidence, other.confidence)
        )

    def per_label_ece(self, n=None):
        """
        Inner sum of the classwise ECE for each label, sum_j |B_ij| / N * |Acc_ij - Con_ij|
        """
        n = self.n if n is None else n
        if n == 0:
            return np.zeros(self.k)
        gaps = np.abs(self.accuracy - self.confidence)
        return np.sum(self.counts / n * gaps, axis=1)


def _cells(keys, confidences, correct, k, m):
    bins = bin_index(confidences, m)
    counts = np.zeros((k, m), dtype=np.int64)
    hits = np.zeros((k, m))
    confidence_sums = np.zeros((k, m))
    np.add.at(counts, (keys, bins), 1)
    np.add.at(hits, (keys, bins), correct.astype(np.float64))
    np.add.at(confidence_sums, (keys, bins), confidences)

    occupied = np.maximum(counts, 1)
    return ReliabilityBins(
        counts,
        np.where(counts > 0, hits / occupied, 0.0),
        np.where(counts > 0, confidence_sums / occupied, 0.0),
    )


def bin_predictions(batch, m=DEFAULT_BINS, group_by='pred'):
    if m < 1:
        raise errors.ConfigError('Bin count must be >= 1, got {0}'.format(m))
    if group_by not in ('pred', 'gold'):
        raise errors.ConfigError('group_by must be pred or gold, got {0}'.format(group_by))

    keys = batch.pred if group_by == 'pred' else batch.gold
    return _cells(keys, batch.max_probs, batch.correct, batch.k, m)


def ece_classwise(bins, n, k):
    if n == 0 or k == 0:
        return 0.0
    return float(np.sum(bins.per_label_ece(n))) / k


def ece_standard(batch, m=DEFAULT_BINS):
    if batch.n == 0:
        return 0.0
    pooled = _cells(
        np.zeros(batch.n, dtype=np.int64), batch.max_probs, batch.correct, 1, m
    )
    return float(pooled.per_label_ece(batch.n)[0])


def confidence_histogram(batch, m=DEFAULT_BINS):
    """
    Share of samples, mean confidence and accuracy per confidence bin over all labels
    """
    pooled = _cells(
        np.zeros(batch.n, dtype=np.int64), batch.max_probs, batch.correct, 1, m
    )
    edges = np.arange(m + 1) / m
    return [
        {
            'bin_lo': float(edges[j]),
            'bin_hi': float(edges[j + 1]),
            'share': float(pooled.counts[0, j]) / batch.n if batch.n else 0.0,
            'avg_confidence': float(pooled.confidence[0, j]),
            'accuracy': float(pooled.accuracy[0, j]),
        }
        for j in range(m)
    ]


def _per_label_scores(batch, k):
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (batch.gold, batch.pred), 1)

    true_positive = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    actual = confusion.sum(axis=1).astype(np.float64)

    precision = np.where(predicted > 0, true_positive / np.maximum(predicted, 1.0), 0.0)
    recall = np.where(actual > 0, true_positive / np.maximum(actual, 1.0), 0.0)
    denominator = precision + recall
    f1 = np.where(
        denominator > 0, 2.0 * precision * recall / np.where(denominator > 0, denominator, 1.0), 0.0
    )
    return precision, recall, f1


@dataclasses.dataclass(frozen=True)
class TemperatureFit:
    t: float
    dev_nll_before: float
    dev_nll_after: float

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass(eq=False)
class CalibrationReport:
    ece_classwise: float
    ece_standard: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_label_f1: typing.List[float]
    per_label_ece: typing.List[float]
    bins: typing.Optional[ReliabilityBins] = None
    avu: typing.Optional[float] = None
    temperature: typing.Optional[TemperatureFit] = None

    def to_dict(self):
        return {
            'ece_classwise': self.ece_classwise,
            'ece_standard': self.ece_standard,
            'accuracy': self.accuracy,
            'precision': self.precision,
            'recall': self.recall,
            'f1': self.f1,
            'per_label': [
                {'label': label, 'f1': f1, 'ece': ece}
                for label, (f1, ece) in enumerate(zip(self.per_label_f1, self.per_label_ece))
            ],
            'avu': self.avu,
            'temperature': self.temperature.to_dict() if self.temperature else None,
        }

    def format_percent(self):
        """
        The headline metrics scaled by 100 and rounded to two decimals, for display
        """
        return {
            name: round(100.0 * getattr(self, name), 2)
            for name in ('accuracy', 'precision', 'recall', 'f1', 'ece_classwise', 'ece_standard')
        }


def classification_report(batch, k):
    """
    Accuracy and macro precision/recall/F1. Returns a report with the calibration fields
    left at 0; calibration_report fills them.
    """
    if batch.n and (batch.gold.max() >= k or batch.pred.max() >= k):
        raise errors.DataError('Labels must lie in [0, {0})'.format(k))

    precision, recall, f1 = _per_label_scores(batch, k)
    accuracy = float(np.mean(batch.correct)) if batch.n else 0.0
    return CalibrationReport(
        ece_classwise=0.0,
        ece_standard=0.0,
        accuracy=accuracy,
        precision=float(np.mean(precision)),
        recall=float(np.mean(recall)),
        f1=float(np.mean(f1)),
        per_label_f1=[float(value) for value in f1],
        per_label_ece=[0.0] * k,
    )


def calibration_report(batch, m=DEFAULT_BINS, group_by='pred', u_theta=None, temperature=None):
    k = batch.k
    bins = bin_predictions(batch, m, group_by=group_by)
    report = classification_report(batch, k)
    report.ece_classwise = ece_classwise(bins, batch.n, k)
    report.ece_standard = ece_standard(batch, m)
    report.per_label_ece = [float(value) for value in bins.per_label_ece(batch.n)]
    report.bins = bins
    report.avu = losses.avu_score(batch, u_theta) if u_theta is not None else None
    report.temperature = temperature
    return report


def low_frequency_report(batch, train_label_counts, worst_n, m=DEFAULT_BINS):
    """
    The worst_n least frequent training labels (ties broken by label id) with their
    F1 and ECE contribution, plus the averages over those labels
    """
    counts = np.asarray(train_label_counts)
    k = batch.k
    if counts.shape[0] != k:
        raise errors.ShapeError(
            '{0} label counts for {1} labels'.format(counts.shape[0], k)
        )
    if not 1 <= worst_n <= k:
        raise errors.ConfigError('worst_n must be in [1, {0}], got {1}'.format(k, worst_n))

    _, _, f1 = _per_label_scores(batch, k)
    per_label_ece = bin_predictions(batch, m).per_label_ece(batch.n)

    ranked = np.argsort(counts, kind='stable')[:worst_n]
    rows = [
        {
            'rank': rank + 1,
            'label': int(label),
            'train_count': int(counts[label]),
            'f1': float(f1[label]),
            'ece': float(per_label_ece[label]),
        }
        for rank, label in enumerate(ranked)
    ]
    return {
        'labels': rows,
        'average_f1': float(np.mean([row['f1'] for row in rows])),
        'average_ece': float(np.mean([row['ece'] for row in rows])),
    }


def apply_temperature(logits, t):
    if t <= 0:
        raise errors.ConfigError('Temperature must be > 0, got {0}'.format(t))
    return numerics.as_matrix(logits, 'logits') / t


def _nll(logits, gold, t):
    log_probs = numerics.log_softmax_rows(logits / t)
    return -float(np.mean(log_probs[np.arange(logits.shape[0]), gold]))


def fit_temperature(dev_logits, gold):
    """
    Single temperature minimising dev NLL over [0.05, 20]. NLL is convex in 1/T, hence
    unimodal in T, so a bounded scalar search finds the optimum.
    """
    dev_logits = numerics.as_matrix(dev_logits, 'dev logits')
    gold = np.asarray(gold, dtype=np.int64).reshape(-1)
    if dev_logits.shape[0] == 0:
        raise errors.DataError('Cannot fit a temperature on an empty dev set')
    if gold.shape[0] != dev_logits.shape[0]:
        raise errors.ShapeError(
            '{0} labels for {1} logit rows'.format(gold.shape[0], dev_logits.shape[0])
        )

    nll_before = _nll(dev_logits, gold, 1.0)
    result = scipy.optimize.minimize_scalar(
        lambda t: _nll(dev_logits, gold, t),
        bounds=TEMPERATURE_BOUNDS,
        method='bounded',
        options={'xatol': TEMPERATURE_TOLERANCE},
    )
    t = float(result.x)
    nll_after = _nll(dev_logits, gold, t)

    # the search is approximate, never hand back something worse than leaving logits alone
    if nll_after > nll_before:
        t, nll_after = 1.0, nll_before

    return TemperatureFit(t=t, dev_nll_before=nll_before, dev_nll_after=nll_after)


def emit_reliability_csv(bins, path):
    edges = np.arange(bins.m + 1) / bins.m
    try:
        with open(path, 'w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(RELIABILITY_HEADER)
            for label in range(bins.k):
                for j in range(bins.m):
                    count = int(bins.counts[label, j])
                    if count == 0:
                        continue
                    accuracy = float(bins.accuracy[label, j])
                    avg_confidence = float(bins.confidence[label, j])
                    writer.writerow(
                        [
                            label,
                            repr(float(edges[j])),
                            repr(float(edges[j + 1])),
                            count,
                            repr(accuracy),
                            repr(avg_confidence),
                            repr(abs(accuracy - avg_confidence)),
                        ]
                    )
    except OSError as exc:
        raise errors.StorageError(
            'Failed to write reliability csv {0}: {1}'.format(path, exc)
        )


def read_reliability_csv(path, m, k):
    counts = np.zeros((k, m), dtype=np.int64)
    accuracy = np.zeros((k, m))
    confidence = np.zeros((k, m))
    try:
        with open(path, 'r', newline='') as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                label = int(row['label'])
                j = int(bin_index([float(row['bin_hi'])], m)[0])
                counts[label, j] = int(row['count'])
                accuracy[label, j] = float(row['accuracy'])
                confidence[label, j] = float(row['avg_confidence'])
    except OSError as exc:
        raise errors.StorageError('Failed to read reliability csv {0}: {1}'.format(path, exc))
    except (KeyError, ValueError, IndexError) as exc:
        raise errors.DataError('Malformed reliability csv {0}: {1}'.format(path, exc))

    return ReliabilityBins(counts, accuracy, confidence)
