"""
Training objectives. Every loss returns its value together with the analytic gradient
with respect to the logits of the batch.

The accuracy/uncertainty losses split a batch by correctness and by whether the
normalised entropy of a sample is above the threshold u_theta. Membership in those
sets is held fixed while differentiating; gradients flow through the confidence
a_i and through tan(u_i).
"""
import dataclasses
import typing

import numpy as np

from . import errors
from . import numerics

EPSILON = 1e-8

BASE_LOSSES = ('ce', 'ls')
POSCAL_UPDATE_CHOICES = (1, 3, 5)


class ProbBatch(object):
    def __init__(self, probs, gold):
        probs = numerics.as_matrix(probs, 'probabilities')
        gold = np.asarray(gold, dtype=np.int64).reshape(-1)
        if gold.shape[0] != probs.shape[0]:
            raise errors.ShapeError(
                '{0} labels for {1} probability rows'.format(gold.shape[0], probs.shape[0])
            )
        if gold.size and (gold.min() < 0 or gold.max() >= probs.shape[1]):
            raise errors.DataError('Gold labels must lie in [0, {0})'.format(probs.shape[1]))

        self.probs = probs
        self.gold = gold

        # np.argmax picks the first index on ties
        self.pred = np.argmax(probs, axis=1) if probs.shape[0] else np.zeros(0, np.int64)

    @classmethod
    def from_logits(cls, logits, gold):
        return cls(numerics.softmax_rows(logits), gold)

    @property
    def n(self):
        return self.probs.shape[0]

    @property
    def k(self):
        return self.probs.shape[1]

    @property
    def correct(self):
        return self.pred == self.gold

    @property
    def max_probs(self):
        return self.probs[np.arange(self.n), self.pred]


@dataclasses.dataclass(frozen=True)
class AvuPartition:
    n_ac: float
    n_au: float
    n_ic: float
    n_iu: float
    u_theta: float


@dataclasses.dataclass(eq=False)
class LossValue:
    value: float
    grad_logits: np.ndarray
    components: typing.Dict[str, float] = dataclasses.field(default_factory=dict)


def confidence(p_row, gold, pred):
    top = float(np.max(p_row))
    return top if pred == gold else 1.0 - top


def uncertainty(p_row):
    return float(uncertainties(numerics.as_matrix(p_row))[0])


def uncertainties(probs):
    """
    Shannon entropy of each row divided by ln K, clamped to [0, 1]
    """
    k = probs.shape[1]
    plogp = np.where(probs > 0, probs * np.log(np.maximum(probs, numerics.LOG_FLOOR)), 0.0)
    return np.clip(-plogp.sum(axis=1) / np.log(k), 0.0, 1.0)


def _confidences(batch):
    top = batch.max_probs
    return np.where(batch.correct, top, 1.0 - top)


def _soft_masses(batch, u_theta):
    """
    Per-sample contribution and its set: 0 AC, 1 AU, 2 IC, 3 IU
    """
    a = _confidences(batch)
    u = uncertainties(batch.probs)
    tan_u = np.tan(u)
    certain = u <= u_theta
    contribution = np.where(certain, a * (1.0 - tan_u), a * tan_u)
    sets = np.where(batch.correct, 0, 2) + np.where(certain, 0, 1)
    return contribution, sets, (a, u, tan_u, certain)


def partition_avu(batch, u_theta):
    if not 0.0 <= u_theta <= 1.0:
        raise errors.ConfigError('u_theta must be in [0, 1], got {0}'.format(u_theta))
    contribution, sets, _ = _soft_masses(batch, u_theta)
    masses = [float(np.sum(contribution[sets == index])) for index in range(4)]
    return AvuPartition(*masses, u_theta=u_theta)


def _grad_through_masses(batch, u_theta, mass_weights):
    """
    Chains dLoss/dn_set (mass_weights[set]) down to the logits
    """
    contribution, sets, (a, u, tan_u, certain) = _soft_masses(batch, u_theta)
    probs = batch.probs
    rows = np.arange(batch.n)
    k = batch.k

    d_contribution = np.asarray(mass_weights)[sets]
    d_a = d_contribution * np.where(certain, 1.0 - tan_u, tan_u)
    d_tan = d_contribution * np.where(certain, -a, a)
    d_u = d_tan / np.cos(u) ** 2

    # dLoss/dp: a_i reads the top probability, u_i reads every entry
    d_probs = -(np.log(np.maximum(probs, numerics.LOG_FLOOR)) + 1.0) / np.log(k)
    d_probs *= d_u[:, None]
    d_probs[rows, batch.pred] += np.where(batch.correct, d_a, -d_a)

    # softmax jacobian: dz = p * (dp - <dp, p>)
    return probs * (d_probs - np.sum(d_probs * probs, axis=1, keepdims=True))


def rau_loss(batch, u_theta):
    part = partition_avu(batch, u_theta)
    accurate = part.n_ac + part.n_au + EPSILON
    inaccurate = part.n_ic + part.n_iu + EPSILON
    total = 1.0 + part.n_au / accurate + part.n_ic / inaccurate

    mass_weights = [
        -part.n_au / accurate ** 2 / total,
        (part.n_ac + EPSILON) / accurate ** 2 / total,
        (part.n_iu + EPSILON) / inaccurate ** 2 / total,
        -part.n_ic / inaccurate ** 2 / total,
    ]
    return LossValue(
        value=float(np.log(total)),
        grad_logits=_grad_through_masses(batch, u_theta, mass_weights),
    )


def avuc_loss(batch, u_theta):
    part = partition_avu(batch, u_theta)
    numerator = part.n_au + part.n_ic
    denominator = part.n_ac + part.n_iu + EPSILON
    total = 1.0 + numerator / denominator

    up = 1.0 / denominator / total
    down = -numerator / denominator ** 2 / total
    return LossValue(
        value=float(np.log(total)),
        grad_logits=_grad_through_masses(batch, u_theta, [down, up, up, down]),
    )


def avu_score(batch, u_theta):
    """
    Hard-count share of accurate-certain and inaccurate-uncertain samples
    """
    if batch.n == 0:
        return 0.0
    certain = uncertainties(batch.probs) <= u_theta
    agreeing = np.sum(batch.correct & certain) + np.sum(~batch.correct & ~certain)
    return float(agreeing) / batch.n


def _soft_target_cross_entropy(logits, targets):
    logits = numerics.as_matrix(logits, 'logits')
    n = logits.shape[0]
    log_probs = numerics.log_softmax_rows(logits)
    value = -float(np.sum(targets * log_probs)) / n
    grad = (np.exp(log_probs) - targets) / n
    return LossValue(value=value, grad_logits=grad)


def _targets(logits, gold):
    logits = numerics.as_matrix(logits, 'logits')
    gold = np.asarray(gold, dtype=np.int64).reshape(-1)
    if gold.shape[0] != logits.shape[0]:
        raise errors.ShapeError(
            '{0} labels for {1} logit rows'.format(gold.shape[0], logits.shape[0])
        )
    return numerics.one_hot(gold, logits.shape[1])


def cross_entropy(logits, gold):
    return _soft_target_cross_entropy(logits, _targets(logits, gold))


def label_smoothing_loss(logits, gold, eps):
    if not 0.0 <= eps <= 1.0:
        raise errors.ConfigError('Smoothing eps must be in [0, 1], got {0}'.format(eps))
    onehot = _targets(logits, gold)
    k = onehot.shape[1]
    return _soft_target_cross_entropy(logits, (1.0 - eps) * onehot + eps / k)


def poscal_kl(probs, empirical):
    """
    Mean KL(empirical || probs) over rows. The empirical side is a constant, so
    the logit gradient of each row reduces to (p - q) / N.
    """
    probs = numerics.as_matrix(probs, 'probabilities')
    empirical = numerics.as_matrix(empirical, 'empirical probabilities')
    if probs.shape != empirical.shape:
        raise errors.ShapeError(
            'Probabilities {0} and empirical {1} differ in shape'.format(
                probs.shape, empirical.shape
            )
        )
    n = probs.shape[0]
    ratio = np.log(np.maximum(empirical, numerics.LOG_FLOOR)) - np.log(
        np.maximum(probs, numerics.LOG_FLOOR)
    )
    terms = np.where(empirical > 0, empirical * ratio, 0.0)
    return LossValue(
        value=float(np.sum(terms)) / n,
        grad_logits=(probs - empirical) / n,
    )


class EmpiricalTable(object):
    """
    For each label and each probability bin of that label's predicted probability,
    the fraction of training samples in the bin whose gold label is that label.
    """

    def __init__(self, frequencies):
        self.frequencies = frequencies

    @property
    def m(self):
        return self.frequencies.shape[1]

    @staticmethod
    def _bins(probs, m):
        return np.clip(np.ceil(probs * m - 1e-9).astype(np.int64), 1, m) - 1

    @classmethod
    def build(cls, probs, gold, m=10):
        probs = numerics.as_matrix(probs, 'probabilities')
        k = probs.shape[1]
        bins = cls._bins(probs, m)
        is_gold = numerics.one_hot(gold, k)

        hits = np.zeros((k, m))
        counts = np.zeros((k, m))
        for label in range(k):
            np.add.at(counts[label], bins[:, label], 1.0)
            np.add.at(hits[label], bins[:, label], is_gold[:, label])

        # empty bins fall back to the bin's own probability level
        centers = (np.arange(m) + 0.5) / m
        frequencies = np.where(counts > 0, hits / np.maximum(counts, 1.0), centers)
        return cls(frequencies)

    def empirical_for(self, probs):
        probs = numerics.as_matrix(probs, 'probabilities')
        bins = self._bins(probs, self.m)
        raw = self.frequencies[np.arange(probs.shape[1])[None, :], bins]
        sums = raw.sum(axis=1, keepdims=True)
        uniform = np.full_like(raw, 1.0 / probs.shape[1])
        return np.where(sums > 0, raw / np.where(sums > 0, sums, 1.0), uniform)


@dataclasses.dataclass(frozen=True)
class LossPlan:
    base: str = 'ce'
    ls_eps: float = 0.1
    rau_weight: float = 0.0
    avuc_weight: float = 0.0
    kl_weight: float = 0.0
    poscal_updates_per_epoch: int = 1

    def __post_init__(self):
        if self.base not in BASE_LOSSES:
            raise errors.ConfigError(
                'Base loss must be one of {0}, got {1}'.format(BASE_LOSSES, self.base)
            )
        for name in ('rau_weight', 'avuc_weight', 'kl_weight'):
            if getattr(self, name) < 0:
                raise errors.ConfigError('{0} must be >= 0'.format(name))
        if self.rau_weight > 0 and self.avuc_weight > 0:
            raise errors.ConfigError('RAU and AVUC auxiliaries are mutually exclusive')
        if not 0.0 <= self.ls_eps <= 1.0:
            raise errors.ConfigError('ls_eps must be in [0, 1]')
        if self.poscal_updates_per_epoch not in POSCAL_UPDATE_CHOICES:
            raise errors.ConfigError(
                'poscal_updates_per_epoch must be one of {0}'.format(POSCAL_UPDATE_CHOICES)
            )

    @property
    def uses_threshold(self):
        return self.rau_weight > 0 or self.avuc_weight > 0

    def without_auxiliaries(self):
        return dataclasses.replace(self, rau_weight=0.0, avuc_weight=0.0)


def total_loss(logits, gold, cfg, u_theta=None, empirical=None):
    """
    Weighted sum of the base loss and the auxiliaries selected by cfg (a LossPlan).
    u_theta is needed when RAU or AVUC carry weight, empirical when KL does.
    """
    if cfg.base == 'ls':
        base = label_smoothing_loss(logits, gold, cfg.ls_eps)
    else:
        base = cross_entropy(logits, gold)

    value = base.value
    grad = base.grad_logits.copy()
    components = {cfg.base: base.value}

    if cfg.uses_threshold or cfg.kl_weight > 0:
        batch = ProbBatch.from_logits(logits, gold)

    auxiliaries = []
    if cfg.rau_weight > 0:
        auxiliaries.append(('rau', cfg.rau_weight, rau_loss))
    if cfg.avuc_weight > 0:
        auxiliaries.append(('avuc', cfg.avuc_weight, avuc_loss))

    for name, weight, loss_fn in auxiliaries:
        if u_theta is None:
            raise errors.ConfigError('{0} loss needs an uncertainty threshold'.format(name))
        term = loss_fn(batch, u_theta)
        value += weight * term.value
        grad += weight * term.grad_logits
        components[name] = term.value

    if cfg.kl_weight > 0:
        if empirical is None:
            raise errors.ConfigError('KL loss needs an empirical probability matrix')
        term = poscal_kl(batch.probs, empirical)
        value += cfg.kl_weight * term.value
        grad += cfg.kl_weight * term.grad_logits
        components['kl'] = term.value

    return LossValue(value=value, grad_logits=grad, components=components)
