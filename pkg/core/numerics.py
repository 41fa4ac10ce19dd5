"""
Dense float64 arithmetic shared by every other module. A matrix is a 2-d numpy array;
nothing here mutates its inputs.
"""
import dataclasses
import typing

import numpy as np

from . import errors

# smallest probability used inside logarithms
LOG_FLOOR = 1e-300


@dataclasses.dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    worst_index: typing.Tuple[int, int]


def as_matrix(values, name='matrix'):
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise errors.ShapeError(
            '{0} must be 2-dimensional, got shape {1}'.format(name, matrix.shape)
        )
    return matrix


def check_finite(matrix, name='matrix'):
    if not np.all(np.isfinite(matrix)):
        raise errors.NumericError('{0} has non-finite entries'.format(name))
    return matrix


def matmul(a, b):
    a = as_matrix(a, 'left operand')
    b = as_matrix(b, 'right operand')
    if a.shape[1] != b.shape[0]:
        raise errors.ShapeError(
            'Cannot multiply {0} by {1}'.format(a.shape, b.shape)
        )
    return check_finite(a @ b, 'product')


def softmax_rows(logits):
    logits = as_matrix(logits, 'logits')
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def log_softmax_rows(logits):
    logits = as_matrix(logits, 'logits')
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    encoded = np.zeros((labels.shape[0], k))
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded


def finite_diff_check(f, analytic_grad, point, h=1e-5):
    """
    Compares an analytic gradient against central differences of f at point.
    The relative error of each coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if not 0.0 < h <= 1e-2:
        raise errors.NumericError('Step h must be in (0, 1e-2], got {0}'.format(h))

    point = as_matrix(point, 'point')
    analytic_grad = as_matrix(analytic_grad, 'analytic gradient')
    if analytic_grad.shape != point.shape:
        raise errors.ShapeError(
            'Gradient shape {0} differs from point shape {1}'.format(
                analytic_grad.shape, point.shape
            )
        )

    probe = point.copy()
    worst_error = 0.0
    worst_index = (0, 0)
    for index in np.ndindex(*point.shape):
        original = probe[index]

        probe[index] = original + h
        f_plus = float(f(probe.copy()))
        probe[index] = original - h
        f_minus = float(f(probe.copy()))
        probe[index] = original

        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise errors.NumericError(
                'Function is not finite around coordinate {0}'.format(index)
            )

        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = analytic_grad[index]
        denominator = max(abs(analytic), abs(numeric), 1e-8)
        relative_error = abs(analytic - numeric) / denominator
        if relative_error > worst_error:
            worst_error = relative_error
            worst_index = (int(index[0]), int(index[1]))

    return GradCheckResult(max_relative_error=worst_error, worst_index=worst_index)


def make_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def spawn_seeds(seed, count):
    """
    Derives count independent 64-bit child seeds from seed, deterministically
    """
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]
