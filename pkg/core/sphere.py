import csv
import dataclasses
import multiprocessing.pool
import time

import humanfriendly
import numpy as np

import clients.logging
from . import errors
from . import numerics

UNIT_NORM_TOLERANCE = 1e-9


class FrameMatrix(object):
    """
    K label vectors of dimension H, one unit-norm row per label. The frame is fixed
    before training and never updated by it.
    """

    def __init__(self, x, check=True):
        x = numerics.as_matrix(x, 'frame').copy()
        if check:
            if x.shape[0] < 2 or x.shape[1] < 2:
                raise errors.ShapeError(
                    'Frame needs k >= 2 and h >= 2, got {0}'.format(x.shape)
                )
            norms = np.linalg.norm(x, axis=1)
            if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOLERANCE:
                raise errors.NumericError('Frame rows must have unit norm')
        self._x = x
        self._x.setflags(write=False)

    @property
    def x(self):
        return self._x

    @property
    def k(self):
        return self._x.shape[0]

    @property
    def h(self):
        return self._x.shape[1]

    def __eq__(self, other):
        return isinstance(other, FrameMatrix) and np.array_equal(self._x, other.x)

    def __repr__(self):
        return 'FrameMatrix(k={0}, h={1})'.format(self.k, self.h)


@dataclasses.dataclass(frozen=True)
class FrameOptConfig:
    max_iters: int = 2000
    step_size: float = 0.1
    tolerance: float = 1e-10
    seed: int = 0
    restarts: int = 5
    parallel: int = 1

    # temperature of the log-sum-exp relaxation of each row max, 0 for the plain subgradient
    smoothing: float = 0.1

    def __post_init__(self):
        if self.max_iters < 1:
            raise errors.ConfigError('max_iters must be >= 1')
        if self.step_size <= 0:
            raise errors.ConfigError('step_size must be > 0')
        if self.tolerance < 0:
            raise errors.ConfigError('tolerance must be >= 0')
        if self.restarts < 1:
            raise errors.ConfigError('restarts must be >= 1')
        if self.parallel < 1:
            raise errors.ConfigError('parallel must be >= 1')
        if self.smoothing < 0:
            raise errors.ConfigError('smoothing must be >= 0')


def _shifted_gram(x):
    return x @ x.T - 2.0 * np.eye(x.shape[0])


def gram_penalty(frame):
    z = _shifted_gram(frame.x)
    return float(np.mean(np.max(z, axis=1)))


def gram_penalty_grad(frame):
    """
    Subgradient of the mean row max of X X^T - 2I. When a row max is attained more
    than once, the first index wins.
    """
    x = frame.x
    k = x.shape[0]
    z = _shifted_gram(x)
    selected = np.argmax(z, axis=1)

    grad = np.zeros_like(x)
    for row, column in enumerate(selected):
        if row == column:
            # d/dx_i (x_i . x_i - 2)
            grad[row] += 2.0 * x[row] / k
        else:
            grad[row] += x[column] / k
            grad[column] += x[row] / k
    return grad


def max_pairwise_cosine(frame):
    gram = frame.x @ frame.x.T
    np.fill_diagonal(gram, -np.inf)
    return float(np.max(gram))


def _smoothed_penalty_grad(x, temperature):
    k = x.shape[0]
    z = _shifted_gram(x)
    np.fill_diagonal(z, -np.inf)
    weights = numerics.softmax_rows(z / temperature)

    # Z is symmetric, so each weight w_ij feeds both x_i and x_j
    return (weights @ x + weights.T @ x) / k


def _tangent(grad, x):
    return grad - np.sum(grad * x, axis=1, keepdims=True) * x


def _normalize_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class FrameOptimizer(object):
    def __init__(self, logger, cfg):
        self._logger = logger.get_child('sphere')
        self._cfg = cfg

        self._logger.debug('Initialized', **dataclasses.asdict(cfg))

    def optimize(self, k, h):
        if k < 2 or h < 2:
            self._logger.log_and_raise(
                'error', 'Frame needs k >= 2 and h >= 2', k=k, h=h, exc_type=errors.ConfigError
            )

        start_time = time.time()
        seeds = numerics.spawn_seeds(self._cfg.seed, self._cfg.restarts)

        with multiprocessing.pool.ThreadPool(processes=self._cfg.parallel) as pool:
            results = pool.starmap(
                self._descend, [(k, h, seed, index) for index, seed in enumerate(seeds)]
            )

        # lowest objective wins, earliest restart on ties
        best_x, best_objective = results[0]
        for x, objective in results[1:]:
            if objective < best_objective:
                best_x, best_objective = x, objective

        frame = FrameMatrix(best_x)
        self._logger.info(
            'Frame optimized',
            k=k,
            h=h,
            gram_penalty=best_objective,
            max_pairwise_cosine=max_pairwise_cosine(frame),
            elapsed=humanfriendly.format_timespan(time.time() - start_time),
        )
        return frame

    def _descend(self, k, h, seed, restart_index):
        rng = numerics.make_rng(seed)
        x = _normalize_rows(rng.standard_normal((k, h)))

        objective = gram_penalty(FrameMatrix(x, check=False))
        initial_objective = objective
        best_x, best_objective = x, objective

        # the surrogate drives the steps, the exact penalty decides what gets kept
        surrogate = self._surrogate(x)
        iteration = 0
        for iteration in range(1, self._cfg.max_iters + 1):
            if self._cfg.smoothing > 0:
                grad = _smoothed_penalty_grad(x, self._cfg.smoothing)
            else:
                grad = gram_penalty_grad(FrameMatrix(x, check=False))

            x = _normalize_rows(x - self._cfg.step_size * _tangent(grad, x))
            objective = gram_penalty(FrameMatrix(x, check=False))
            if objective < best_objective:
                best_x, best_objective = x, objective

            next_surrogate = self._surrogate(x)
            if abs(surrogate - next_surrogate) < self._cfg.tolerance:
                break
            surrogate = next_surrogate

        self._logger.verbose(
            'Restart finished',
            restart=restart_index,
            iterations=iteration,
            initial_objective=initial_objective,
            best_objective=best_objective,
        )
        return best_x, best_objective

    def _surrogate(self, x):
        if self._cfg.smoothing <= 0:
            return gram_penalty(FrameMatrix(x, check=False))

        temperature = self._cfg.smoothing
        z = _shifted_gram(x)
        np.fill_diagonal(z, -np.inf)
        row_max = np.max(z, axis=1, keepdims=True)
        lse = row_max[:, 0] + temperature * np.log(
            np.sum(np.exp((z - row_max) / temperature), axis=1)
        )
        return float(np.mean(lse))


def optimize_frame(k, h, cfg, logger=None):
    logger = logger or clients.logging.get_logger()
    return FrameOptimizer(logger, cfg).optimize(k, h)


def write_frame_csv(frame, path):
    try:
        with open(path, 'w', newline='') as fh:
            writer = csv.writer(fh)
            for row in frame.x:
                writer.writerow(['{0:.17g}'.format(value) for value in row])
    except OSError as exc:
        raise errors.StorageError('Failed to write frame {0}: {1}'.format(path, exc))


def read_frame_csv(path):
    try:
        with open(path, 'r', newline='') as fh:
            rows = [[float(value) for value in row] for row in csv.reader(fh) if row]
    except OSError as exc:
        raise errors.StorageError('Failed to read frame {0}: {1}'.format(path, exc))
    except ValueError as exc:
        raise errors.DataError('Frame {0} is not numeric: {1}'.format(path, exc))

    if not rows or len({len(row) for row in rows}) != 1:
        raise errors.DataError('Frame {0} must be a non-empty rectangular csv'.format(path))
    return FrameMatrix(np.array(rows))
