import collections
import dataclasses
import math
import string
import typing

import numpy as np
import simplejson

from . import errors
from . import numerics

FRACTION_TOLERANCE = 1e-9

SYNTH_MEAN_LENGTH = 8
SYNTH_LENGTH_SD = 2.0
SYNTH_MIN_LENGTH = 3
LONG_TAIL_DECAY = 0.7


@dataclasses.dataclass(frozen=True)
class Dataset:
    """
    Labelled texts. samples holds (text, label_id) pairs indexing into vocab.
    """

    samples: typing.Tuple[typing.Tuple[str, int], ...] = ()
    vocab: typing.Tuple[str, ...] = ()

    def __post_init__(self):
        samples = tuple((str(text), int(label)) for text, label in self.samples)
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'vocab', tuple(self.vocab))

        if len(set(self.vocab)) != len(self.vocab):
            raise errors.DataError('Label vocabulary has duplicate names')
        for index, (_, label) in enumerate(self.samples):
            if not 0 <= label < len(self.vocab):
                raise errors.DataError(
                    'Sample {0} has label id {1} outside vocabulary of {2}'.format(
                        index, label, len(self.vocab)
                    )
                )

    def __len__(self):
        return len(self.samples)

    @property
    def n(self):
        return len(self.samples)

    @property
    def k(self):
        return len(self.vocab)

    @property
    def texts(self):
        return [text for text, _ in self.samples]

    @property
    def labels(self):
        return np.array([label for _, label in self.samples], dtype=np.int64)

    def label_counts(self):
        counts = np.zeros(self.k, dtype=np.int64)
        for _, label in self.samples:
            counts[label] += 1
        return counts

    def subset(self, indices):
        return Dataset(tuple(self.samples[int(i)] for i in indices), self.vocab)

    def with_labels(self, labels):
        if len(labels) != self.n:
            raise errors.ShapeError(
                '{0} labels for {1} samples'.format(len(labels), self.n)
            )
        return Dataset(
            tuple((text, int(label)) for (text, _), label in zip(self.samples, labels)),
            self.vocab,
        )

    def remap(self, vocab):
        """
        Re-indexes the labels into another vocabulary, by label name
        """
        vocab = tuple(vocab)
        if vocab == self.vocab:
            return self

        positions = {name: index for index, name in enumerate(vocab)}
        missing = sorted({self.vocab[label] for _, label in self.samples} - set(positions))
        if missing:
            raise errors.DataError(
                'Labels {0} are not in the target vocabulary'.format(missing)
            )
        return Dataset(
            tuple((text, positions[self.vocab[label]]) for text, label in self.samples),
            vocab,
        )


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    dev: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fractions = (self.train, self.dev, self.test)
        if any(fraction < 0 for fraction in fractions):
            raise errors.ConfigError('Split fractions must be >= 0, got {0}'.format(fractions))
        if abs(sum(fractions) - 1.0) > FRACTION_TOLERANCE:
            raise errors.ConfigError('Split fractions must sum to 1, got {0}'.format(fractions))


def _decode_line(raw, line_number):
    try:
        return raw.decode('utf-8')
    except UnicodeDecodeError as exc:
        raise errors.ParseError('invalid utf-8: {0}'.format(exc), line_number)


def _check_encodable(value, field, line_number):
    # json escapes can smuggle in lone surrogates that no utf-8 encoder accepts
    try:
        value.encode('utf-8')
    except UnicodeEncodeError:
        raise errors.ParseError(
            'field "{0}" contains an unpaired surrogate'.format(field), line_number
        )


def load_jsonl(path):
    """
    Reads {"text": ..., "label": ...} lines. Label ids follow first occurrence.
    Blank lines are skipped; line numbers in errors are 1-based.
    """
    vocab = collections.OrderedDict()
    samples = []
    try:
        with open(path, 'rb') as fh:
            for line_number, raw in enumerate(fh, start=1):
                line = _decode_line(raw, line_number)
                if not line.strip():
                    continue
                try:
                    document = simplejson.loads(line)
                except simplejson.JSONDecodeError as exc:
                    raise errors.ParseError('invalid json: {0}'.format(exc), line_number)

                if not isinstance(document, dict):
                    raise errors.ParseError('expected a json object', line_number)
                for field in ('text', 'label'):
                    if not isinstance(document.get(field), str):
                        raise errors.ParseError(
                            'missing string field "{0}"'.format(field), line_number
                        )
                    _check_encodable(document[field], field, line_number)

                label = vocab.setdefault(document['label'], len(vocab))
                samples.append((document['text'], label))
    except OSError as exc:
        raise errors.StorageError('Failed to read dataset {0}: {1}'.format(path, exc))

    return Dataset(tuple(samples), tuple(vocab))


def write_jsonl(ds, path):
    try:
        with open(path, 'w', encoding='utf-8') as fh:
            for text, label in ds.samples:
                fh.write(
                    simplejson.dumps({'text': text, 'label': ds.vocab[label]}, ensure_ascii=False)
                )
                fh.write('\n')
    except OSError as exc:
        raise errors.StorageError('Failed to write dataset {0}: {1}'.format(path, exc))


def round_half_up(value):
    return int(math.floor(value + 0.5))


def split(ds, spec):
    """
    Shuffles sample membership by seed and cuts it into train/dev/test. dev and test
    get floor(fraction * N) samples, train keeps the remainder. Each part keeps the
    original sample order.
    """
    n = ds.n
    n_dev = int(math.floor(spec.dev * n + FRACTION_TOLERANCE))
    n_test = int(math.floor(spec.test * n + FRACTION_TOLERANCE))
    n_train = n - n_dev - n_test

    if n >= 3:
        for name, fraction, size in (
            ('train', spec.train, n_train),
            ('dev', spec.dev, n_dev),
            ('test', spec.test, n_test),
        ):
            if fraction > 0 and size == 0:
                raise errors.ConfigError(
                    'Split {0} is empty for {1} samples at fraction {2}'.format(name, n, fraction)
                )

    order = numerics.make_rng(spec.seed).permutation(n)
    parts = (
        order[:n_train],
        order[n_train : n_train + n_dev],
        order[n_train + n_dev :],
    )
    return tuple(ds.subset(np.sort(part)) for part in parts)


def noise_count(fraction, n):
    return round_half_up(fraction * n)


def inject_noise(ds, fraction, seed):
    """
    Relabels round(fraction * N) samples chosen without replacement, each to a label
    drawn uniformly from the other K - 1
    """
    if not 0.0 <= fraction <= 1.0:
        raise errors.ConfigError('Noise fraction must be in [0, 1], got {0}'.format(fraction))
    if fraction == 0 or ds.n == 0:
        return ds
    if ds.k < 2:
        raise errors.ConfigError('Label noise needs at least 2 labels, got {0}'.format(ds.k))

    rng = numerics.make_rng(seed)
    count = noise_count(fraction, ds.n)
    chosen = rng.choice(ds.n, size=count, replace=False)

    labels = ds.labels
    labels[chosen] = (labels[chosen] + rng.integers(1, ds.k, size=count)) % ds.k
    return ds.with_labels(labels)


def class_priors(k, decay=None):
    if decay is None:
        return np.full(k, 1.0 / k)
    if not 0.0 < decay <= 1.0:
        raise errors.ConfigError('decay must be in (0, 1], got {0}'.format(decay))
    weights = decay ** np.arange(k, dtype=np.float64)
    return weights / weights.sum()


def _keyword_pools(rng, k, pool_size):
    letters = np.array(list(string.ascii_lowercase))
    seen = set()
    pools = []
    for _ in range(k):
        pool = []
        while len(pool) < pool_size:
            word = ''.join(rng.choice(letters, size=int(rng.integers(5, 8))))
            if word not in seen:
                seen.add(word)
                pool.append(word)
        pools.append(pool)
    return pools


def synth_gaussian_text(k, n, noise, seed, decay=None, pool_size=20):
    """
    Synthetic keyword corpus. Each class owns a pool of random words; a sample draws
    a normally distributed number of words from its class pool, except that each word
    comes from the union of all pools with probability noise. decay sets geometric
    class priors for a long-tail label distribution. Every class gets at least one sample.
    """
    if k < 2:
        raise errors.ConfigError('Synthetic data needs k >= 2, got {0}'.format(k))
    if n < k:
        raise errors.ConfigError('Synthetic data needs n >= k, got n={0}, k={1}'.format(n, k))
    if not 0.0 <= noise <= 1.0:
        raise errors.ConfigError('noise must be in [0, 1], got {0}'.format(noise))
    if pool_size < 1:
        raise errors.ConfigError('pool_size must be >= 1, got {0}'.format(pool_size))

    rng = numerics.make_rng(seed)
    pools = _keyword_pools(rng, k, pool_size)
    all_words = [word for pool in pools for word in pool]

    labels = np.concatenate(
        [np.arange(k), rng.choice(k, size=n - k, p=class_priors(k, decay))]
    )
    labels = labels[rng.permutation(n)]

    samples = []
    for label in labels:
        length = max(
            SYNTH_MIN_LENGTH,
            round_half_up(rng.normal(SYNTH_MEAN_LENGTH, SYNTH_LENGTH_SD)),
        )
        words = []
        for _ in range(length):
            if rng.random() < noise:
                words.append(all_words[int(rng.integers(len(all_words)))])
            else:
                pool = pools[label]
                words.append(pool[int(rng.integers(len(pool)))])
        samples.append((' '.join(words), int(label)))

    vocab = tuple('class_{0:02d}'.format(label) for label in range(k))
    return Dataset(tuple(samples), vocab)
