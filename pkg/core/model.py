import collections
import dataclasses
import multiprocessing.pool
import typing

import numpy as np
import scipy.sparse
import simplejson

from . import errors
from . import numerics
from . import sphere

CHECKPOINT_FORMAT = 'hscalibrate-checkpoint/1'

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK_64 = 0xFFFFFFFFFFFFFFFF

ACTIVATIONS = ('tanh', 'linear')


def fnv1a_64(data):
    value = FNV_OFFSET_BASIS
    for byte in data:
        value ^= byte
        value = (value * FNV_PRIME) & MASK_64
    return value


@dataclasses.dataclass(frozen=True)
class Featurizer:
    ngram_min: int = 2
    ngram_max: int = 4
    num_buckets: int = 4096
    lowercase: bool = True

    def __post_init__(self):
        if not 1 <= self.ngram_min <= self.ngram_max <= 5:
            raise errors.ConfigError(
                'n-gram range must satisfy 1 <= min <= max <= 5, got {0}..{1}'.format(
                    self.ngram_min, self.ngram_max
                )
            )
        if self.num_buckets < 256 or self.num_buckets & (self.num_buckets - 1):
            raise errors.ConfigError(
                'num_buckets must be a power of two >= 256, got {0}'.format(
                    self.num_buckets
                )
            )

    def featurize(self, text):
        """
        Character n-gram counts keyed by bucket index
        """
        if self.lowercase:
            text = text.lower()

        mask = self.num_buckets - 1
        counts = collections.Counter()
        for n in range(self.ngram_min, self.ngram_max + 1):
            for start in range(len(text) - n + 1):
                gram = text[start : start + n]
                try:
                    encoded = gram.encode('utf-8')
                except UnicodeEncodeError:
                    raise errors.DataError('Text contains an unpaired surrogate')
                counts[fnv1a_64(encoded) & mask] += 1
        return counts


def featurize(text, f):
    return f.featurize(text)


def featurize_batch(texts, featurizer, parallel=1):
    """
    Builds an N x num_buckets sparse count matrix, row order following texts
    """
    if parallel > 1:
        with multiprocessing.pool.ThreadPool(processes=parallel) as pool:
            rows = pool.map(featurizer.featurize, texts)
    else:
        rows = [featurizer.featurize(text) for text in texts]

    return counts_to_csr(rows, featurizer.num_buckets)


def counts_to_csr(rows, num_buckets):
    indptr = [0]
    indices = []
    data = []
    for counts in rows:
        for bucket in sorted(counts):
            indices.append(bucket)
            data.append(float(counts[bucket]))
        indptr.append(len(indices))

    return scipy.sparse.csr_matrix(
        (np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64), indptr),
        shape=(len(rows), num_buckets),
    )


@dataclasses.dataclass(eq=False)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = 'tanh'


@dataclasses.dataclass(eq=False)
class EncoderParams:
    embed: np.ndarray
    layers: typing.List[Layer]

    def __post_init__(self):
        width = self.embed.shape[1]
        for index, layer in enumerate(self.layers):
            if layer.weight.shape[0] != width or layer.bias.shape != (
                layer.weight.shape[1],
            ):
                raise errors.ShapeError(
                    'Layer {0} does not chain: input width {1}, weight {2}, bias {3}'.format(
                        index, width, layer.weight.shape, layer.bias.shape
                    )
                )
            if layer.activation not in ACTIVATIONS:
                raise errors.ConfigError(
                    'Unknown activation {0}'.format(layer.activation)
                )
            width = layer.weight.shape[1]

    @property
    def output_dim(self):
        if self.layers:
            return self.layers[-1].weight.shape[1]
        return self.embed.shape[1]


def _uniform(rng, fan_in, shape):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_encoder(rng, num_buckets, d_embed=64, hidden=(128,), h=32, final_activation='tanh'):
    # an embedding row is read as one d_embed-wide vector, so its fan-in is d_embed
    embed = _uniform(rng, d_embed, (num_buckets, d_embed))

    layers = []
    widths = [d_embed] + list(hidden) + [h]
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        is_final = index == len(widths) - 2
        layers.append(
            Layer(
                weight=_uniform(rng, fan_in, (fan_in, fan_out)),
                bias=_uniform(rng, fan_in, (fan_out,)),
                activation=final_activation if is_final else 'tanh',
            )
        )
    return EncoderParams(embed=embed, layers=layers)


def _as_feature_matrix(batch, num_buckets):
    if scipy.sparse.issparse(batch):
        matrix = batch.tocsr()
    elif isinstance(batch, np.ndarray):
        matrix = scipy.sparse.csr_matrix(numerics.as_matrix(batch, 'features'))
    else:
        matrix = counts_to_csr(list(batch), num_buckets)

    if matrix.shape[1] != num_buckets:
        raise errors.ShapeError(
            'Features have {0} buckets, encoder expects {1}'.format(
                matrix.shape[1], num_buckets
            )
        )
    return matrix


def encode_with_cache(batch, p):
    features = _as_feature_matrix(batch, p.embed.shape[0])
    activation = np.asarray(features @ p.embed)

    outputs = [activation]
    for layer in p.layers:
        activation = activation @ layer.weight + layer.bias
        if layer.activation == 'tanh':
            activation = np.tanh(activation)
        outputs.append(activation)

    return activation, (features, outputs)


def encode(batch, p):
    encoded, _ = encode_with_cache(batch, p)
    return encoded


def encode_backward(grad_e, cache, p):
    """
    Gradients of the encoder parameters given dLoss/dE, keyed like Model.parameters()
    """
    features, outputs = cache
    grads = {}

    grad = grad_e
    for index in reversed(range(len(p.layers))):
        layer = p.layers[index]
        if layer.activation == 'tanh':
            grad = grad * (1.0 - outputs[index + 1] ** 2)
        grads['layer{0}.weight'.format(index)] = outputs[index].T @ grad
        grads['layer{0}.bias'.format(index)] = grad.sum(axis=0)
        grad = grad @ layer.weight.T

    grads['embed'] = np.asarray(features.T @ grad)
    return grads


class HypersphericalHead(object):
    """
    Logits are the dot products of E with the frozen frame rows, times a global scale
    (the Frobenius norm of the frame by default, sqrt(K) for unit rows)
    """

    def __init__(self, frame, scale_mode='frobenius'):
        if scale_mode != 'frobenius':
            try:
                scale_mode = float(scale_mode)
            except (TypeError, ValueError):
                raise errors.ConfigError(
                    'scale_mode must be "frobenius" or a number, got {0!r}'.format(
                        scale_mode
                    )
                )
        self.frame = frame
        self.scale_mode = scale_mode

    @property
    def k(self):
        return self.frame.k

    @property
    def scale(self):
        if self.scale_mode == 'frobenius':
            return float(np.linalg.norm(self.frame.x))
        return self.scale_mode


class LinearHead(object):
    def __init__(self, weight, bias):
        weight = numerics.as_matrix(weight, 'head weight')
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (weight.shape[1],):
            raise errors.ShapeError(
                'Bias shape {0} does not match weight {1}'.format(bias.shape, weight.shape)
            )
        self.weight = weight
        self.bias = bias

    @property
    def k(self):
        return self.weight.shape[1]

    @classmethod
    def initialize(cls, rng, h, k):
        return cls(_uniform(rng, h, (h, k)), _uniform(rng, h, (k,)))


def decode_hyperspherical(e, head):
    e = numerics.as_matrix(e, 'encoded batch')
    if e.shape[1] != head.frame.h:
        raise errors.ShapeError(
            'Encoded width {0} does not match frame dimension {1}'.format(
                e.shape[1], head.frame.h
            )
        )
    cali_d = e @ head.frame.x.T
    return head.scale * cali_d


def decode_hyperspherical_backward(grad_logits, head):
    # the frame is frozen, only E receives a gradient
    return head.scale * (grad_logits @ head.frame.x), {}


def decode_linear(e, head):
    e = numerics.as_matrix(e, 'encoded batch')
    if e.shape[1] != head.weight.shape[0]:
        raise errors.ShapeError(
            'Encoded width {0} does not match head input {1}'.format(
                e.shape[1], head.weight.shape[0]
            )
        )
    return e @ head.weight + head.bias


def decode_linear_backward(grad_logits, e, head):
    grads = {
        'head.weight': e.T @ grad_logits,
        'head.bias': grad_logits.sum(axis=0),
    }
    return grad_logits @ head.weight.T, grads


class Model(object):
    def __init__(self, featurizer, encoder, head, vocab):
        if encoder.embed.shape[0] != featurizer.num_buckets:
            raise errors.ConfigError(
                'Embedding has {0} rows, featurizer produces {1} buckets'.format(
                    encoder.embed.shape[0], featurizer.num_buckets
                )
            )
        head_input = (
            head.frame.h
            if isinstance(head, HypersphericalHead)
            else head.weight.shape[0]
        )
        if head_input != encoder.output_dim:
            raise errors.ConfigError(
                'Head expects dimension {0}, encoder produces {1}'.format(
                    head_input, encoder.output_dim
                )
            )
        if head.k != len(vocab):
            raise errors.ConfigError(
                'Head has {0} labels, vocabulary has {1}'.format(head.k, len(vocab))
            )

        self.featurizer = featurizer
        self.encoder = encoder
        self.head = head
        self.vocab = list(vocab)

    @property
    def k(self):
        return self.head.k

    @property
    def head_type(self):
        return 'hyperspherical' if isinstance(self.head, HypersphericalHead) else 'linear'

    def features(self, texts, parallel=1):
        return featurize_batch(texts, self.featurizer, parallel=parallel)

    def forward(self, features):
        e, encoder_cache = encode_with_cache(features, self.encoder)
        if isinstance(self.head, HypersphericalHead):
            logits = decode_hyperspherical(e, self.head)
        else:
            logits = decode_linear(e, self.head)
        return logits, (e, encoder_cache)

    def backward(self, grad_logits, cache):
        e, encoder_cache = cache
        if isinstance(self.head, HypersphericalHead):
            grad_e, grads = decode_hyperspherical_backward(grad_logits, self.head)
        else:
            grad_e, grads = decode_linear_backward(grad_logits, e, self.head)

        grads.update(encode_backward(grad_e, encoder_cache, self.encoder))
        return grads

    def logits(self, features):
        logits, _ = self.forward(features)
        return logits

    def predict_logits(self, texts, parallel=1):
        return self.logits(self.features(texts, parallel=parallel))

    def parameters(self):
        """
        Trainable arrays by name. The arrays are live, updating them in place updates
        the model. The hyperspherical frame is not among them.
        """
        params = {'embed': self.encoder.embed}
        for index, layer in enumerate(self.encoder.layers):
            params['layer{0}.weight'.format(index)] = layer.weight
            params['layer{0}.bias'.format(index)] = layer.bias
        if isinstance(self.head, LinearHead):
            params['head.weight'] = self.head.weight
            params['head.bias'] = self.head.bias
        return params


def build_model(rng, featurizer, vocab, head_type='hyperspherical', frame=None,
                scale_mode='frobenius', d_embed=64, hidden=(128,), h=32,
                final_activation='tanh'):
    encoder = init_encoder(
        rng,
        featurizer.num_buckets,
        d_embed=d_embed,
        hidden=hidden,
        h=h,
        final_activation=final_activation,
    )
    if head_type == 'hyperspherical':
        if frame is None:
            raise errors.ConfigError('A hyperspherical head needs a frame')
        head = HypersphericalHead(frame, scale_mode=scale_mode)
    elif head_type == 'linear':
        head = LinearHead.initialize(rng, h, len(vocab))
    else:
        raise errors.ConfigError('Unknown head type {0}'.format(head_type))
    return Model(featurizer, encoder, head, vocab)


def checkpoint_document(model, temperature=None, frame_path=None):
    if isinstance(model.head, HypersphericalHead):
        head = {
            'type': 'hyperspherical',
            'scale_mode': model.head.scale_mode,
            'frame': model.head.frame.x.tolist(),
            'frame_path': frame_path,
        }
    else:
        head = {
            'type': 'linear',
            'weight': model.head.weight.tolist(),
            'bias': model.head.bias.tolist(),
        }

    return {
        'format': CHECKPOINT_FORMAT,
        'vocab': model.vocab,
        'featurizer': dataclasses.asdict(model.featurizer),
        'encoder': {
            'embed': model.encoder.embed.tolist(),
            'layers': [
                {
                    'weight': layer.weight.tolist(),
                    'bias': layer.bias.tolist(),
                    'activation': layer.activation,
                }
                for layer in model.encoder.layers
            ],
        },
        'head': head,
        'temperature': temperature,
    }


def save_checkpoint(model, path, temperature=None, frame_path=None):
    document = checkpoint_document(model, temperature=temperature, frame_path=frame_path)
    try:
        with open(path, 'w') as fh:
            simplejson.dump(document, fh)
    except OSError as exc:
        raise errors.StorageError('Failed to write checkpoint {0}: {1}'.format(path, exc))


def model_from_document(document):
    if document.get('format') != CHECKPOINT_FORMAT:
        raise errors.DataError(
            'Unsupported checkpoint format {0!r}'.format(document.get('format'))
        )

    try:
        encoder = EncoderParams(
            embed=np.array(document['encoder']['embed'], dtype=np.float64),
            layers=[
                Layer(
                    weight=np.array(layer['weight'], dtype=np.float64),
                    bias=np.array(layer['bias'], dtype=np.float64),
                    activation=layer['activation'],
                )
                for layer in document['encoder']['layers']
            ],
        )
        head_document = document['head']
        if head_document['type'] == 'hyperspherical':
            head = HypersphericalHead(
                sphere.FrameMatrix(np.array(head_document['frame'])),
                scale_mode=head_document['scale_mode'],
            )
        else:
            head = LinearHead(head_document['weight'], head_document['bias'])
        return Model(Featurizer(**document['featurizer']), encoder, head, document['vocab'])
    except (KeyError, TypeError) as exc:
        raise errors.DataError('Malformed checkpoint: {0}'.format(exc))


def read_checkpoint_document(path):
    try:
        with open(path, 'r') as fh:
            return simplejson.load(fh)
    except OSError as exc:
        raise errors.StorageError('Failed to read checkpoint {0}: {1}'.format(path, exc))
    except simplejson.JSONDecodeError as exc:
        raise errors.DataError('Checkpoint {0} is not json: {1}'.format(path, exc))


def load_checkpoint(path):
    """
    Returns (model, temperature document or None)
    """
    document = read_checkpoint_document(path)
    return model_from_document(document), document.get('temperature')
