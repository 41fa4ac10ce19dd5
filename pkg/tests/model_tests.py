import math
import os
import tempfile
import unittest

import numpy as np
import scipy.sparse

import core.errors
import core.losses as losses
import core.model as model
import core.numerics as numerics
import core.sphere as sphere

SMALL_FEATURIZER = model.Featurizer(ngram_min=1, ngram_max=3, num_buckets=256)


def _sparse_features(seed, n, num_buckets):
    rng = numerics.make_rng(seed)
    dense = np.zeros((n, num_buckets))
    for row in range(n):
        dense[row, rng.choice(num_buckets, size=5, replace=False)] = rng.integers(1, 4, size=5)
    return scipy.sparse.csr_matrix(dense)


def _as_grid(array):
    return array.reshape(1, -1) if array.ndim == 1 else array


def _planar_simplex():
    radians = np.radians([0.0, 120.0, 240.0])
    return sphere.FrameMatrix(np.stack([np.cos(radians), np.sin(radians)], axis=1))


class TestHashing(unittest.TestCase):
    def testFnvGoldenValues(self):
        self.assertEqual(model.fnv1a_64(b''), 0xCBF29CE484222325)
        self.assertEqual(model.fnv1a_64(b'a'), 0xAF63DC4C8601EC8C)
        self.assertEqual(model.fnv1a_64(b'foobar'), 0x85944171F73967E8)


class TestFeaturize(unittest.TestCase):
    def testEmptyText(self):
        self.assertEqual(sum(model.featurize('', model.Featurizer()).values()), 0)

    def testRepeatedCharacter(self):
        featurizer = model.Featurizer(ngram_min=1, ngram_max=1, num_buckets=256)
        counts = model.featurize('aa', featurizer)
        bucket = model.fnv1a_64(b'a') & 255
        self.assertEqual(dict(counts), {bucket: 2})

    def testNgramRangeCounts(self):
        featurizer = model.Featurizer(ngram_min=1, ngram_max=2, num_buckets=256)
        self.assertEqual(sum(model.featurize('ab', featurizer).values()), 3)

    def testLowercases(self):
        featurizer = model.Featurizer()
        self.assertEqual(model.featurize('HeLLo', featurizer), model.featurize('hello', featurizer))

    def testUnpairedSurrogate(self):
        with self.assertRaises(core.errors.DataError):
            model.featurize('ab\ud800c', model.Featurizer())

    def testInvalidFeaturizer(self):
        with self.assertRaises(core.errors.ConfigError):
            model.Featurizer(num_buckets=100)
        with self.assertRaises(core.errors.ConfigError):
            model.Featurizer(ngram_min=3, ngram_max=2)

    def testBatchMatchesSingleTextsAndThreads(self):
        texts = ['alpha beta', 'gamma', '', 'delta epsilon zeta']
        serial = model.featurize_batch(texts, SMALL_FEATURIZER)
        threaded = model.featurize_batch(texts, SMALL_FEATURIZER, parallel=3)

        self.assertEqual(serial.shape, (4, 256))
        np.testing.assert_array_equal(serial.toarray(), threaded.toarray())
        for row, text in enumerate(texts):
            for bucket, count in model.featurize(text, SMALL_FEATURIZER).items():
                self.assertEqual(serial[row, bucket], count)


class TestEncoder(unittest.TestCase):
    def testZeroFeaturesWithZeroBiases(self):
        encoder = model.init_encoder(numerics.make_rng(0), 256, d_embed=4, hidden=(5,), h=3)
        for layer in encoder.layers:
            layer.bias[:] = 0.0

        encoded = model.encode(scipy.sparse.csr_matrix((2, 256)), encoder)
        np.testing.assert_array_equal(encoded, np.zeros((2, 3)))

    def testIdentityLayer(self):
        rng = numerics.make_rng(1)
        embed = rng.standard_normal((256, 3))
        encoder = model.EncoderParams(
            embed=embed,
            layers=[model.Layer(np.eye(3), np.zeros(3), activation='linear')],
        )
        features = _sparse_features(2, 4, 256)
        np.testing.assert_allclose(model.encode(features, encoder), features @ embed, atol=1e-12)

    def testLayersMustChain(self):
        with self.assertRaises(core.errors.ShapeError):
            model.EncoderParams(
                embed=np.zeros((256, 3)), layers=[model.Layer(np.zeros((4, 2)), np.zeros(2))]
            )

    def testBackwardMatchesFiniteDifferences(self):
        for seed in range(20):
            self._checkEncoderBackward(seed)

    def _checkEncoderBackward(self, seed):
        rng = numerics.make_rng(seed + 300)
        encoder = model.init_encoder(rng, 256, d_embed=3, hidden=(4,), h=2)
        features = _sparse_features(seed + 400, 5, 256)
        upstream = rng.standard_normal((5, 2))

        _, cache = model.encode_with_cache(features, encoder)
        grads = model.encode_backward(upstream, cache, encoder)

        targets = {'embed': encoder.embed}
        for index, layer in enumerate(encoder.layers):
            targets['layer{0}.weight'.format(index)] = layer.weight
            targets['layer{0}.bias'.format(index)] = layer.bias

        for name, param in targets.items():
            original = param.copy()

            def objective(point):
                param[...] = point.reshape(param.shape)
                value = np.sum(model.encode(features, encoder) * upstream)
                param[...] = original
                return value

            result = numerics.finite_diff_check(
                objective, _as_grid(grads[name]), _as_grid(original)
            )
            self.assertLess(result.max_relative_error, 1e-4, (seed, name))


class TestHeads(unittest.TestCase):
    def testIdentityFrame(self):
        head = model.HypersphericalHead(sphere.FrameMatrix(np.eye(2)))
        np.testing.assert_allclose(
            model.decode_hyperspherical([[1.0, 0.0]], head), [[math.sqrt(2.0), 0.0]]
        )

    def testSelfAlignment(self):
        frame = _planar_simplex()
        head = model.HypersphericalHead(frame)
        for label in range(3):
            logits = model.decode_hyperspherical(frame.x[label : label + 1], head)
            self.assertEqual(int(np.argmax(logits)), label)

    def testFixedScaleMatchesLoops(self):
        frame = _planar_simplex()
        head = model.HypersphericalHead(frame, scale_mode=1.0)
        e = numerics.make_rng(5).standard_normal((4, 2))

        logits = model.decode_hyperspherical(e, head)
        for i in range(4):
            for j in range(3):
                expected = sum(e[i, d] * frame.x[j, d] for d in range(2))
                self.assertAlmostEqual(logits[i, j], expected, delta=1e-12)

    def testLogitsBoundedByScaleAndNorm(self):
        for seed in range(20):
            rng = numerics.make_rng(seed + 500)
            rows = rng.standard_normal((5, 4))
            frame = sphere.FrameMatrix(rows / np.linalg.norm(rows, axis=1, keepdims=True))
            head = model.HypersphericalHead(frame)
            e = rng.uniform(0.1, 10.0) * rng.standard_normal((6, 4))

            bound = head.scale * np.linalg.norm(e, axis=1, keepdims=True)
            logits = model.decode_hyperspherical(e, head)
            self.assertTrue(np.all(np.abs(logits) <= bound * (1.0 + 1e-12)), seed)

    def testHypersphericalBackward(self):
        head = model.HypersphericalHead(_planar_simplex())
        for seed in range(20):
            rng = numerics.make_rng(seed + 600)
            e = rng.standard_normal((4, 2))
            upstream = rng.standard_normal((4, 3))

            grad_e, grads = model.decode_hyperspherical_backward(upstream, head)
            self.assertEqual(grads, {})
            result = numerics.finite_diff_check(
                lambda point: np.sum(model.decode_hyperspherical(point, head) * upstream),
                grad_e,
                e,
            )
            self.assertLess(result.max_relative_error, 1e-4, seed)

    def testScaleMode(self):
        with self.assertRaises(core.errors.ConfigError):
            model.HypersphericalHead(_planar_simplex(), scale_mode='huge')
        self.assertAlmostEqual(model.HypersphericalHead(_planar_simplex()).scale, math.sqrt(3.0))

    def testLinearZeroAndIdentity(self):
        e = numerics.make_rng(7).standard_normal((3, 2))
        zero = model.LinearHead(np.zeros((2, 2)), np.zeros(2))
        identity = model.LinearHead(np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(model.decode_linear(e, zero), np.zeros((3, 2)))
        np.testing.assert_allclose(model.decode_linear(e, identity), e, atol=1e-15)

    def testLinearMatchesLoops(self):
        rng = numerics.make_rng(8)
        head = model.LinearHead.initialize(rng, 3, 4)
        e = rng.standard_normal((2, 3))

        logits = model.decode_linear(e, head)
        for i in range(2):
            for j in range(4):
                expected = head.bias[j] + sum(e[i, d] * head.weight[d, j] for d in range(3))
                self.assertAlmostEqual(logits[i, j], expected, delta=1e-12)

    def testLinearBackward(self):
        for seed in range(20):
            self._checkLinearBackward(seed)

    def _checkLinearBackward(self, seed):
        rng = numerics.make_rng(seed + 900)
        head = model.LinearHead.initialize(rng, 3, 4)
        e = rng.standard_normal((5, 3))
        upstream = rng.standard_normal((5, 4))

        grad_e, grads = model.decode_linear_backward(upstream, e, head)
        result = numerics.finite_diff_check(
            lambda point: np.sum(model.decode_linear(point, head) * upstream), grad_e, e
        )
        self.assertLess(result.max_relative_error, 1e-4, seed)

        original = head.weight.copy()

        def weight_objective(point):
            head.weight = point
            value = np.sum(model.decode_linear(e, head) * upstream)
            head.weight = original
            return value

        result = numerics.finite_diff_check(weight_objective, grads['head.weight'], original)
        self.assertLess(result.max_relative_error, 1e-4, seed)


class TestModel(unittest.TestCase):
    def _model(self, head_type, seed=0):
        frame = _planar_simplex() if head_type == 'hyperspherical' else None
        return model.build_model(
            numerics.make_rng(seed),
            SMALL_FEATURIZER,
            ['a', 'b', 'c'],
            head_type=head_type,
            frame=frame,
            d_embed=4,
            hidden=(5,),
            h=2,
        )

    def testFrameIsNotTrainable(self):
        hyperspherical = self._model('hyperspherical')
        self.assertNotIn('head.weight', hyperspherical.parameters())
        self.assertIn('head.weight', self._model('linear').parameters())

    def testBackwardKeysMatchParameters(self):
        for head_type in ('hyperspherical', 'linear'):
            trained = self._model(head_type)
            logits, cache = trained.forward(trained.features(['abc', 'bcd']))
            grads = trained.backward(np.ones_like(logits), cache)
            self.assertEqual(set(grads), set(trained.parameters()))
            for name, param in trained.parameters().items():
                self.assertEqual(grads[name].shape, param.shape)

    def testCrossEntropyGradientThroughModel(self):
        trained = self._model('hyperspherical', seed=2)
        features = trained.features(['abc', 'cab', 'bca bca'])
        gold = np.array([0, 1, 2])

        logits, cache = trained.forward(features)
        grads = trained.backward(losses.cross_entropy(logits, gold).grad_logits, cache)

        weight = trained.encoder.layers[0].weight
        original = weight.copy()

        def objective(point):
            weight[...] = point
            value = losses.cross_entropy(trained.logits(features), gold).value
            weight[...] = original
            return value

        result = numerics.finite_diff_check(objective, grads['layer0.weight'], original)
        self.assertLess(result.max_relative_error, 1e-4)

    def testVocabularyMustMatchHead(self):
        with self.assertRaises(core.errors.ConfigError):
            model.build_model(
                numerics.make_rng(0),
                SMALL_FEATURIZER,
                ['a', 'b'],
                frame=_planar_simplex(),
                d_embed=4,
                hidden=(),
                h=2,
            )

    def testFrameDimensionMustMatchEncoder(self):
        with self.assertRaises(core.errors.ConfigError):
            model.build_model(
                numerics.make_rng(0),
                SMALL_FEATURIZER,
                ['a', 'b', 'c'],
                frame=_planar_simplex(),
                d_embed=4,
                hidden=(),
                h=3,
            )

    def testCheckpointRoundTrip(self):
        for head_type in ('hyperspherical', 'linear'):
            trained = self._model(head_type, seed=4)
            texts = ['hello world', 'abc']
            with tempfile.TemporaryDirectory() as tmp_dir:
                path = os.path.join(tmp_dir, 'model.json')
                model.save_checkpoint(trained, path, temperature={'t': 1.5})
                restored, temperature = model.load_checkpoint(path)

            self.assertEqual(temperature, {'t': 1.5})
            self.assertEqual(restored.vocab, trained.vocab)
            self.assertEqual(restored.head_type, head_type)
            np.testing.assert_array_equal(
                restored.predict_logits(texts), trained.predict_logits(texts)
            )

    def testCheckpointFormatTag(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = os.path.join(tmp_dir, 'model.json')
            with open(path, 'w') as fh:
                fh.write('{"format": "something-else"}')
            with self.assertRaises(core.errors.DataError):
                model.load_checkpoint(path)
