import csv
import io
import os
import tempfile
import unittest

import mock
import numpy as np
import simplejson

import core.data as data
import hscalibrate

_RUN_CONFIG = {
    'version': 1,
    'seed': 3,
    'data': {'synth': {'k': 3, 'n': 150, 'noise': 0.1, 'pool_size': 8}},
    'model': {'h': 4, 'd_embed': 8, 'hidden': [8], 'num_buckets': 256},
    'frame': {'max_iters': 200, 'restarts': 1},
    'optim': {'epochs': 2, 'batch_size': 16, 'learning_rate': 0.1},
}


class TestCli(unittest.TestCase):
    def setUp(self):
        self._tmp_dir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self._tmp_dir.cleanup()

    def _path(self, name):
        return os.path.join(self._tmp_dir.name, name)

    def _run(self, *argv):
        """
        Runs the command line with --json and returns (exit code, parsed stdout)
        """
        argv = list(argv) + ['--json', '--log-disable-stdout']
        with mock.patch('sys.stdout', new_callable=io.StringIO) as stdout:
            exit_code = hscalibrate.main(argv)

        output = stdout.getvalue()
        return exit_code, simplejson.loads(output) if output else None

    def _write_config(self, **sections):
        document = dict(_RUN_CONFIG, **sections)
        path = self._path('run.json')
        with open(path, 'w') as fh:
            simplejson.dump(document, fh)
        return path

    def testSphereGen(self):
        out_path = self._path('frame.csv')
        exit_code, result = self._run('sphere-gen', '--k', '4', '--h', '3', '--out', out_path)

        self.assertEqual(exit_code, 0)
        self.assertLessEqual(result['gram_penalty'], -1.0 / 3 + 1e-3)

        with open(out_path, newline='') as fh:
            rows = np.array([[float(value) for value in row] for row in csv.reader(fh)])
        self.assertEqual(rows.shape, (4, 3))
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-9)

    def testNoiseChangesExactShare(self):
        in_path, out_path = self._path('in.jsonl'), self._path('out.jsonl')
        self.assertEqual(
            self._run('synth', '--k', '3', '--n', '200', '--out', in_path, '--seed', '1')[0], 0
        )

        exit_code, result = self._run(
            'noise', '--fraction', '0.3', '--seed', '7', in_path, out_path
        )
        self.assertEqual(exit_code, 0)
        self.assertEqual(result['changed'], 60)

        original, noisy = data.load_jsonl(in_path), data.load_jsonl(out_path)
        differing = sum(
            1
            for (_, before), (_, after) in zip(original.samples, noisy.samples)
            if original.vocab[before] != noisy.vocab[after]
        )
        self.assertEqual(differing, 60)

    def testTrainEvaluateCalibrateReport(self):
        checkpoint = self._path('model.json')
        frame_path = self._path('frame.csv')
        dev_path, test_path = self._path('dev.jsonl'), self._path('test.jsonl')
        for path, seed in ((dev_path, 11), (test_path, 12)):
            self._run('synth', '--k', '3', '--n', '40', '--out', path, '--seed', str(seed))

        exit_code, record = self._run(
            'train',
            '--config',
            self._write_config(),
            '--checkpoint',
            checkpoint,
            '--frame-out',
            frame_path,
            '--set',
            'optim.epochs=1',
        )
        self.assertEqual(exit_code, 0)
        self.assertEqual(len(record['epochs']), 1)
        self.assertTrue(os.path.exists(checkpoint))

        exit_code, report = self._run('evaluate', '--checkpoint', checkpoint, '--data', test_path)
        self.assertEqual(exit_code, 0)
        for field in (
            'ece_classwise',
            'ece_standard',
            'accuracy',
            'precision',
            'recall',
            'f1',
            'per_label',
            'avu',
            'temperature',
        ):
            self.assertIn(field, report)

        self.assertEqual(
            self._run('evaluate', '--checkpoint', checkpoint, '--data', test_path)[1], report
        )

        exit_code, fit = self._run('calibrate', '--checkpoint', checkpoint, '--dev', dev_path)
        self.assertEqual(exit_code, 0)
        self.assertLessEqual(fit['dev_nll_after'], fit['dev_nll_before'])
        with open(checkpoint) as fh:
            self.assertEqual(simplejson.load(fh)['head']['frame_path'], frame_path)

        _, calibrated = self._run('evaluate', '--checkpoint', checkpoint, '--data', test_path)
        self.assertEqual(calibrated['temperature']['t'], fit['t'])
        self.assertEqual(calibrated['accuracy'], report['accuracy'])

        csv_path = self._path('reliability.csv')
        exit_code, result = self._run(
            'report', '--checkpoint', checkpoint, '--data', test_path, '--out', csv_path
        )
        self.assertEqual(exit_code, 0)
        self.assertEqual(len(result['histogram']), 10)
        with open(csv_path, newline='') as fh:
            rows = list(csv.DictReader(fh))
        self.assertEqual(sum(int(row['count']) for row in rows), 40)

    def testCompare(self):
        exit_code, result = self._run(
            'compare',
            '--config',
            self._write_config(),
            '--methods',
            'ce',
            'hs-rau',
            '--seeds',
            '2',
            '--worst-n',
            '1',
        )

        self.assertEqual(exit_code, 0)
        self.assertEqual(result['seeds'], [3, 4])
        methods = result['tables'][0]['methods']
        self.assertEqual(sorted(methods), ['ce', 'hs-rau'])
        self.assertEqual(len(methods['ce']['ece_standard']['per_seed']), 2)
        self.assertIn('low_frequency', methods['hs-rau'])

    def testUnknownFlagIsUsageError(self):
        with mock.patch('sys.stderr', new_callable=io.StringIO):
            with self.assertRaises(SystemExit) as context:
                hscalibrate.main(['sphere-gen', '--k', '4', '--h', '3', '--bogus'])
        self.assertEqual(context.exception.code, 1)

    def testMalformedOverrideIsUsageError(self):
        exit_code, _ = self._run('train', '--config', self._write_config(), '--set', 'epochs')
        self.assertEqual(exit_code, 1)

    def testMissingDataIsDataError(self):
        exit_code, result = self._run(
            'noise', '--fraction', '0.1', self._path('absent.jsonl'), self._path('out.jsonl')
        )
        self.assertEqual(exit_code, 2)
        self.assertIsNone(result)

    def testInvalidUtf8IsDataError(self):
        in_path = self._path('latin1.jsonl')
        with open(in_path, 'wb') as fh:
            fh.write(b'{"text": "\xff\xfe", "label": "a"}\n')

        exit_code, result = self._run(
            'noise', '--fraction', '0.5', '--seed', '1', in_path, self._path('out.jsonl')
        )
        self.assertEqual(exit_code, 2)
        self.assertIsNone(result)

    def testInvalidConfigIsConfigError(self):
        exit_code, _ = self._run('train', '--config', self._write_config(optim={'epochs': 0}))
        self.assertEqual(exit_code, 2)
