import io
import os
import tempfile
import unittest

import numpy as np
import simplejson

import clients.logging
import core.errors


class TestLogging(unittest.TestCase):
    def setUp(self):
        self._stream = io.StringIO()
        self._logger = clients.logging.Client(
            'hscalibrate.logging-tests',
            initial_severity='debug',
            output_stream=self._stream,
            log_colors='off',
        ).logger
        self._logger.clear_first_error()

    def testVariablesRendered(self):
        self._logger.info('Epoch finished', epoch=3, loss=0.5)

        line = self._stream.getvalue()
        self.assertIn('(I) Epoch finished', line)
        self.assertIn('"epoch": 3', line)
        self.assertIn('"loss": 0.5', line)

    def testSeverityFilter(self):
        self._logger.verbose('Step', step=1)
        self.assertEqual(self._stream.getvalue(), '')

    def testNumpyValues(self):
        self._logger.debug('Frame', row=np.array([0.5, -0.5]), k=np.int64(4))
        self.assertIn('"row": [0.5, -0.5]', self._stream.getvalue())
        self.assertIn('"k": 4', self._stream.getvalue())

    def testLogAndRaise(self):
        with self.assertRaises(core.errors.ConfigError) as context:
            self._logger.log_and_raise(
                'error', 'Bad frame', k=2, exc_type=core.errors.ConfigError
            )

        self.assertEqual(str(context.exception), 'Bad frame')
        self.assertIn('(E) Bad frame', self._stream.getvalue())
        self.assertEqual(self._logger.first_error['msg'], 'Bad frame')

    def testFirstErrorSharedWithChildren(self):
        child = self._logger.get_child('trainer')
        child.error('Loss diverged', step=4)
        child.error('Second failure')

        self.assertEqual(self._logger.first_error['msg'], 'Loss diverged')
        self._logger.clear_first_error()
        self.assertIsNone(child.first_error)

    def testSecondClientDoesNotStackHandlers(self):
        stream = io.StringIO()
        logger = clients.logging.Client(
            'hscalibrate.logging-tests', initial_severity='info', output_stream=stream
        ).logger
        logger.info('Once')

        self.assertEqual(stream.getvalue().count('Once'), 1)
        self.assertEqual(self._stream.getvalue(), '')


class TestLogFile(unittest.TestCase):
    def testJsonLines(self):
        with tempfile.TemporaryDirectory() as output_dir:
            client = clients.logging.Client(
                'hscalibrate.file-tests',
                initial_severity='info',
                output_stdout=False,
                output_dir=output_dir,
            )
            client.logger.info('Wrote checkpoint', path='model.json')
            for handler in client.logger.handlers:
                handler.close()

            with open(os.path.join(output_dir, 'hscalibrate.file.tests.log')) as fh:
                record = simplejson.loads(fh.readline())

        self.assertEqual(record['what'], 'Wrote checkpoint')
        self.assertEqual(record['severity'], 'INFO')
        self.assertEqual(record['more'], {'path': 'model.json'})
