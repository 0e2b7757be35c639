import json
import logging
import unittest

import numpy as np
import torch

from outlierscope.dict_logging import DictLogFilter, stringify
from outlierscope.tests.model_test_utils import MockLoggingHandler


class DictLogFilterTest(unittest.TestCase):

    def setUp(self):
        self.logger = logging.getLogger('outlierscope.tests.dict_logging')
        self.logger.propagate = False
        self.logger.setLevel(logging.DEBUG)
        self.handler = MockLoggingHandler()
        self.logger.handlers = [self.handler]

    def test_json(self):
        self.handler.addFilter(DictLogFilter('json'))
        self.logger.info({'msg': 'detected massive activations',
                          'layer': 3, 'count': 2})
        message = json.loads(self.handler.messages['info'][0])
        self.assertEqual(message['msg'], 'detected massive activations')
        self.assertEqual(message['layer'], '3')
        self.assertEqual(message['level'], 'info')
        self.assertIn('time', message)

    def test_text(self):
        self.handler.addFilter(DictLogFilter('text'))
        self.logger.warning({'msg': 'diverged', 'ppl': float('inf')})
        line = self.handler.messages['warning'][0]
        self.assertIn('msg="diverged"', line)
        self.assertIn('ppl="inf"', line)
        self.assertIn('level="warning"', line)

    def test_tty(self):
        self.handler.addFilter(DictLogFilter('tty'))
        self.logger.error({'msg': 'bad plan', 'layer': 1})
        line = self.handler.messages['error'][0]
        self.assertIn('bad plan', line)
        self.assertIn('ERRO', line)

    def test_non_dict_passes(self):
        self.handler.addFilter(DictLogFilter('json'))
        self.logger.info('plain %s', 'text')
        self.assertEqual(self.handler.messages['info'], ['plain text'])


class StringifyTest(unittest.TestCase):

    def test_scalars_and_tensors(self):
        self.assertEqual(stringify(3), '3')
        self.assertEqual(stringify(0.1234567891), '0.123457')
        self.assertEqual(stringify(True), 'True')
        self.assertEqual(stringify(torch.tensor(2.5)), '2.5')
        self.assertEqual(stringify(np.float64(1.0)), '1')
        self.assertEqual(stringify(torch.zeros(2, 3)),
                         'tensor(shape=[2, 3], dtype=torch.float32)')

    def test_containers(self):
        self.assertEqual(stringify({'a': [1, 2.0], 'b': (3,)}),
                         {'a': ['1', '2'], 'b': ['3']})
