import logging
import os
import unittest
from unittest import mock

from outlierscope.tasks import ScoreTask, TaskSet
from outlierscope.tests.model_test_utils import MockLoggingHandler
from outlierscope.utils import WorkerError

logger = logging.getLogger('outlierscope')
mock_handler = MockLoggingHandler()


def setUpModule():
    logger.addHandler(mock_handler)
    logger.setLevel(logging.DEBUG)


def tearDownModule():
    logger.removeHandler(mock_handler)


def score(tokens):
    if not tokens:
        raise ValueError('empty sample')
    return float(sum(tokens)), len(tokens) - 1


class ScoreTaskTest(unittest.TestCase):

    def setUp(self):
        mock_handler.reset()

    def test_execute(self):
        task = ScoreTask([(0, [1, 2, 3]), (4, [5, 5])]).execute(score)
        self.assertIsNone(task.err)
        self.assertEqual(task.results, {0: (6.0, 2), 4: (10.0, 1)})

    def test_error_is_kept(self):
        task = ScoreTask([(0, [1]), (1, [])]).execute(score)
        self.assertIsInstance(task.err, ValueError)
        self.assertEqual(len(mock_handler.messages['error']), 1)


class TaskSetTest(unittest.TestCase):

    def setUp(self):
        self.samples = [[i, i + 1, i + 2] for i in range(7)]

    def test_shards(self):
        tasks = TaskSet.shards(self.samples, 3)
        self.assertEqual(len(tasks), 3)
        indices = sorted(i for task in tasks for i, _ in task.samples)
        self.assertEqual(indices, list(range(7)))

    def test_parallel_execute(self):
        tasks = TaskSet.shards(self.samples, 3)
        tasks.parallel_execute(score, pool_size=2)
        self.assertEqual(len(tasks), 3)
        results = {}
        for task in tasks:
            self.assertIsNone(task.err)
            results.update(task.results)
        self.assertEqual(results, {i: score(s)
                                   for i, s in enumerate(self.samples)})

    def test_worker_errors_come_back(self):
        tasks = TaskSet.shards(self.samples + [[]], 2)
        tasks.parallel_execute(score)
        errors = [task.err for task in tasks if task.err]
        self.assertEqual(len(errors), 1)
        self.assertIsInstance(errors[0], ValueError)

    def test_dead_worker_raises(self):
        def crash(tokens):
            os._exit(1)

        tasks = TaskSet.shards(self.samples, 2)
        with mock.patch('outlierscope.tasks.RESULT_POLL_SECS', 0.1):
            with self.assertRaises(WorkerError):
                tasks.parallel_execute(crash)
