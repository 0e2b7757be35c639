import collections.abc
import logging
import multiprocessing
import queue
import threading
import time
import uuid

import torch

from outlierscope.dict_logging import DictQueueHandler, secs_since
from outlierscope.utils import WorkerError

logger = logging.getLogger(__name__)

# Worker processes inherit the resident model instead of pickling it.
_CONTEXT = 'fork'

# How often the parent checks on its workers while waiting for results.
RESULT_POLL_SECS = 5


class ScoreTask(object):
    """A shard of evaluation samples to score. Usable in parallel.

    Holds (sample_index, tokens) pairs and, once executed, the summed
    negative log-likelihood and scored token count of each sample in
    `results`, keyed by sample index. Any error is stored in `err` and
    logged; **the caller must check `err` before using the results.**
    """

    # Keep a class constant reference to the module-level logger.
    logger = logger

    def __init__(self, samples, id_=None):
        """
        :param samples: (sample_index, tokens) pairs
        :param id_: unique identifier, a uuid by default
        """
        self.samples = list(samples)
        self.id_ = id_ or uuid.uuid4()
        self.results = {}
        self.err = None

    def __repr__(self):
        return 'ScoreTask(samples={0}, id_={1})'.format(len(self.samples),
                                                        self.id_)

    def _get_logger(self, logq):
        """Return the module logger, or a queue logger inside a worker."""
        if not logq:
            return self.logger

        # See the DictQueueHandler docstring for why the stock
        # QueueHandler can't be used here.
        local_logger = logging.getLogger(str(self.id_))
        local_logger.setLevel(logging.DEBUG)
        if not local_logger.handlers:
            local_logger.addHandler(DictQueueHandler(logq))
        return local_logger

    def execute(self, score, logq=None):
        """Score every sample of the shard with `score(tokens)`.

        :param score: callable returning (nll_sum, token_count)
        :param Queue logq: queue to log on inside a worker
        :returns: self
        """
        log = self._get_logger(logq)
        start_time = time.time()
        self.results = {}
        self.err = None

        log.debug({'msg': 'scoring shard', 'samples': len(self.samples)})
        try:
            for index, tokens in self.samples:
                self.results[index] = score(tokens)
        except Exception as err:
            self.err = err
            log.error({'msg': 'shard failed', 'err': err,
                       'elapsed': secs_since(start_time)})
        else:
            log.debug({'msg': 'scored shard', 'samples': len(self.samples),
                       'elapsed': secs_since(start_time)})

        return self


class TaskSet(collections.abc.Sequence):
    """Shards of one evaluation, in sample order, with `parallel_execute`."""

    def __init__(self, tasks=()):
        self.tasks = list(tasks)

    def __getitem__(self, index):
        return self.tasks[index]

    def __len__(self):
        return len(self.tasks)

    @classmethod
    def shards(cls, samples, count):
        """Split samples into `count` contiguous ScoreTasks."""
        indexed = list(enumerate(samples))
        size = -(-len(indexed) // count)
        return cls(ScoreTask(indexed[i:i + size])
                   for i in range(0, len(indexed), size))

    def parallel_execute(self, score, pool_size=None):
        """Score every shard in `pool_size` forked worker processes.

        Shards go out on a joinable task queue and come back finished on a
        result queue; worker log records travel on a third queue that a
        `_logger_thread` drains into this process's logger. Finished shards
        replace the originals, still in sample order.

        :param score: callable passed to each task's execute
        :param int pool_size: number of workers, one per shard by default
        :returns: self with finished tasks
        :rtype: TaskSet
        """
        ctx = multiprocessing.get_context(_CONTEXT)
        pool_size = pool_size or len(self)
        taskq = ctx.JoinableQueue()
        resq = ctx.Queue()
        logq = ctx.Queue()

        logger.info({'msg': 'scoring samples in parallel',
                     'tasks': len(self), 'pool_size': pool_size})

        workers = [ctx.Process(target=_worker_process,
                               args=(score, taskq, resq, logq))
                   for _ in range(pool_size)]
        for worker in workers:
            worker.start()
        for position, task in enumerate(self.tasks):
            taskq.put((position, task))

        relay = threading.Thread(target=_logger_thread, args=(logq,))
        relay.start()

        # A worker cannot exit while its results sit unread on resq.
        try:
            for _ in range(len(self.tasks)):
                position, task = _next_result(resq, workers)
                self.tasks[position] = task
        except WorkerError:
            for worker in workers:
                worker.terminate()
            raise
        finally:
            logq.put(None)
            relay.join()
        taskq.join()

        for _ in workers:
            taskq.put(None)
        for worker in workers:
            worker.join()
        return self


def _next_result(resq, workers):
    """Take the next finished task, raising once a worker has died."""
    while True:
        try:
            return resq.get(timeout=RESULT_POLL_SECS)
        except queue.Empty:
            dead = [w for w in workers if not w.is_alive()]
            if dead:
                logger.error({'msg': 'scoring worker died',
                              'exitcodes': [w.exitcode for w in dead]})
                raise WorkerError('{0} scoring worker(s) exited before '
                                  'finishing'.format(len(dead)))


def _worker_process(score, taskq, resq, logq):
    """Execute (position, task) items from taskq until a None arrives.

    Finished tasks go back on resq with their position.
    """
    # One intra-op thread per worker; the pool is the parallelism.
    torch.set_num_threads(1)
    for item in iter(taskq.get, None):
        position, task = item
        resq.put((position, task.execute(score, logq=logq)))
        taskq.task_done()


def _logger_thread(logq):
    """Hand worker records to the module logger until a None arrives.

    logger.handle skips the level check, so it is done here.
    """
    for record in iter(logq.get, None):
        if logger.isEnabledFor(record.levelno):
            logger.handle(record)
