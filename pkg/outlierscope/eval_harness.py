"""Corpus sampling and perplexity evaluation.

Corpora are tokenized as one stream and cut into non-overlapping windows
of `sequence_length` tokens (the short tail is dropped); `sample_count`
windows are drawn without replacement under `seed`. Every window is scored
on next-token prediction over its positions 1..L-1, and perplexity is
exp of the mean negative log-likelihood over every scored token.
"""
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from tqdm import tqdm

from outlierscope import (DEFAULT_SAMPLE_COUNT, DEFAULT_SEED,
                          DEFAULT_SEQUENCE_LENGTH)
from outlierscope.dict_logging import secs_since
from outlierscope.interventions import plans_digest
from outlierscope.tasks import TaskSet
from outlierscope.utils import CorpusError, digest

logger = logging.getLogger(__name__)

WIKITEXT = 'wikitext'
C4 = 'c4'
LOCAL_TEXT = 'local_text'
DATASETS = (WIKITEXT, C4, LOCAL_TEXT)

WIKITEXT_PATH = ('wikitext', 'wikitext-2-raw-v1')
C4_PATH = 'allenai/c4'
C4_SHARD = 'en/c4-validation.00000-of-00008.json.gz'
# Documents read from the C4 validation shard.
C4_DOCUMENTS = 3000


@dataclass(frozen=True)
class EvalConfig:
    dataset: str = WIKITEXT
    sample_count: int = DEFAULT_SAMPLE_COUNT
    seed: int = DEFAULT_SEED
    sequence_length: int = DEFAULT_SEQUENCE_LENGTH
    stride: int = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError('dataset must be one of {0}, got {1}'.format(
                ', '.join(DATASETS), self.dataset))
        if self.sample_count < 1:
            raise ValueError('sample_count must be at least 1')
        if self.sequence_length < 2:
            raise ValueError('sequence_length must be at least 2')
        if self.stride is None:
            object.__setattr__(self, 'stride', self.sequence_length)
        if self.stride < 1:
            raise ValueError('stride must be at least 1')

    def check_model(self, descriptor):
        if self.sequence_length > descriptor.max_sequence_length:
            raise CorpusError(
                'sequence length {0} exceeds {1} maximum {2}'.format(
                    self.sequence_length, descriptor.model_id,
                    descriptor.max_sequence_length))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PplResult:
    perplexity: float
    token_count: int
    sample_count: int
    nll_mean: float
    plan_digest: str
    config: EvalConfig = None
    diverged: bool = False
    elapsed: float = field(default=0.0, compare=False)

    def to_dict(self):
        return {'perplexity': self.perplexity,
                'token_count': self.token_count,
                'sample_count': self.sample_count,
                'nll_mean': self.nll_mean,
                'plan_digest': self.plan_digest,
                'config': self.config.to_dict() if self.config else None,
                'diverged': self.diverged}


def _read_jsonl(path):
    """Yield records of a JSON-lines file."""
    with open(path) as f:
        for number, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except ValueError as err:
                raise CorpusError('{0}:{1}: {2}'.format(path, number, err))


def _read_local(path):
    """Return text, or a list of pre-tokenized id lists, from a file.

    ``.txt`` files are read whole. ``.jsonl``/``.json`` files hold one
    record per line with a ``text`` field, or an ``input_ids`` field of
    token ids.
    """
    if not os.path.isfile(path):
        raise CorpusError('corpus file {0} does not exist'.format(path))
    if path.endswith('.txt'):
        with open(path) as f:
            return f.read()
    if path.endswith(('.jsonl', '.json')):
        texts = []
        ids = []
        for record in _read_jsonl(path):
            if 'input_ids' in record:
                ids.append([int(i) for i in record['input_ids']])
            elif 'text' in record:
                texts.append(record['text'])
            else:
                raise CorpusError(
                    '{0}: records need `text` or `input_ids`'.format(path))
        if ids and texts:
            raise CorpusError(
                '{0}: mixes `text` and `input_ids` records'.format(path))
        return ids if ids else '\n'.join(texts)
    raise CorpusError('unsupported corpus file {0}'.format(path))


def load_corpus(config, corpus_location=None):
    """Return a corpus as text, or as a list of pre-tokenized id lists.

    WikiText-2 (raw, test split) and the first C4 validation shard are
    read through `datasets` unless `corpus_location` names a local file.
    """
    if corpus_location:
        return _read_local(corpus_location)
    if config.dataset == LOCAL_TEXT:
        raise CorpusError('local_text needs a corpus location')

    from datasets import load_dataset

    start_time = time.time()
    if config.dataset == WIKITEXT:
        data = load_dataset(*WIKITEXT_PATH, split='test')
        text = '\n\n'.join(data['text'])
    else:
        data = load_dataset(C4_PATH, data_files={'validation': C4_SHARD},
                            split='validation')
        count = min(C4_DOCUMENTS, len(data))
        text = '\n'.join(data.select(range(count))['text'])
    logger.info({'msg': 'loaded corpus', 'dataset': config.dataset,
                 'chars': len(text), 'elapsed': secs_since(start_time)})
    return text


def sample_corpus(config, corpus_location=None, encode=None):
    """Draw `config.sample_count` token windows from a corpus.

    :param EvalConfig config: dataset, sample count, seed and window size
    :param str corpus_location: local corpus file, if any
    :param encode: callable turning text into token ids; not needed for
                   pre-tokenized corpora
    :returns: token id lists of exactly `sequence_length` tokens
    :rtype: list(list(int))
    :raises CorpusError: if the corpus yields fewer windows than requested
    """
    corpus = load_corpus(config, corpus_location)
    if isinstance(corpus, str):
        if encode is None:
            raise CorpusError('a text corpus needs a tokenizer')
        stream = list(encode(corpus))
    else:
        stream = [i for ids in corpus for i in ids]

    length = config.sequence_length
    windows = [stream[s:s + length]
               for s in range(0, len(stream) - length + 1, config.stride)]
    if len(windows) < config.sample_count:
        err = CorpusError(
            'corpus yields {0} windows of {1} tokens, {2} requested'.format(
                len(windows), length, config.sample_count))
        logger.error({'msg': 'exiting sample_corpus', 'err': err})
        raise err

    rng = np.random.default_rng(config.seed)
    picks = rng.choice(len(windows), size=config.sample_count,
                       replace=False)
    samples = [windows[int(i)] for i in picks]
    logger.info({'msg': 'sampled corpus', 'dataset': config.dataset,
                 'tokens': len(stream), 'windows': len(windows),
                 'samples': len(samples), 'seed': config.seed})
    return samples


def samples_digest(samples):
    return digest([[int(t) for t in s] for s in samples])


def sequence_nll(model, tokens, plans=()):
    """Summed next-token NLL of one sequence and the scored token count."""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    logits, _ = model.run(tokens, plans=plans)
    log_probs = torch.log_softmax(logits.to(torch.float64), dim=-1)
    targets = tokens[1:]
    picked = log_probs[:-1].gather(1, targets.unsqueeze(1))
    return -float(picked.sum()), int(targets.shape[0])


def evaluate_ppl(model, samples, plan=None, workers=1, progress=False,
                 config=None):
    """Compute perplexity over samples, with plans applied on every pass.

    Per-sample NLL sums are added in sample order, so the result does not
    depend on how samples were split across workers.

    :param DecoderModel model:
    :param samples: token id sequences
    :param plan: an InterventionPlan, a list of them, or None
    :param int workers: worker processes; only parameter plans run in
                        parallel
    :param bool progress: show a progress bar
    :param EvalConfig config: recorded in the result
    :rtype: PplResult
    :raises CorpusError: if there are no samples
    :raises PlanError: if a plan does not fit the model or a sample
    """
    samples = list(samples)
    if not samples:
        err = CorpusError('cannot evaluate perplexity on no samples')
        logger.error({'msg': 'exiting evaluate_ppl', 'err': err})
        raise err

    if plan is None:
        plans = []
    elif isinstance(plan, (list, tuple)):
        plans = list(plan)
    else:
        plans = [plan]
    for p in plans:
        for length in sorted({len(s) for s in samples}):
            p.validate(model.descriptor, length)

    start_time = time.time()
    digest_ = plans_digest(plans)

    if workers > 1 and any(p.is_tap_plan for p in plans):
        logger.warning({'msg': 'tap plans need serialized passes, '
                        'scoring serially', 'workers': workers})
        workers = 1

    if workers > 1:
        nlls = _parallel_nlls(model, samples, plans, workers)
    else:
        iterator = tqdm(samples, desc='perplexity', disable=not progress)
        nlls = [sequence_nll(model, s, plans) for s in iterator]

    total = 0.0
    token_count = 0
    for nll, count in nlls:
        total += nll
        token_count += count

    nll_mean = total / token_count
    diverged = not math.isfinite(nll_mean)
    if not diverged:
        try:
            perplexity = math.exp(nll_mean)
        except OverflowError:
            perplexity = math.inf
        diverged = not math.isfinite(perplexity)
    else:
        perplexity = nll_mean if math.isnan(nll_mean) else math.inf

    result = PplResult(perplexity=perplexity, token_count=token_count,
                       sample_count=len(samples), nll_mean=nll_mean,
                       plan_digest=digest_, config=config, diverged=diverged,
                       elapsed=time.time() - start_time)
    log = logger.warning if diverged else logger.info
    log({'msg': 'finished perplexity evaluation', 'ppl': perplexity,
         'plan': digest_, 'samples': len(samples), 'diverged': diverged,
         'elapsed': secs_since(start_time)})
    return result


def _parallel_nlls(model, samples, plans, workers):
    def score(tokens):
        return sequence_nll(model, tokens, plans)

    tasks = TaskSet.shards(samples, min(workers, len(samples)))
    tasks.parallel_execute(score, pool_size=len(tasks))

    results = {}
    for task in tasks:
        if task.err:
            raise task.err
        results.update(task.results)
    return [results[i] for i in range(len(samples))]
